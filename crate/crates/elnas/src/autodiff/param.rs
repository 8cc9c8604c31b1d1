//! Learnable parameters and the per-network parameter registry.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand_distr::{Distribution, Normal};

use crate::rng::Rng;
use crate::scalar::Scalar;

/// A named tensor owned by a network module.
///
/// `learnable` distinguishes trainable weights from buffers such as
/// batch-norm running statistics: buffers are checkpointed but never
/// receive gradients and are excluded from parameter counts.
pub struct ParamCell<T: Scalar> {
    name: String,
    pub value: RefCell<ArrayD<T>>,
    pub grad: RefCell<ArrayD<T>>,
    learnable: bool,
    frozen: Cell<bool>,
}

impl<T: Scalar> ParamCell<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn learnable(&self) -> bool {
        self.learnable
    }

    /// Frozen parameters take part in forward passes but are treated as
    /// constants by backprop and skipped by optimizers.
    pub fn frozen(&self) -> bool {
        self.frozen.get()
    }

    pub fn set_frozen(&self, frozen: bool) {
        self.frozen.set(frozen);
    }

    pub fn numel(&self) -> usize {
        self.value.borrow().len()
    }

    pub fn zero_grad(&self) {
        self.grad.borrow_mut().fill(T::zero());
    }

    pub fn add_grad(&self, g: &ArrayD<T>) {
        let mut grad = self.grad.borrow_mut();
        debug_assert_eq!(grad.shape(), g.shape(), "gradient shape mismatch for {}", self.name);
        *grad += g;
    }
}

/// Ordered registry of every parameter and buffer in a network.
///
/// Registration order is fixed by construction, which keeps optimizer
/// traversal and checkpoint layout deterministic.
pub struct ParamSet<T: Scalar> {
    entries: Vec<Rc<ParamCell<T>>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<T>, learnable: bool) -> Rc<ParamCell<T>> {
        let name = name.into();
        assert!(
            self.entries.iter().all(|p| p.name != name),
            "duplicate parameter name: {name}"
        );
        let grad = ArrayD::zeros(value.raw_dim());
        let cell = Rc::new(ParamCell {
            name,
            value: RefCell::new(value),
            grad: RefCell::new(grad),
            learnable,
            frozen: Cell::new(false),
        });
        self.entries.push(cell.clone());
        cell
    }

    pub fn iter(&self) -> impl Iterator<Item = &Rc<ParamCell<T>>> {
        self.entries.iter()
    }

    pub fn learnable(&self) -> impl Iterator<Item = &Rc<ParamCell<T>>> {
        self.entries.iter().filter(|p| p.learnable)
    }

    pub fn get(&self, name: &str) -> Option<&Rc<ParamCell<T>>> {
        self.entries.iter().find(|p| p.name == name)
    }

    /// Number of learnable scalars; buffers are excluded.
    pub fn count_learnable_scalars(&self) -> u64 {
        self.learnable().map(|p| p.numel() as u64).sum()
    }

    pub fn zero_grads(&self) {
        for p in self.learnable() {
            p.zero_grad();
        }
    }

    pub fn freeze_all(&self) {
        for p in self.entries.iter() {
            p.set_frozen(true);
        }
    }

    /// Copy of every entry as `(name, value)`, in registration order.
    pub fn snapshot(&self) -> Vec<(String, ArrayD<T>)> {
        self.entries
            .iter()
            .map(|p| (p.name.clone(), p.value.borrow().clone()))
            .collect()
    }

    /// Load values produced by [`ParamSet::snapshot`] into this set.
    ///
    /// The name sets and shapes must match exactly; anything else means the
    /// checkpoint disagrees with the freshly built network.
    pub fn load_snapshot(&self, entries: &[(String, ArrayD<T>)]) -> crate::Result<()> {
        if entries.len() != self.entries.len() {
            return Err(crate::Error::config(format!(
                "checkpoint has {} tensors, network expects {}",
                entries.len(),
                self.entries.len()
            )));
        }
        for (name, value) in entries {
            let cell = self.get(name).ok_or_else(|| {
                crate::Error::config(format!("checkpoint tensor `{name}` not present in network"))
            })?;
            let mut dst = cell.value.borrow_mut();
            if dst.shape() != value.shape() {
                return Err(crate::Error::config(format!(
                    "checkpoint tensor `{name}` has shape {:?}, network expects {:?}",
                    value.shape(),
                    dst.shape()
                )));
            }
            dst.assign(value);
        }
        Ok(())
    }
}

/// He (fan-in) normal initialization for convolution and linear weights.
pub fn he_normal<T: Scalar>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> ArrayD<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::from_f64(dist.sample(rng)))
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(shape), T::one())
}
