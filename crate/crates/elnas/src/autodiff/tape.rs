//! Reverse-mode autodiff over an append-only operation tape.
//!
//! Each forward call appends a node holding the computed value plus what
//! backward needs. Nodes are created in topological order, so backward is
//! a single reverse sweep with deterministic accumulation order.

use std::rc::Rc;

use ndarray::{s, Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};

use super::kernels::{self, ConvMeta};
use super::param::ParamCell;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum BnStats<T: Scalar> {
    /// Batch statistics; gradients include the mean/variance terms.
    Batch { mean: Array1<T>, inv_std: Array1<T> },
    /// Fixed running statistics; treated as constants.
    Running { mean: Array1<T>, inv_std: Array1<T> },
}

enum Op<T: Scalar> {
    Input,
    Param(Rc<ParamCell<T>>),
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, meta: ConvMeta },
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, stats: BnStats<T> },
    Relu { x: NodeId },
    MaxPool { x: NodeId, k: usize, s: usize, p: usize, argmax: Vec<u32> },
    AvgPool { x: NodeId, k: usize, s: usize, p: usize },
    AdaptiveAvgPool { x: NodeId, out_hw: (usize, usize) },
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: T },
    ConcatChannels { xs: Vec<NodeId> },
    WeightedSum { xs: Vec<NodeId>, w: NodeId },
    SoftmaxRows { x: NodeId },
    Row { x: NodeId, index: usize },
    Reshape { x: NodeId },
    ChannelGroupMean { x: NodeId, factor: usize },
    AttentionMap { x: NodeId, power: f64 },
    Mse { a: NodeId, b: NodeId },
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
    KlDiv { student: NodeId, teacher: NodeId },
    SelectItem { x: NodeId, row: usize, col: usize },
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    needs_grad: bool,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.len(), 1, "node is not a scalar");
        *v.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<T>, needs_grad: bool, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, needs_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ---- leaves ----

    pub fn input(&mut self, value: ArrayD<T>) -> NodeId {
        self.push(value, false, Op::Input)
    }

    pub fn param(&mut self, p: &Rc<ParamCell<T>>) -> NodeId {
        let value = p.value.borrow().clone();
        let needs = p.learnable() && !p.frozen();
        self.push(value, needs, Op::Param(p.clone()))
    }

    // ---- layers ----

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, meta: ConvMeta) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let bv = b.map(|bid| self.nodes[bid.0].value.view().into_dimensionality::<Ix1>().unwrap());
        let y = kernels::conv2d_forward(&xv, &wv, bv.as_ref(), &meta);
        let needs = self.needs(x) || self.needs(w) || b.map(|bid| self.needs(bid)).unwrap_or(false);
        self.push(y.into_dyn(), needs, Op::Conv2d { x, w, b, meta })
    }

    /// `x`: (N, F), `w`: (O, F), bias (O); returns (N, O).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let mut y = Array2::zeros((xv.shape()[0], wv.shape()[0]));
        ndarray::linalg::general_mat_mul(T::one(), &xv, &wv.t(), T::zero(), &mut y);
        if let Some(bid) = b {
            let bv = self.nodes[bid.0].value.view().into_dimensionality::<Ix1>().unwrap();
            for mut row in y.rows_mut() {
                row += &bv;
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.map(|bid| self.needs(bid)).unwrap_or(false);
        self.push(y.into_dyn(), needs, Op::Linear { x, w, b })
    }

    /// Batch norm; in training mode also returns the batch statistics so
    /// the owning layer can update its running buffers.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: (&Array1<T>, &Array1<T>),
        eps: T,
        train: bool,
    ) -> (NodeId, Option<(Array1<T>, Array1<T>)>) {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let gv = self.nodes[gamma.0].value.view().into_dimensionality::<Ix1>().unwrap();
        let bv = self.nodes[beta.0].value.view().into_dimensionality::<Ix1>().unwrap();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        if train {
            let out = kernels::bn_forward_train(&xv, &gv, &bv, eps);
            let stats = BnStats::Batch { mean: out.mean.clone(), inv_std: out.inv_std };
            let id = self.push(out.y.into_dyn(), needs, Op::BatchNorm { x, gamma, beta, stats });
            (id, Some((out.mean, out.var)))
        } else {
            let (y, inv_std) = kernels::bn_forward_eval(&xv, &gv, &bv, &running.0.view(), &running.1.view(), eps);
            let stats = BnStats::Running { mean: running.0.clone(), inv_std };
            let id = self.push(y.into_dyn(), needs, Op::BatchNorm { x, gamma, beta, stats });
            (id, None)
        }
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.nodes[x.0].value.mapv(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        self.push(y, needs, Op::Relu { x })
    }

    pub fn max_pool(&mut self, x: NodeId, k: usize, s: usize, p: usize) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (y, argmax) = kernels::max_pool_forward(&xv, k, s, p);
        let needs = self.needs(x);
        self.push(y.into_dyn(), needs, Op::MaxPool { x, k, s, p, argmax })
    }

    pub fn avg_pool(&mut self, x: NodeId, k: usize, s: usize, p: usize) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let y = kernels::avg_pool_forward(&xv, k, s, p);
        let needs = self.needs(x);
        self.push(y.into_dyn(), needs, Op::AvgPool { x, k, s, p })
    }

    pub fn adaptive_avg_pool(&mut self, x: NodeId, out_hw: (usize, usize)) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        if (xv.shape()[2], xv.shape()[3]) == out_hw {
            return x;
        }
        let y = kernels::adaptive_avg_pool_forward(&xv, out_hw);
        let needs = self.needs(x);
        self.push(y.into_dyn(), needs, Op::AdaptiveAvgPool { x, out_hw })
    }

    /// Global average pooling producing (N, C).
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let pooled = self.adaptive_avg_pool(x, (1, 1));
        let n = self.nodes[pooled.0].value.shape()[0];
        let c = self.nodes[pooled.0].value.shape()[1];
        self.reshape(pooled, &[n, c])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape(), "add shape mismatch");
        let y = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(y, needs, Op::Add { a, b })
    }

    pub fn add_all(&mut self, ids: &[NodeId]) -> NodeId {
        assert!(!ids.is_empty());
        let mut acc = ids[0];
        for &id in &ids[1..] {
            acc = self.add(acc, id);
        }
        acc
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let y = self.nodes[x.0].value.mapv(|v| v * c);
        let needs = self.needs(x);
        self.push(y, needs, Op::Scale { x, c })
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        // copy into a standard-layout buffer; kernels assume contiguity
        let first = self.nodes[xs[0].0].value.shape();
        let (n, h, w) = (first[0], first[2], first[3]);
        let total_c: usize = xs.iter().map(|id| self.nodes[id.0].value.shape()[1]).sum();
        let mut y = ArrayD::zeros(IxDyn(&[n, total_c, h, w]));
        let mut offset = 0;
        for &id in xs {
            let v = &self.nodes[id.0].value;
            let c = v.shape()[1];
            y.slice_mut(s![.., offset..offset + c, .., ..])
                .assign(&v.view().into_dimensionality::<Ix4>().unwrap());
            offset += c;
        }
        let needs = xs.iter().any(|&id| self.needs(id));
        self.push(y, needs, Op::ConcatChannels { xs: xs.to_vec() })
    }

    /// `Σ_k w[k] · xs[k]` with `w` a 1-D node of length `xs.len()`.
    pub fn weighted_sum(&mut self, xs: &[NodeId], w: NodeId) -> NodeId {
        assert!(!xs.is_empty());
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        assert_eq!(wv.len(), xs.len(), "one weight per branch");
        let mut y = self.nodes[xs[0].0].value.mapv(|v| v * wv[0]);
        for (k, &id) in xs.iter().enumerate().skip(1) {
            let xv = &self.nodes[id.0].value;
            assert_eq!(xv.shape(), y.shape(), "weighted sum shape mismatch");
            ndarray::Zip::from(&mut y).and(xv).for_each(|o, &v| *o = *o + v * wv[k]);
        }
        let needs = self.needs(w) || xs.iter().any(|&id| self.needs(id));
        self.push(y, needs, Op::WeightedSum { xs: xs.to_vec(), w })
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let y = kernels::softmax_rows(&xv);
        let needs = self.needs(x);
        self.push(y.into_dyn(), needs, Op::SoftmaxRows { x })
    }

    /// Select row `index` of a 2-D node as a 1-D node.
    pub fn row(&mut self, x: NodeId, index: usize) -> NodeId {
        let y = self.nodes[x.0].value.index_axis(Axis(0), index).to_owned();
        let needs = self.needs(x);
        self.push(y, needs, Op::Row { x, index })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = &self.nodes[x.0].value;
        let y = v
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape preserves element count");
        let needs = self.needs(x);
        self.push(y, needs, Op::Reshape { x })
    }

    /// Average groups of `factor` adjacent channels: (N, C, H, W) -> (N, C/factor, H, W).
    pub fn channel_group_mean(&mut self, x: NodeId, factor: usize) -> NodeId {
        if factor == 1 {
            return x;
        }
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert_eq!(c % factor, 0, "channels {c} not divisible by group factor {factor}");
        let co = c / factor;
        let mut y = ndarray::Array4::<T>::zeros((n, co, h, w));
        for ni in 0..n {
            for ci in 0..co {
                let mut acc = y.slice_mut(s![ni, ci, .., ..]);
                for f in 0..factor {
                    acc += &xv.slice(s![ni, ci * factor + f, .., ..]);
                }
                acc.mapv_inplace(|v| v / T::from_usize(factor));
            }
        }
        let needs = self.needs(x);
        self.push(y.into_dyn(), needs, Op::ChannelGroupMean { x, factor })
    }

    /// Channel-mean of |x|^p: (N, C, H, W) -> (N, 1, H, W).
    pub fn attention_map(&mut self, x: NodeId, power: f64) -> NodeId {
        assert!(power >= 1.0, "attention power must be >= 1");
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut y = ndarray::Array4::<T>::zeros((n, 1, h, w));
        let pw = T::from_f64(power);
        let square = (power - 2.0).abs() < 1e-12;
        for ni in 0..n {
            let mut plane = y.slice_mut(s![ni, 0, .., ..]);
            for ci in 0..c {
                let xp = xv.slice(s![ni, ci, .., ..]);
                if square {
                    ndarray::Zip::from(&mut plane).and(&xp).for_each(|o, &v| *o = *o + v * v);
                } else {
                    ndarray::Zip::from(&mut plane).and(&xp).for_each(|o, &v| *o = *o + v.abs().powf(pw));
                }
            }
            plane.mapv_inplace(|v| v / T::from_usize(c));
        }
        let needs = self.needs(x);
        self.push(y.into_dyn(), needs, Op::AttentionMap { x, power })
    }

    /// Mean over all elements of (a-b)^2, as a scalar node.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.shape(), bv.shape(), "mse shape mismatch");
        let total = T::from_usize(av.len());
        let mut acc = T::zero();
        ndarray::Zip::from(av).and(bv).for_each(|&x, &y| {
            let d = x - y;
            acc += d * d;
        });
        let y = ArrayD::from_elem(IxDyn(&[]), acc / total);
        let needs = self.needs(a) || self.needs(b);
        self.push(y, needs, Op::Mse { a, b })
    }

    /// Mean cross-entropy of logits (N, C) against class indices.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let lv = self.nodes[logits.0].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let (n, c) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(labels.len(), n, "one label per sample");
        assert!(labels.iter().all(|&l| l < c), "label out of range");
        let lse = kernels::logsumexp_rows(&lv);
        let mut acc = T::zero();
        for i in 0..n {
            acc += lse[i] - lv[[i, labels[i]]];
        }
        let y = ArrayD::from_elem(IxDyn(&[]), acc / T::from_usize(n));
        let needs = self.needs(logits);
        self.push(y, needs, Op::CrossEntropy { logits, labels: labels.to_vec() })
    }

    /// Mean KL(teacher ‖ student) over rows of paired logits.
    pub fn kl_div(&mut self, student: NodeId, teacher: NodeId) -> NodeId {
        let sv = self.nodes[student.0].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let tv = self.nodes[teacher.0].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        assert_eq!(sv.shape(), tv.shape(), "kl logits shape mismatch");
        let n = sv.shape()[0];
        let s_lse = kernels::logsumexp_rows(&sv);
        let t_lse = kernels::logsumexp_rows(&tv);
        let mut acc = T::zero();
        for i in 0..n {
            for j in 0..sv.shape()[1] {
                let t_log = tv[[i, j]] - t_lse[i];
                let s_log = sv[[i, j]] - s_lse[i];
                acc += t_log.exp() * (t_log - s_log);
            }
        }
        let y = ArrayD::from_elem(IxDyn(&[]), acc / T::from_usize(n));
        let needs = self.needs(student) || self.needs(teacher);
        self.push(y, needs, Op::KlDiv { student, teacher })
    }

    /// Select one entry of a 2-D node as a scalar node.
    pub fn select_item(&mut self, x: NodeId, row: usize, col: usize) -> NodeId {
        let v = self.nodes[x.0].value[[row, col].as_ref()];
        let y = ArrayD::from_elem(IxDyn(&[]), v);
        let needs = self.needs(x);
        self.push(y, needs, Op::SelectItem { x, row, col })
    }

    // ---- backward ----

    /// Backpropagate from a scalar `root`, accumulating into parameter
    /// gradient cells. Gradients for node ids listed in `keep` are returned.
    pub fn backward_keep(&self, root: NodeId, keep: &[NodeId]) -> Vec<Option<ArrayD<T>>> {
        let rv = &self.nodes[root.0].value;
        assert_eq!(rv.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut kept: Vec<Option<ArrayD<T>>> = keep.iter().map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(rv.raw_dim(), T::one()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            if let Some(slot) = keep.iter().position(|k| k.0 == idx) {
                kept[slot] = Some(g);
            }
        }
        kept
    }

    pub fn backward(&self, root: NodeId) {
        self.backward_keep(root, &[]);
    }

    fn accumulate(grads: &mut [Option<ArrayD<T>>], id: NodeId, g: ArrayD<T>) {
        match &mut grads[id.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, g: &ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        match &self.nodes[idx].op {
            Op::Input => {}
            Op::Param(p) => {
                if p.learnable() && !p.frozen() {
                    p.add_grad(g);
                }
            }
            Op::Conv2d { x, w, b, meta } => {
                let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let out = kernels::conv2d_backward(&xv, &wv, b.is_some(), meta, &gv);
                if self.needs(*x) {
                    Self::accumulate(grads, *x, out.dx.into_dyn());
                }
                if self.needs(*w) {
                    Self::accumulate(grads, *w, out.dw.into_dyn());
                }
                if let (Some(bid), Some(db)) = (b, out.db) {
                    if self.needs(*bid) {
                        Self::accumulate(grads, *bid, db.into_dyn());
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                if self.needs(*x) {
                    let mut dx = Array2::zeros(xv.raw_dim());
                    ndarray::linalg::general_mat_mul(T::one(), &gv, &wv, T::zero(), &mut dx);
                    Self::accumulate(grads, *x, dx.into_dyn());
                }
                if self.needs(*w) {
                    let mut dw = Array2::zeros(wv.raw_dim());
                    ndarray::linalg::general_mat_mul(T::one(), &gv.t(), &xv, T::zero(), &mut dw);
                    Self::accumulate(grads, *w, dw.into_dyn());
                }
                if let Some(bid) = b {
                    if self.needs(*bid) {
                        let db = gv.sum_axis(Axis(0));
                        Self::accumulate(grads, *bid, db.into_dyn());
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, stats } => {
                let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let gammav = self.nodes[gamma.0].value.view().into_dimensionality::<Ix1>().unwrap();
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let (mean, inv_std, batch) = match stats {
                    BnStats::Batch { mean, inv_std } => (mean, inv_std, true),
                    BnStats::Running { mean, inv_std } => (mean, inv_std, false),
                };
                let out = kernels::bn_backward(&xv, &mean.view(), &inv_std.view(), &gammav, batch, &gv);
                if self.needs(*x) {
                    Self::accumulate(grads, *x, out.dx.into_dyn());
                }
                if self.needs(*gamma) {
                    Self::accumulate(grads, *gamma, out.dgamma.into_dyn());
                }
                if self.needs(*beta) {
                    Self::accumulate(grads, *beta, out.dbeta.into_dyn());
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = g.clone();
                    ndarray::Zip::from(&mut dx).and(xv).for_each(|o, &v| {
                        if v <= T::zero() {
                            *o = T::zero();
                        }
                    });
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::MaxPool { x, argmax, .. } => {
                if self.needs(*x) {
                    let shape = self.nodes[x.0].value.shape();
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let dx = kernels::max_pool_backward((shape[0], shape[1], shape[2], shape[3]), argmax, &gv);
                    Self::accumulate(grads, *x, dx.into_dyn());
                }
            }
            Op::AvgPool { x, k, s, p } => {
                if self.needs(*x) {
                    let shape = self.nodes[x.0].value.shape();
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let dx = kernels::avg_pool_backward((shape[0], shape[1], shape[2], shape[3]), *k, *s, *p, &gv);
                    Self::accumulate(grads, *x, dx.into_dyn());
                }
            }
            Op::AdaptiveAvgPool { x, out_hw } => {
                if self.needs(*x) {
                    let shape = self.nodes[x.0].value.shape();
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let dx = kernels::adaptive_avg_pool_backward((shape[0], shape[1], shape[2], shape[3]), *out_hw, &gv);
                    Self::accumulate(grads, *x, dx.into_dyn());
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g.clone());
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, g.mapv(|v| v * *c));
                }
            }
            Op::ConcatChannels { xs } => {
                let mut offset = 0usize;
                for &id in xs {
                    let c = self.nodes[id.0].value.shape()[1];
                    if self.needs(id) {
                        let part = g
                            .view()
                            .into_dimensionality::<Ix4>()
                            .unwrap()
                            .slice(s![.., offset..offset + c, .., ..])
                            .to_owned();
                        Self::accumulate(grads, id, part.into_dyn());
                    }
                    offset += c;
                }
            }
            Op::WeightedSum { xs, w } => {
                let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
                for (k, &id) in xs.iter().enumerate() {
                    if self.needs(id) {
                        Self::accumulate(grads, id, g.mapv(|v| v * wv[k]));
                    }
                }
                if self.needs(*w) {
                    let mut dw = Array1::zeros(xs.len());
                    for (k, &id) in xs.iter().enumerate() {
                        let xv = &self.nodes[id.0].value;
                        let mut acc = T::zero();
                        ndarray::Zip::from(g).and(xv).for_each(|&gv, &xvv| acc += gv * xvv);
                        dw[k] = acc;
                    }
                    Self::accumulate(grads, *w, dw.into_dyn());
                }
            }
            Op::SoftmaxRows { x } => {
                if self.needs(*x) {
                    let y = self.nodes[idx].value.view().into_dimensionality::<Ix2>().unwrap();
                    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut dx = Array2::zeros(y.raw_dim());
                    for i in 0..y.shape()[0] {
                        let yr = y.row(i);
                        let gr = gv.row(i);
                        let dot = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                        let mut dr = dx.row_mut(i);
                        for j in 0..yr.len() {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    Self::accumulate(grads, *x, dx.into_dyn());
                }
            }
            Op::Row { x, index } => {
                if self.needs(*x) {
                    let mut dx = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                    dx.index_axis_mut(Axis(0), *index).assign(g);
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    let dx = g
                        .clone()
                        .into_shape_with_order(self.nodes[x.0].value.raw_dim())
                        .expect("reshape grad");
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::ChannelGroupMean { x, factor } => {
                if self.needs(*x) {
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (n, co, h, w) = (gv.shape()[0], gv.shape()[1], gv.shape()[2], gv.shape()[3]);
                    let mut dx = ndarray::Array4::<T>::zeros((n, co * factor, h, w));
                    let inv = T::one() / T::from_usize(*factor);
                    for ni in 0..n {
                        for ci in 0..co {
                            let src = gv.slice(s![ni, ci, .., ..]);
                            for f in 0..*factor {
                                let mut dst = dx.slice_mut(s![ni, ci * factor + f, .., ..]);
                                ndarray::Zip::from(&mut dst).and(&src).for_each(|o, &v| *o = v * inv);
                            }
                        }
                    }
                    Self::accumulate(grads, *x, dx.into_dyn());
                }
            }
            Op::AttentionMap { x, power } => {
                if self.needs(*x) {
                    let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                    let inv_c = T::one() / T::from_usize(c);
                    let pw = T::from_f64(*power);
                    let square = (power - 2.0).abs() < 1e-12;
                    let mut dx = ndarray::Array4::<T>::zeros((n, c, h, w));
                    for ni in 0..n {
                        let gp = gv.slice(s![ni, 0, .., ..]);
                        for ci in 0..c {
                            let xp = xv.slice(s![ni, ci, .., ..]);
                            let mut dp = dx.slice_mut(s![ni, ci, .., ..]);
                            ndarray::Zip::from(&mut dp).and(&xp).and(&gp).for_each(|o, &xvv, &gvv| {
                                let d = if square {
                                    (xvv + xvv) * inv_c
                                } else {
                                    let mag = xvv.abs();
                                    if mag == T::zero() {
                                        T::zero()
                                    } else {
                                        pw * mag.powf(pw - T::one()) * xvv.signum() * inv_c
                                    }
                                };
                                *o = gvv * d;
                            });
                        }
                    }
                    Self::accumulate(grads, *x, dx.into_dyn());
                }
            }
            Op::Mse { a, b } => {
                let gs = *g.iter().next().unwrap();
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let scale = T::from_f64(2.0) / T::from_usize(av.len()) * gs;
                if self.needs(*a) {
                    let mut da = av.clone();
                    ndarray::Zip::from(&mut da).and(bv).for_each(|o, &y| *o = (*o - y) * scale);
                    Self::accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = bv.clone();
                    ndarray::Zip::from(&mut db).and(av).for_each(|o, &x| *o = (*o - x) * scale);
                    Self::accumulate(grads, *b, db);
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if self.needs(*logits) {
                    let gs = *g.iter().next().unwrap();
                    let lv = self.nodes[logits.0].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                    let mut dl = kernels::softmax_rows(&lv);
                    let n = T::from_usize(lv.shape()[0]);
                    for (i, &label) in labels.iter().enumerate() {
                        dl[[i, label]] -= T::one();
                    }
                    dl.mapv_inplace(|v| v * gs / n);
                    Self::accumulate(grads, *logits, dl.into_dyn());
                }
            }
            Op::KlDiv { student, teacher } => {
                let gs = *g.iter().next().unwrap();
                let sv = self.nodes[student.0].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                let tv = self.nodes[teacher.0].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                let n = T::from_usize(sv.shape()[0]);
                let sp = kernels::softmax_rows(&sv);
                let tp = kernels::softmax_rows(&tv);
                if self.needs(*student) {
                    let mut ds = sp.clone();
                    ndarray::Zip::from(&mut ds).and(&tp).for_each(|o, &t| *o = (*o - t) * gs / n);
                    Self::accumulate(grads, *student, ds.into_dyn());
                }
                if self.needs(*teacher) {
                    // d/dt_logits Σ t (log t − log s) through the teacher softmax
                    let mut dt = Array2::zeros(tp.raw_dim());
                    for i in 0..tp.shape()[0] {
                        let mut row_dot = T::zero();
                        let cdim = tp.shape()[1];
                        let mut v = vec![T::zero(); cdim];
                        for j in 0..cdim {
                            let tl = tp[[i, j]].ln();
                            let sl = sp[[i, j]].ln();
                            v[j] = tl - sl + T::one();
                            row_dot += tp[[i, j]] * v[j];
                        }
                        for j in 0..cdim {
                            dt[[i, j]] = tp[[i, j]] * (v[j] - row_dot) * gs / n;
                        }
                    }
                    Self::accumulate(grads, *teacher, dt.into_dyn());
                }
            }
            Op::SelectItem { x, row, col } => {
                if self.needs(*x) {
                    let gs = *g.iter().next().unwrap();
                    let mut dx = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                    dx[[*row, *col].as_ref()] = gs;
                    Self::accumulate(grads, *x, dx);
                }
            }
        }
    }
}
