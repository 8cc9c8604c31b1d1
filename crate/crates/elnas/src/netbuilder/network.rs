//! The continuous supernet and the discrete network.

use std::rc::Rc;

use ndarray::{ArrayD, Ix2};

use crate::autodiff::{zeros, ConvMeta, NodeId, ParamCell, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::searchspace::{
    edge_count, validate_genotype, ArchParams, CellKind, NetworkGenotype, NUM_OPS,
};

use super::cell::{DiscreteCell, SuperCell};
use super::layers::{BatchNorm2d, Conv2dLayer, LinearLayer};
use super::{NetworkSpec, NUM_CELLS};

struct Stem<T: Scalar> {
    conv: Conv2dLayer<T>,
    bn: BatchNorm2d<T>,
}

impl<T: Scalar> Stem<T> {
    fn build(reg: &mut ParamSet<T>, rng: &mut rng::Rng, spec: &NetworkSpec) -> Self {
        Stem {
            conv: Conv2dLayer::new(reg, rng, "stem.conv", spec.input_channels, spec.c0, ConvMeta::simple(3, 1, 1), false),
            bn: BatchNorm2d::new(reg, "stem.bn", spec.c0),
        }
    }

    fn forward(&self, t: &mut Tape<T>, x: NodeId, train: bool) -> NodeId {
        let y = self.conv.forward(t, x);
        self.bn.forward(t, y, train)
    }

    fn macs(&self, in_hw: (usize, usize)) -> u64 {
        self.conv.macs(in_hw).0
    }
}

fn validate_input<T: Scalar>(spec: &NetworkSpec, input: &ArrayD<T>) -> Result<()> {
    let shape = input.shape();
    if shape.len() != 4 || shape[1] != spec.input_channels || (shape[2], shape[3]) != spec.input_hw {
        return Err(Error::config(format!(
            "input shape {shape:?} does not match expected [N, {}, {}, {}]",
            spec.input_channels, spec.input_hw.0, spec.input_hw.1
        )));
    }
    if shape[0] == 0 {
        return Err(Error::config("empty batch"));
    }
    Ok(())
}

/// Tape handles produced by one forward pass.
#[derive(Debug)]
pub struct NetworkOutput {
    pub logits: NodeId,
    /// Output node of every cell, in stack order.
    pub cell_outputs: Vec<NodeId>,
    pub stem: NodeId,
}

/// Weight-sharing network in which every edge blends all candidate ops
/// with softmax-normalized architecture weights.
pub struct Supernet<T: Scalar> {
    pub spec: NetworkSpec,
    pub params: ParamSet<T>,
    pub alpha_normal: Rc<ParamCell<T>>,
    pub alpha_reduction: Rc<ParamCell<T>>,
    stem: Stem<T>,
    cells: Vec<SuperCell<T>>,
    head: LinearLayer<T>,
}

impl<T: Scalar> Supernet<T> {
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut reg = ParamSet::new();
        let mut r = rng::derive(seed, &[0x5e]);
        let rows = edge_count(spec.nodes_per_cell);
        // zero logits: a uniform mixture, discretized by deterministic tie-break
        let alpha_normal = reg.register("alpha.normal", zeros(&[rows, NUM_OPS]), true);
        let alpha_reduction = reg.register("alpha.reduction", zeros(&[rows, NUM_OPS]), true);
        let stem = Stem::build(&mut reg, &mut r, spec);
        let cells = spec
            .cell_layouts()
            .into_iter()
            .enumerate()
            .map(|(i, layout)| SuperCell::build(&mut reg, &mut r, &format!("cell{i}"), layout))
            .collect();
        let head = LinearLayer::new(&mut reg, &mut r, "head.fc", 8 * spec.c0, spec.num_classes);
        Ok(Supernet { spec: spec.clone(), params: reg, alpha_normal, alpha_reduction, stem, cells, head })
    }

    pub fn forward(&self, t: &mut Tape<T>, input: ArrayD<T>, train: bool) -> Result<NetworkOutput> {
        validate_input(&self.spec, &input)?;
        let x = t.input(input);
        let stem = self.stem.forward(t, x, train);
        let an = t.param(&self.alpha_normal);
        let ar = t.param(&self.alpha_reduction);
        let weights_normal = t.softmax_rows(an);
        let weights_reduction = t.softmax_rows(ar);
        let mut s0 = stem;
        let mut s1 = stem;
        let mut cell_outputs = Vec::with_capacity(NUM_CELLS);
        for cell in &self.cells {
            let weights = match cell.layout.kind {
                CellKind::Normal => weights_normal,
                CellKind::Reduction => weights_reduction,
            };
            let out = cell.forward(t, s0, s1, weights, train);
            cell_outputs.push(out);
            s0 = s1;
            s1 = out;
        }
        let pooled = t.global_avg_pool(s1);
        let logits = self.head.forward(t, pooled);
        Ok(NetworkOutput { logits, cell_outputs, stem })
    }

    /// Learnable weights excluding the architecture logits.
    pub fn weight_params(&self) -> Vec<Rc<ParamCell<T>>> {
        self.params
            .learnable()
            .filter(|p| !p.name().starts_with("alpha."))
            .cloned()
            .collect()
    }

    pub fn arch_param_cells(&self) -> Vec<Rc<ParamCell<T>>> {
        vec![self.alpha_normal.clone(), self.alpha_reduction.clone()]
    }

    pub fn arch_params(&self) -> ArchParams<T> {
        let normal = self.alpha_normal.value.borrow().clone().into_dimensionality::<Ix2>().unwrap();
        let reduction = self.alpha_reduction.value.borrow().clone().into_dimensionality::<Ix2>().unwrap();
        ArchParams { alpha_normal: normal, alpha_reduction: reduction }
    }

    pub fn set_arch_params(&self, arch: &ArchParams<T>) -> Result<()> {
        arch.validate()?;
        if arch.nodes()? != self.spec.nodes_per_cell {
            return Err(Error::config("architecture weights sized for a different node count"));
        }
        self.alpha_normal.value.borrow_mut().assign(&arch.alpha_normal.clone().into_dyn());
        self.alpha_reduction.value.borrow_mut().assign(&arch.alpha_reduction.clone().into_dyn());
        Ok(())
    }

    pub fn count_macs(&self) -> u64 {
        let mut total = self.stem.macs(self.spec.input_hw);
        let mut hw = self.spec.input_hw;
        for cell in &self.cells {
            let (m, out_hw) = cell.macs(hw);
            total += m;
            hw = out_hw;
        }
        total + self.head.macs()
    }
}

/// Trainable network containing only the genotype-selected edges.
pub struct DiscreteNetwork<T: Scalar> {
    pub spec: NetworkSpec,
    pub genotype: NetworkGenotype,
    pub params: ParamSet<T>,
    stem: Stem<T>,
    cells: Vec<DiscreteCell<T>>,
    head: LinearLayer<T>,
}

impl<T: Scalar> DiscreteNetwork<T> {
    /// Build from a genotype, rejecting structurally invalid input with
    /// the full validation report. The skip-connect budget is a search
    /// constraint, not a build constraint: an all-skip genotype builds.
    pub fn build(spec: &NetworkSpec, genotype: &NetworkGenotype, seed: u64) -> Result<Self> {
        spec.validate()?;
        let report = validate_genotype(genotype, usize::MAX);
        if !report.is_empty() {
            return Err(Error::InvalidGenotype(report));
        }
        if genotype.normal.nodes() != spec.nodes_per_cell || genotype.reduction.nodes() != spec.nodes_per_cell {
            return Err(Error::config(format!(
                "genotype has {} nodes per cell, spec expects {}",
                genotype.normal.nodes(),
                spec.nodes_per_cell
            )));
        }
        let mut reg = ParamSet::new();
        let mut r = rng::derive(seed, &[0xd1]);
        let stem = Stem::build(&mut reg, &mut r, spec);
        let cells = spec
            .cell_layouts()
            .into_iter()
            .enumerate()
            .map(|(i, layout)| {
                let cell_genotype = genotype.cell(layout.kind);
                DiscreteCell::build(&mut reg, &mut r, &format!("cell{i}"), layout, cell_genotype)
            })
            .collect();
        let head = LinearLayer::new(&mut reg, &mut r, "head.fc", 8 * spec.c0, spec.num_classes);
        Ok(DiscreteNetwork { spec: spec.clone(), genotype: genotype.clone(), params: reg, stem, cells, head })
    }

    pub fn forward(&self, t: &mut Tape<T>, input: ArrayD<T>, train: bool) -> Result<NetworkOutput> {
        validate_input(&self.spec, &input)?;
        let x = t.input(input);
        let stem = self.stem.forward(t, x, train);
        let mut s0 = stem;
        let mut s1 = stem;
        let mut cell_outputs = Vec::with_capacity(NUM_CELLS);
        for cell in &self.cells {
            let out = cell.forward(t, s0, s1, train);
            cell_outputs.push(out);
            s0 = s1;
            s1 = out;
        }
        let pooled = t.global_avg_pool(s1);
        let logits = self.head.forward(t, pooled);
        Ok(NetworkOutput { logits, cell_outputs, stem })
    }

    pub fn count_macs(&self) -> u64 {
        let mut total = self.stem.macs(self.spec.input_hw);
        let mut prev_hw = self.spec.input_hw;
        for cell in &self.cells {
            let (m, out_hw) = cell.macs(prev_hw);
            total += m;
            prev_hw = out_hw;
        }
        total + self.head.macs()
    }
}

/// 2 x multiply-accumulates over all convolution and linear layers.
pub fn count_flops_supernet<T: Scalar>(net: &Supernet<T>) -> u64 {
    2 * net.count_macs()
}

pub fn count_flops_discrete<T: Scalar>(net: &DiscreteNetwork<T>) -> u64 {
    2 * net.count_macs()
}
