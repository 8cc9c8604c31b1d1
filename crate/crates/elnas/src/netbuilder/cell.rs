//! Cell modules: the continuous mixed-op cell and its discrete counterpart.

use crate::autodiff::{NodeId, ParamSet, Tape};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::searchspace::{edges, CandidateOpKind, CellGenotype, CellKind};

use super::layers::{OpModule, ReluConvBn};

/// Shape plan for one cell instance within the macro layout.
#[derive(Debug, Clone, Copy)]
pub struct CellLayout {
    pub kind: CellKind,
    pub nodes: usize,
    /// Channels of the two incoming states.
    pub c_in0: usize,
    pub c_in1: usize,
    /// Working channel count of every internal node.
    pub c_node: usize,
    /// Channels after the output projection.
    pub c_out: usize,
    /// Stride of the first preprocess (2 when that input is one reduction
    /// behind the other).
    pub pre0_stride: usize,
    pub literal_dilconv_rows: bool,
}

impl CellLayout {
    fn edge_stride(&self, source: usize) -> usize {
        if self.kind == CellKind::Reduction && source < 2 {
            2
        } else {
            1
        }
    }
}

fn build_preprocess<T: Scalar>(
    reg: &mut ParamSet<T>,
    rng: &mut Rng,
    name: &str,
    layout: &CellLayout,
) -> (ReluConvBn<T>, ReluConvBn<T>) {
    let pre0 = ReluConvBn::pointwise(reg, rng, &format!("{name}.pre0"), layout.c_in0, layout.c_node, layout.pre0_stride);
    let pre1 = ReluConvBn::pointwise(reg, rng, &format!("{name}.pre1"), layout.c_in1, layout.c_node, 1);
    (pre0, pre1)
}

/// Projection mapping the node concatenation onto the scheduled channel
/// count; omitted when the concatenation already lands there.
fn build_projection<T: Scalar>(reg: &mut ParamSet<T>, rng: &mut Rng, name: &str, layout: &CellLayout) -> Option<ReluConvBn<T>> {
    if layout.nodes * layout.c_node == layout.c_out {
        return None;
    }
    Some(ReluConvBn::pointwise(reg, rng, &format!("{name}.proj"), layout.nodes * layout.c_node, layout.c_out, 1))
}

/// All candidate ops instantiated on one edge.
pub struct MixedOp<T: Scalar> {
    pub ops: Vec<OpModule<T>>,
}

impl<T: Scalar> MixedOp<T> {
    pub(crate) fn build(reg: &mut ParamSet<T>, rng: &mut Rng, name: &str, layout: &CellLayout, source: usize) -> Self {
        let stride = layout.edge_stride(source);
        let ops = CandidateOpKind::ALL
            .iter()
            .map(|&kind| {
                OpModule::build(
                    reg,
                    rng,
                    &format!("{name}.{kind:?}"),
                    kind,
                    layout.c_node,
                    stride,
                    layout.literal_dilconv_rows,
                )
            })
            .collect();
        MixedOp { ops }
    }
}

/// Continuous-relaxation cell: every edge blends all candidate ops with
/// softmax weights, and every node sums over all of its incoming edges.
pub struct SuperCell<T: Scalar> {
    pub layout: CellLayout,
    pre0: ReluConvBn<T>,
    pre1: ReluConvBn<T>,
    edges: Vec<MixedOp<T>>,
    proj: Option<ReluConvBn<T>>,
}

impl<T: Scalar> SuperCell<T> {
    pub fn build(reg: &mut ParamSet<T>, rng: &mut Rng, name: &str, layout: CellLayout) -> Self {
        let (pre0, pre1) = build_preprocess(reg, rng, name, &layout);
        let edge_ops = edges(layout.nodes)
            .into_iter()
            .map(|e| {
                MixedOp::build(
                    reg,
                    rng,
                    &format!("{name}.n{}.s{}", e.target_node, e.source),
                    &layout,
                    e.source,
                )
            })
            .collect();
        let proj = build_projection(reg, rng, name, &layout);
        SuperCell { layout, pre0, pre1, edges: edge_ops, proj }
    }

    /// `alpha_weights` is the softmax-normalized (edges x ops) node for
    /// this cell's kind.
    pub fn forward(&self, t: &mut Tape<T>, s0: NodeId, s1: NodeId, alpha_weights: NodeId, train: bool) -> NodeId {
        let x0 = self.pre0.forward(t, s0, train);
        let x1 = self.pre1.forward(t, s1, train);
        let mut states = vec![x0, x1];
        let mut node_outputs = Vec::with_capacity(self.layout.nodes);
        let mut edge_idx = 0;
        for node in 0..self.layout.nodes {
            let mut terms = Vec::with_capacity(node + 2);
            for source in 0..node + 2 {
                let weights = t.row(alpha_weights, edge_idx);
                let branches: Vec<NodeId> = self.edges[edge_idx]
                    .ops
                    .iter()
                    .map(|op| op.forward(t, states[source], train))
                    .collect();
                terms.push(t.weighted_sum(&branches, weights));
                edge_idx += 1;
            }
            let out = t.add_all(&terms);
            states.push(out);
            node_outputs.push(out);
        }
        let cat = t.concat_channels(&node_outputs);
        match &self.proj {
            Some(proj) => proj.forward(t, cat, train),
            None => cat,
        }
    }

    /// MACs for one application; `work_hw` is the spatial size of the
    /// previous cell's output (both preprocessed states land there).
    pub fn macs(&self, work_hw: (usize, usize)) -> (u64, (usize, usize)) {
        let out_hw = if self.layout.kind == CellKind::Reduction {
            (work_hw.0.div_ceil(2), work_hw.1.div_ceil(2))
        } else {
            work_hw
        };
        let mut total = self.pre0.conv.macs_for_output(work_hw) + self.pre1.conv.macs_for_output(work_hw);
        for (idx, e) in edges(self.layout.nodes).into_iter().enumerate() {
            // cell-input edges read the preprocessed states; internal edges
            // read node outputs, which in reduction cells are already halved
            let edge_in = if e.source < 2 { work_hw } else { out_hw };
            for op in &self.edges[idx].ops {
                total += op.macs(edge_in).0;
            }
        }
        if let Some(proj) = &self.proj {
            total += proj.conv.macs_for_output(out_hw);
        }
        (total, out_hw)
    }
}

/// Discrete cell: each node sums its two selected edges.
pub struct DiscreteCell<T: Scalar> {
    pub layout: CellLayout,
    pre0: ReluConvBn<T>,
    pre1: ReluConvBn<T>,
    /// Per node, the selected `(source, op)` pairs in source order.
    node_ops: Vec<Vec<(usize, OpModule<T>)>>,
    proj: Option<ReluConvBn<T>>,
}

impl<T: Scalar> DiscreteCell<T> {
    pub fn build(reg: &mut ParamSet<T>, rng: &mut Rng, name: &str, layout: CellLayout, genotype: &CellGenotype) -> Self {
        let (pre0, pre1) = build_preprocess(reg, rng, name, &layout);
        let mut node_ops = Vec::with_capacity(layout.nodes);
        for node in 0..layout.nodes {
            let selections = genotype.node_inputs(node);
            let ops = selections
                .into_iter()
                .map(|sel| {
                    let op = OpModule::build(
                        reg,
                        rng,
                        &format!("{name}.n{}.s{}.{:?}", node, sel.source, sel.op),
                        sel.op,
                        layout.c_node,
                        layout.edge_stride(sel.source),
                        layout.literal_dilconv_rows,
                    );
                    (sel.source, op)
                })
                .collect();
            node_ops.push(ops);
        }
        let proj = build_projection(reg, rng, name, &layout);
        DiscreteCell { layout, pre0, pre1, node_ops, proj }
    }

    pub fn forward(&self, t: &mut Tape<T>, s0: NodeId, s1: NodeId, train: bool) -> NodeId {
        let x0 = self.pre0.forward(t, s0, train);
        let x1 = self.pre1.forward(t, s1, train);
        let mut states = vec![x0, x1];
        let mut node_outputs = Vec::with_capacity(self.layout.nodes);
        for ops in &self.node_ops {
            let terms: Vec<NodeId> = ops.iter().map(|(source, op)| op.forward(t, states[*source], train)).collect();
            let out = t.add_all(&terms);
            states.push(out);
            node_outputs.push(out);
        }
        let cat = t.concat_channels(&node_outputs);
        match &self.proj {
            Some(proj) => proj.forward(t, cat, train),
            None => cat,
        }
    }

    pub fn macs(&self, work_hw: (usize, usize)) -> (u64, (usize, usize)) {
        let out_hw = if self.layout.kind == CellKind::Reduction {
            (work_hw.0.div_ceil(2), work_hw.1.div_ceil(2))
        } else {
            work_hw
        };
        let mut total = self.pre0.conv.macs_for_output(work_hw) + self.pre1.conv.macs_for_output(work_hw);
        for ops in &self.node_ops {
            for (source, op) in ops {
                let edge_in = if *source < 2 { work_hw } else { out_hw };
                total += op.macs(edge_in).0;
            }
        }
        if let Some(proj) = &self.proj {
            total += proj.conv.macs_for_output(out_hw);
        }
        (total, out_hw)
    }
}
