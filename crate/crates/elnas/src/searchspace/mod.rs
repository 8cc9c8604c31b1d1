//! Candidate operations, cell topology, continuous relaxation, and
//! genotype types for the cell-based search space.

mod derive;
mod file;
mod validate;

pub use derive::derive_genotype;
pub use file::{genotype_from_str, genotype_to_string, read_genotype, write_genotype, GENOTYPE_FORMAT_VERSION};
pub use validate::{validate_genotype, ValidationReport, Violation};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const NUM_OPS: usize = 7;

/// Default number of intermediate nodes per cell.
pub const DEFAULT_NODES: usize = 4;

/// The seven candidate operations an edge can take.
///
/// Stride is not part of the kind: it resolves to 1 in normal cells and 2
/// on reduction-cell edges that read the cell inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CandidateOpKind {
    SepConv3,
    SepConv5,
    DilConv3,
    DilConv5,
    MaxPool3,
    AvgPool3,
    SkipConnect,
}

/// Kernel geometry of a convolutional candidate op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpGeometry {
    pub kernel: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl CandidateOpKind {
    pub const ALL: [CandidateOpKind; NUM_OPS] = [
        CandidateOpKind::SepConv3,
        CandidateOpKind::SepConv5,
        CandidateOpKind::DilConv3,
        CandidateOpKind::DilConv5,
        CandidateOpKind::MaxPool3,
        CandidateOpKind::AvgPool3,
        CandidateOpKind::SkipConnect,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn is_skip(self) -> bool {
        self == CandidateOpKind::SkipConnect
    }

    pub fn is_pool(self) -> bool {
        matches!(self, CandidateOpKind::MaxPool3 | CandidateOpKind::AvgPool3)
    }

    /// Kernel geometry for the separable/dilated convolutions and pools.
    ///
    /// `literal_dilconv_rows` keeps both dilated rows at kernel 3, exactly
    /// as the reference op table prints them; the default treats the second
    /// row as the kernel-5 variant of the usual pairing.
    pub fn geometry(self, literal_dilconv_rows: bool) -> Option<OpGeometry> {
        match self {
            CandidateOpKind::SepConv3 => Some(OpGeometry { kernel: 3, padding: 1, dilation: 1 }),
            CandidateOpKind::SepConv5 => Some(OpGeometry { kernel: 5, padding: 2, dilation: 1 }),
            CandidateOpKind::DilConv3 => Some(OpGeometry { kernel: 3, padding: 2, dilation: 2 }),
            CandidateOpKind::DilConv5 => {
                if literal_dilconv_rows {
                    Some(OpGeometry { kernel: 3, padding: 2, dilation: 2 })
                } else {
                    Some(OpGeometry { kernel: 5, padding: 4, dilation: 2 })
                }
            }
            CandidateOpKind::MaxPool3 | CandidateOpKind::AvgPool3 => {
                Some(OpGeometry { kernel: 3, padding: 1, dilation: 1 })
            }
            CandidateOpKind::SkipConnect => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Normal,
    Reduction,
}

/// One directed edge of the cell DAG.
///
/// Sources 0 and 1 are the two cell inputs; source `2 + i` is internal
/// node `i`. Valid sources for target node `j` are `0..j + 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EdgeId {
    pub target_node: usize,
    pub source: usize,
}

/// All edges of an `nodes`-node cell in (target, source) order.
pub fn edges(nodes: usize) -> Vec<EdgeId> {
    let mut out = Vec::with_capacity(edge_count(nodes));
    for target_node in 0..nodes {
        for source in 0..target_node + 2 {
            out.push(EdgeId { target_node, source });
        }
    }
    out
}

pub fn edge_count(nodes: usize) -> usize {
    (0..nodes).map(|j| j + 2).sum()
}

/// Inverse of [`edge_count`]; `None` when `count` is not a valid total.
pub fn nodes_for_edge_count(count: usize) -> Option<usize> {
    (1..=64).find(|&n| edge_count(n) == count)
}

/// Continuous architecture weights: one unnormalized logit row per edge,
/// one column per candidate op, for each cell kind.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchParams<T: Scalar> {
    pub alpha_normal: Array2<T>,
    pub alpha_reduction: Array2<T>,
}

impl<T: Scalar> ArchParams<T> {
    /// Zero logits: a uniform mixture over every candidate op.
    pub fn zeros(nodes: usize) -> Self {
        let rows = edge_count(nodes);
        ArchParams {
            alpha_normal: Array2::zeros((rows, NUM_OPS)),
            alpha_reduction: Array2::zeros((rows, NUM_OPS)),
        }
    }

    pub fn nodes(&self) -> Result<usize> {
        let rows = self.alpha_normal.shape()[0];
        nodes_for_edge_count(rows)
            .ok_or_else(|| Error::invalid_argument(format!("{rows} rows is not a valid edge count")))
    }

    pub fn validate(&self) -> Result<()> {
        let nodes = self.nodes()?;
        for (name, m) in [("normal", &self.alpha_normal), ("reduction", &self.alpha_reduction)] {
            if m.shape() != [edge_count(nodes), NUM_OPS] {
                return Err(Error::invalid_argument(format!(
                    "alpha_{name} has shape {:?}, expected [{}, {NUM_OPS}]",
                    m.shape(),
                    edge_count(nodes)
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid_argument(format!("alpha_{name} contains non-finite values")));
            }
        }
        Ok(())
    }

    pub fn alpha(&self, kind: CellKind) -> &Array2<T> {
        match kind {
            CellKind::Normal => &self.alpha_normal,
            CellKind::Reduction => &self.alpha_reduction,
        }
    }
}

/// One chosen (edge, op) pair of a discrete cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selection {
    pub node: usize,
    pub source: usize,
    pub op: CandidateOpKind,
}

/// Discrete architecture of one cell: two selected input edges per node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellGenotype {
    pub kind: CellKind,
    pub selections: Vec<Selection>,
}

impl CellGenotype {
    pub fn nodes(&self) -> usize {
        self.selections.iter().map(|s| s.node + 1).max().unwrap_or(0)
    }

    pub fn skip_count(&self) -> usize {
        self.selections.iter().filter(|s| s.op.is_skip()).count()
    }

    /// The two selections feeding `node`, in source order.
    pub fn node_inputs(&self, node: usize) -> Vec<Selection> {
        let mut v: Vec<Selection> = self.selections.iter().copied().filter(|s| s.node == node).collect();
        v.sort_by_key(|s| s.source);
        v
    }
}

/// Shared discrete architecture: all normal cells use one genotype, all
/// reduction cells the other.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkGenotype {
    pub normal: CellGenotype,
    pub reduction: CellGenotype,
}

impl NetworkGenotype {
    pub fn cell(&self, kind: CellKind) -> &CellGenotype {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduction => &self.reduction,
        }
    }
}

/// Softmax over one edge's op logits (the continuous relaxation weights).
///
/// Stable for large-magnitude logits; rejects non-finite input.
pub fn mixed_op_weights<T: Scalar>(row: &[T]) -> Result<Vec<T>> {
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_argument("op logits must be finite"));
    }
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn edge_enumeration_matches_formula() {
        assert_eq!(edge_count(4), 14);
        assert_eq!(edges(4).len(), 14);
        let sum: usize = (0..4).map(|j| j + 2).sum();
        assert_eq!(sum, 14);
        assert_eq!(nodes_for_edge_count(14), Some(4));
        assert_eq!(nodes_for_edge_count(13), None);
        // sources precede targets in every enumerated edge
        for e in edges(6) {
            assert!(e.source < e.target_node + 2);
        }
    }

    #[test]
    fn weights_of_zero_logits_are_uniform() {
        let w = mixed_op_weights(&[0.0f64; NUM_OPS]).unwrap();
        for v in w {
            assert!((v - 1.0 / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_of_dominant_logit() {
        // scalar oracle: e^10 / (e^10 + 6)
        let first = (10.0f64).exp() / ((10.0f64).exp() + 6.0);
        let w = mixed_op_weights(&[10.0f64, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((w[0] - first).abs() < 1e-12);
        assert!((w[0] - 0.99973).abs() < 1e-5);
        for &v in &w[1..] {
            assert!((v - 4.54e-5).abs() < 1e-7);
        }
    }

    #[test]
    fn non_finite_logits_rejected() {
        assert!(mixed_op_weights(&[f64::NAN, 0.0]).is_err());
        assert!(mixed_op_weights(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn geometry_table() {
        use CandidateOpKind::*;
        assert_eq!(SepConv3.geometry(false), Some(OpGeometry { kernel: 3, padding: 1, dilation: 1 }));
        assert_eq!(SepConv5.geometry(false), Some(OpGeometry { kernel: 5, padding: 2, dilation: 1 }));
        assert_eq!(DilConv3.geometry(false), Some(OpGeometry { kernel: 3, padding: 2, dilation: 2 }));
        assert_eq!(DilConv5.geometry(false), Some(OpGeometry { kernel: 5, padding: 4, dilation: 2 }));
        assert_eq!(DilConv5.geometry(true), DilConv3.geometry(true));
        assert_eq!(SkipConnect.geometry(false), None);
        assert_eq!(CandidateOpKind::ALL.len(), 7);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in proptest::collection::vec(-50.0f64..50.0, NUM_OPS)) {
            let w = mixed_op_weights(&row).unwrap();
            let sum: f64 = w.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(w.iter().all(|&v| v > 0.0));
        }

        #[test]
        fn softmax_is_shift_invariant(row in proptest::collection::vec(-20.0f64..20.0, NUM_OPS), c in -30.0f64..30.0) {
            let a = mixed_op_weights(&row).unwrap();
            let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
            let b = mixed_op_weights(&shifted).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
