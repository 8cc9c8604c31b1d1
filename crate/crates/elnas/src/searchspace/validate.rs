//! Structural validation of genotypes.

use std::fmt;

use super::{CellGenotype, CellKind, NetworkGenotype};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    KindMismatch { field: &'static str, found: CellKind },
    WrongSelectionCount { cell: CellKind, node: usize, count: usize },
    SourceNotBeforeTarget { cell: CellKind, node: usize, source: usize },
    DuplicateSource { cell: CellKind, node: usize, source: usize },
    SkipLimitExceeded { cell: CellKind, count: usize, max_skip: usize },
    EmptyCell { cell: CellKind },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::KindMismatch { field, found } => {
                write!(f, "`{field}` cell declares kind {found:?}")
            }
            Violation::WrongSelectionCount { cell, node, count } => {
                write!(f, "{cell:?} cell node {node} has {count} selected edges, expected 2")
            }
            Violation::SourceNotBeforeTarget { cell, node, source } => {
                write!(f, "{cell:?} cell node {node} cites source {source}, which does not precede it")
            }
            Violation::DuplicateSource { cell, node, source } => {
                write!(f, "{cell:?} cell node {node} selects source {source} twice")
            }
            Violation::SkipLimitExceeded { cell, count, max_skip } => {
                write!(f, "{cell:?} cell has {count} skip-connects, limit is {max_skip}")
            }
            Violation::EmptyCell { cell } => write!(f, "{cell:?} cell has no selections"),
        }
    }
}

/// Every violated invariant of a genotype; empty iff the genotype is valid.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "- {v}")?;
        }
        Ok(())
    }
}

pub fn validate_genotype(g: &NetworkGenotype, max_skip: usize) -> ValidationReport {
    let mut report = ValidationReport::default();
    if g.normal.kind != CellKind::Normal {
        report.violations.push(Violation::KindMismatch { field: "normal", found: g.normal.kind });
    }
    if g.reduction.kind != CellKind::Reduction {
        report.violations.push(Violation::KindMismatch { field: "reduction", found: g.reduction.kind });
    }
    validate_cell(&g.normal, g.normal.kind, max_skip, &mut report);
    validate_cell(&g.reduction, g.reduction.kind, max_skip, &mut report);
    report
}

fn validate_cell(cell: &CellGenotype, kind: CellKind, max_skip: usize, report: &mut ValidationReport) {
    if cell.selections.is_empty() {
        report.violations.push(Violation::EmptyCell { cell: kind });
        return;
    }
    let nodes = cell.nodes();
    for node in 0..nodes {
        let inputs = cell.node_inputs(node);
        if inputs.len() != 2 {
            report
                .violations
                .push(Violation::WrongSelectionCount { cell: kind, node, count: inputs.len() });
        }
        let mut seen = Vec::new();
        for s in &inputs {
            if s.source >= node + 2 {
                report
                    .violations
                    .push(Violation::SourceNotBeforeTarget { cell: kind, node, source: s.source });
            }
            if seen.contains(&s.source) {
                report
                    .violations
                    .push(Violation::DuplicateSource { cell: kind, node, source: s.source });
            }
            seen.push(s.source);
        }
    }
    let skips = cell.skip_count();
    if skips > max_skip {
        report
            .violations
            .push(Violation::SkipLimitExceeded { cell: kind, count: skips, max_skip });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::searchspace::{CandidateOpKind, Selection};

    fn simple_cell(kind: CellKind, op: CandidateOpKind) -> CellGenotype {
        let mut selections = Vec::new();
        for node in 0..4 {
            selections.push(Selection { node, source: 0, op });
            selections.push(Selection { node, source: 1, op });
        }
        CellGenotype { kind, selections }
    }

    fn simple_genotype(op: CandidateOpKind) -> NetworkGenotype {
        NetworkGenotype {
            normal: simple_cell(CellKind::Normal, op),
            reduction: simple_cell(CellKind::Reduction, op),
        }
    }

    #[test]
    fn well_formed_genotype_passes() {
        let g = simple_genotype(CandidateOpKind::SepConv3);
        assert!(validate_genotype(&g, 2).is_empty());
    }

    #[test]
    fn source_must_precede_target() {
        let mut g = simple_genotype(CandidateOpKind::SepConv3);
        // node 2 citing node 3 (source index 5) is a forward reference
        g.normal.selections[4] = Selection { node: 2, source: 5, op: CandidateOpKind::SepConv3 };
        let report = validate_genotype(&g, 2);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::SourceNotBeforeTarget { node: 2, source: 5, .. })));
    }

    #[test]
    fn skip_limit_is_reported_by_independent_scan() {
        let mut g = simple_genotype(CandidateOpKind::SepConv3);
        for s in g.normal.selections.iter_mut().take(3) {
            s.op = CandidateOpKind::SkipConnect;
        }
        // independent count of the planted skips
        let planted = g.normal.selections.iter().filter(|s| s.op == CandidateOpKind::SkipConnect).count();
        assert_eq!(planted, 3);
        let report = validate_genotype(&g, 2);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::SkipLimitExceeded { count: 3, max_skip: 2, .. })));
        assert!(validate_genotype(&g, 3).is_empty());
    }

    #[test]
    fn duplicate_and_missing_edges_reported() {
        let mut g = simple_genotype(CandidateOpKind::AvgPool3);
        g.normal.selections[1] = Selection { node: 0, source: 0, op: CandidateOpKind::AvgPool3 };
        g.normal.selections.remove(2);
        let report = validate_genotype(&g, 2);
        assert!(report.violations.iter().any(|v| matches!(v, Violation::DuplicateSource { .. })));
        assert!(report.violations.iter().any(|v| matches!(v, Violation::WrongSelectionCount { .. })));
    }

    #[test]
    fn kind_mismatch_reported() {
        let g = NetworkGenotype {
            normal: simple_cell(CellKind::Reduction, CandidateOpKind::SepConv3),
            reduction: simple_cell(CellKind::Reduction, CandidateOpKind::SepConv3),
        };
        let report = validate_genotype(&g, 2);
        assert!(report.violations.iter().any(|v| matches!(v, Violation::KindMismatch { field: "normal", .. })));
    }
}
