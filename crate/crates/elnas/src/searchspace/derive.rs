//! Discretization of continuous architecture weights into a genotype.

use super::{
    edges, mixed_op_weights, ArchParams, CandidateOpKind, CellGenotype, CellKind, NetworkGenotype, Selection,
};
use crate::error::Result;
use crate::scalar::Scalar;

/// Pick the discrete cell structure from architecture weights.
///
/// Per node, the two incoming edges whose strongest-op softmax weight is
/// largest are kept, each with its argmax op. If a cell then holds more
/// than `max_skip` skip-connects, the lowest-confidence skip edges are
/// reassigned to their next-best non-skip op until the limit holds.
///
/// Ties break deterministically: lowest op index for op choice, lowest
/// source index for edge ranking.
pub fn derive_genotype<T: Scalar>(arch: &ArchParams<T>, max_skip: usize) -> Result<NetworkGenotype> {
    arch.validate()?;
    let nodes = arch.nodes()?;
    Ok(NetworkGenotype {
        normal: derive_cell(arch, CellKind::Normal, nodes, max_skip)?,
        reduction: derive_cell(arch, CellKind::Reduction, nodes, max_skip)?,
    })
}

struct EdgeChoice {
    target: usize,
    source: usize,
    op: usize,
    best_weight: f64,
    weights: Vec<f64>,
}

fn derive_cell<T: Scalar>(arch: &ArchParams<T>, kind: CellKind, nodes: usize, max_skip: usize) -> Result<CellGenotype> {
    let alpha = arch.alpha(kind);
    let mut choices: Vec<EdgeChoice> = Vec::new();
    for (row, edge) in edges(nodes).into_iter().enumerate() {
        let logits: Vec<T> = alpha.row(row).iter().copied().collect();
        let weights: Vec<f64> = mixed_op_weights(&logits)?.into_iter().map(|w| w.as_f64()).collect();
        let op = argmax_strict(&weights);
        choices.push(EdgeChoice {
            target: edge.target_node,
            source: edge.source,
            op,
            best_weight: weights[op],
            weights,
        });
    }

    // per node, keep the two strongest edges
    let mut kept: Vec<EdgeChoice> = Vec::new();
    for node in 0..nodes {
        let mut incoming: Vec<EdgeChoice> = Vec::new();
        let mut rest: Vec<EdgeChoice> = Vec::new();
        for c in choices.drain(..) {
            if c.target == node {
                incoming.push(c);
            } else {
                rest.push(c);
            }
        }
        choices = rest;
        incoming.sort_by(|a, b| {
            b.best_weight
                .total_cmp(&a.best_weight)
                .then(a.source.cmp(&b.source))
        });
        incoming.truncate(2);
        kept.extend(incoming);
    }

    enforce_skip_limit(&mut kept, max_skip);

    kept.sort_by_key(|c| (c.target, c.source));
    let selections = kept
        .into_iter()
        .map(|c| Selection {
            node: c.target,
            source: c.source,
            op: CandidateOpKind::from_index(c.op),
        })
        .collect();
    Ok(CellGenotype { kind, selections })
}

/// While the cell holds too many skip-connects, move the least confident
/// skip edge to its next-best non-skip op. Selected edges never change,
/// only their op assignment.
fn enforce_skip_limit(kept: &mut [EdgeChoice], max_skip: usize) {
    let skip = CandidateOpKind::SkipConnect.index();
    loop {
        let count = kept.iter().filter(|c| c.op == skip).count();
        if count <= max_skip {
            return;
        }
        let victim = kept
            .iter()
            .enumerate()
            .filter(|(_, c)| c.op == skip)
            .min_by(|(_, a), (_, b)| {
                a.weights[skip]
                    .total_cmp(&b.weights[skip])
                    .then(a.target.cmp(&b.target))
                    .then(a.source.cmp(&b.source))
            })
            .map(|(i, _)| i)
            .expect("at least one skip edge");
        let c = &mut kept[victim];
        c.op = argmax_excluding(&c.weights, skip);
        c.best_weight = c.weights[c.op];
    }
}

/// First strict maximum, so equal weights resolve to the lowest op index.
fn argmax_strict(w: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in w.iter().enumerate().skip(1) {
        if v > w[best] {
            best = i;
        }
    }
    best
}

fn argmax_excluding(w: &[f64], excluded: usize) -> usize {
    let mut best = None;
    for (i, &v) in w.iter().enumerate() {
        if i == excluded {
            continue;
        }
        match best {
            None => best = Some(i),
            Some(b) if v > w[b] => best = Some(i),
            _ => {}
        }
    }
    best.expect("more than one candidate op")
}
