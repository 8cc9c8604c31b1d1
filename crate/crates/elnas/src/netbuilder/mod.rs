//! Network construction: the macro layout, the continuous supernet, the
//! discrete network built from a genotype, the teacher backbone, and
//! analytic cost accounting.

mod cell;
mod layers;
mod network;
mod teacher;

pub use cell::{CellLayout, DiscreteCell, MixedOp, SuperCell};
pub use layers::{BatchNorm2d, Conv2dLayer, DilConvBlock, LinearLayer, OpModule, ReluConvBn, SepConvBlock};
pub use network::{DiscreteNetwork, NetworkOutput, Supernet};
pub use teacher::{TeacherBackbone, TeacherOutput};

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::searchspace::CellKind;

/// Number of stacked cells: five normal and four reduction, alternating.
pub const NUM_CELLS: usize = 9;

/// Macro-architecture plan: stem, alternating cell stack, channel
/// schedule, classifier head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Stem output channels; 64 for the final model, 16 for search.
    pub c0: usize,
    pub nodes_per_cell: usize,
    pub input_channels: usize,
    pub input_hw: (usize, usize),
    pub num_classes: usize,
    /// Keep both dilated-conv rows of the op table at kernel 3.
    pub literal_dilconv_rows: bool,
}

impl NetworkSpec {
    /// The deployed classifier: C0 = 64 on 3x150x150 inputs, 2 classes.
    pub fn final_model() -> Self {
        NetworkSpec {
            c0: 64,
            nodes_per_cell: 4,
            input_channels: 3,
            input_hw: (150, 150),
            num_classes: 2,
            literal_dilconv_rows: false,
        }
    }

    /// The search-time supernet scale: C0 = 16.
    pub fn search_default() -> Self {
        NetworkSpec { c0: 16, ..Self::final_model() }
    }

    pub fn with_c0(mut self, c0: usize) -> Self {
        self.c0 = c0;
        self
    }

    pub fn with_input_hw(mut self, hw: (usize, usize)) -> Self {
        self.input_hw = hw;
        self
    }

    /// N, R, N, R, N, R, N, R, N.
    pub fn cell_kinds(&self) -> [CellKind; NUM_CELLS] {
        let mut kinds = [CellKind::Normal; NUM_CELLS];
        for (i, k) in kinds.iter_mut().enumerate() {
            if i % 2 == 1 {
                *k = CellKind::Reduction;
            }
        }
        kinds
    }

    /// C0, 2C0, 2C0, 4C0, 4C0, 8C0, 8C0, 8C0, 8C0 — the last reduction
    /// halves space but keeps channels.
    pub fn channel_schedule(&self) -> [usize; NUM_CELLS] {
        let c = self.c0;
        [c, 2 * c, 2 * c, 4 * c, 4 * c, 8 * c, 8 * c, 8 * c, 8 * c]
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes_per_cell < 1 {
            return Err(Error::config("nodes_per_cell must be at least 1"));
        }
        if self.c0 == 0 || self.c0 % self.nodes_per_cell != 0 {
            return Err(Error::config(format!(
                "c0 = {} must be a positive multiple of nodes_per_cell = {}",
                self.c0, self.nodes_per_cell
            )));
        }
        if self.input_channels == 0 || self.num_classes < 2 {
            return Err(Error::config("input channels and class count must be positive"));
        }
        let reductions = self.cell_kinds().iter().filter(|k| **k == CellKind::Reduction).count();
        let min_hw = 1usize << reductions;
        if self.input_hw.0 < min_hw / 2 || self.input_hw.1 < min_hw / 2 || self.input_hw.0 == 0 {
            return Err(Error::config(format!(
                "input {}x{} too small for {reductions} reductions",
                self.input_hw.0, self.input_hw.1
            )));
        }
        Ok(())
    }

    /// Per-cell shape plan, threading channels and spatial sizes through
    /// the stack. Cell k reads the outputs of cells k-1 and k-2, with the
    /// stem standing in for both below index 0.
    pub fn cell_layouts(&self) -> Vec<CellLayout> {
        let kinds = self.cell_kinds();
        let schedule = self.channel_schedule();
        let mut layouts = Vec::with_capacity(NUM_CELLS);
        let mut prev_prev = (self.c0, self.input_hw);
        let mut prev = (self.c0, self.input_hw);
        for i in 0..NUM_CELLS {
            let c_out = schedule[i];
            let layout = CellLayout {
                kind: kinds[i],
                nodes: self.nodes_per_cell,
                c_in0: prev_prev.0,
                c_in1: prev.0,
                c_node: c_out / self.nodes_per_cell,
                c_out,
                pre0_stride: if prev_prev.1 != prev.1 { 2 } else { 1 },
                literal_dilconv_rows: self.literal_dilconv_rows,
            };
            let out_hw = match kinds[i] {
                CellKind::Normal => prev.1,
                CellKind::Reduction => (prev.1 .0.div_ceil(2), prev.1 .1.div_ceil(2)),
            };
            layouts.push(layout);
            prev_prev = prev;
            prev = (c_out, out_hw);
        }
        layouts
    }

    /// Expected layer-by-layer output shapes, stem through logits.
    pub fn shape_trace(&self) -> Vec<TraceRow> {
        let mut rows = vec![
            TraceRow { label: "input".into(), channels: self.input_channels, hw: self.input_hw },
            TraceRow { label: "stem".into(), channels: self.c0, hw: self.input_hw },
        ];
        let kinds = self.cell_kinds();
        let schedule = self.channel_schedule();
        let mut hw = self.input_hw;
        for i in 0..NUM_CELLS {
            let label = match kinds[i] {
                CellKind::Normal => format!("cell{i}.normal"),
                CellKind::Reduction => {
                    hw = (hw.0.div_ceil(2), hw.1.div_ceil(2));
                    format!("cell{i}.reduction")
                }
            };
            rows.push(TraceRow { label, channels: schedule[i], hw });
        }
        rows.push(TraceRow { label: "gap".into(), channels: schedule[NUM_CELLS - 1], hw: (1, 1) });
        rows.push(TraceRow { label: "logits".into(), channels: self.num_classes, hw: (1, 1) });
        rows
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRow {
    pub label: String,
    pub channels: usize,
    pub hw: (usize, usize),
}

/// Exact count of learnable scalars (buffers excluded).
pub fn count_params<T: Scalar>(params: &ParamSet<T>) -> u64 {
    params.count_learnable_scalars()
}

#[cfg(test)]
mod behavior_tests;
