//! VGG16-style teacher backbone with a 2-class head.
//!
//! Five stages of 3x3 Conv-BN-ReLU blocks (2, 2, 3, 3, 3 convolutions)
//! separated by 2x2 max pooling, then global average pooling into a
//! linear classifier. `width` scales the channel plan; 64 reproduces the
//! standard VGG16 widths.

use ndarray::ArrayD;

use crate::autodiff::{ConvMeta, NodeId, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

use super::layers::{BatchNorm2d, Conv2dLayer, LinearLayer};

const CONVS_PER_STAGE: [usize; 5] = [2, 2, 3, 3, 3];

struct ConvBnRelu<T: Scalar> {
    conv: Conv2dLayer<T>,
    bn: BatchNorm2d<T>,
}

impl<T: Scalar> ConvBnRelu<T> {
    fn forward(&self, t: &mut Tape<T>, x: NodeId, train: bool) -> NodeId {
        let y = self.conv.forward(t, x);
        let y = self.bn.forward(t, y, train);
        t.relu(y)
    }
}

pub struct TeacherOutput {
    pub logits: NodeId,
    /// Pre-pool outputs of stages 1-4: the stages after which the channel
    /// count expands (the deepest stage keeps its width).
    pub taps: Vec<NodeId>,
}

pub struct TeacherBackbone<T: Scalar> {
    pub width: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    pub params: ParamSet<T>,
    stages: Vec<Vec<ConvBnRelu<T>>>,
    head: LinearLayer<T>,
}

impl<T: Scalar> TeacherBackbone<T> {
    pub fn stage_channels(width: usize) -> [usize; 5] {
        [width, 2 * width, 4 * width, 8 * width, 8 * width]
    }

    /// Channels of the four tap points.
    pub fn tap_channels(&self) -> [usize; 4] {
        let c = Self::stage_channels(self.width);
        [c[0], c[1], c[2], c[3]]
    }

    /// Spatial sizes of the four tap points for a given input size
    /// (each stage after the first is preceded by a floor-halving pool).
    pub fn tap_hw(&self, input_hw: (usize, usize)) -> [(usize, usize); 4] {
        let mut hw = input_hw;
        let mut out = [(0, 0); 4];
        for (i, slot) in out.iter_mut().enumerate() {
            if i > 0 {
                hw = (hw.0 / 2, hw.1 / 2);
            }
            *slot = hw;
        }
        out
    }

    pub fn build(width: usize, input_channels: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if width == 0 {
            return Err(Error::config("teacher width must be positive"));
        }
        let mut reg = ParamSet::new();
        let mut r = rng::derive(seed, &[0x7c]);
        let channels = Self::stage_channels(width);
        let mut stages = Vec::with_capacity(5);
        let mut c_in = input_channels;
        for (si, &c_out) in channels.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..CONVS_PER_STAGE[si] {
                let name = format!("teacher.stage{si}.block{bi}");
                blocks.push(ConvBnRelu {
                    conv: Conv2dLayer::new(&mut reg, &mut r, &format!("{name}.conv"), c_in, c_out, ConvMeta::simple(3, 1, 1), false),
                    bn: BatchNorm2d::new(&mut reg, &format!("{name}.bn"), c_out),
                });
                c_in = c_out;
            }
            stages.push(blocks);
        }
        let head = LinearLayer::new(&mut reg, &mut r, "teacher.head.fc", channels[4], num_classes);
        Ok(TeacherBackbone { width, input_channels, num_classes, params: reg, stages, head })
    }

    pub fn forward(&self, t: &mut Tape<T>, input: ArrayD<T>, train: bool) -> Result<TeacherOutput> {
        let shape = input.shape().to_vec();
        if shape.len() != 4 || shape[1] != self.input_channels {
            return Err(Error::config(format!(
                "teacher input shape {shape:?} does not match [N, {}, H, W]",
                self.input_channels
            )));
        }
        let min_hw = 1usize << (self.stages.len() - 1);
        if shape[2] < min_hw || shape[3] < min_hw {
            return Err(Error::config(format!(
                "teacher input {}x{} too small for {} pooling stages",
                shape[2],
                shape[3],
                self.stages.len() - 1
            )));
        }
        let mut x = t.input(input);
        let mut taps = Vec::with_capacity(4);
        for (si, stage) in self.stages.iter().enumerate() {
            if si > 0 {
                x = t.max_pool(x, 2, 2, 0);
            }
            for block in stage {
                x = block.forward(t, x, train);
            }
            if si < 4 {
                taps.push(x);
            }
        }
        let pooled = t.global_avg_pool(x);
        let logits = self.head.forward(t, pooled);
        Ok(TeacherOutput { logits, taps })
    }

    pub fn count_macs(&self, input_hw: (usize, usize)) -> u64 {
        let mut total = 0u64;
        let mut hw = input_hw;
        for (si, stage) in self.stages.iter().enumerate() {
            if si > 0 {
                hw = (hw.0 / 2, hw.1 / 2);
            }
            for block in stage {
                total += block.conv.macs(hw).0;
            }
        }
        total + self.head.macs()
    }
}

pub fn count_flops_teacher<T: Scalar>(net: &TeacherBackbone<T>, input_hw: (usize, usize)) -> u64 {
    2 * net.count_macs(input_hw)
}
