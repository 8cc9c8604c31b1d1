//! Parameterized layers and the candidate-op modules built from them.

use std::rc::Rc;

use ndarray::Ix1;

use crate::autodiff::{conv_macs, he_normal, ones, zeros, ConvMeta, NodeId, ParamCell, ParamSet, Tape};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::searchspace::{CandidateOpKind, OpGeometry};

pub struct Conv2dLayer<T: Scalar> {
    pub weight: Rc<ParamCell<T>>,
    pub bias: Option<Rc<ParamCell<T>>>,
    pub meta: ConvMeta,
    pub c_in: usize,
    pub c_out: usize,
}

impl<T: Scalar> Conv2dLayer<T> {
    pub fn new(
        reg: &mut ParamSet<T>,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        meta: ConvMeta,
        bias: bool,
    ) -> Self {
        let fan_in = (c_in / meta.groups) * meta.kernel * meta.kernel;
        let weight = reg.register(
            format!("{name}.weight"),
            he_normal(rng, &[c_out, c_in / meta.groups, meta.kernel, meta.kernel], fan_in),
            true,
        );
        let bias = bias.then(|| reg.register(format!("{name}.bias"), zeros(&[c_out]), true));
        Conv2dLayer { weight, bias, meta, c_in, c_out }
    }

    pub fn forward(&self, t: &mut Tape<T>, x: NodeId) -> NodeId {
        let w = t.param(&self.weight);
        let b = self.bias.as_ref().map(|b| t.param(b));
        t.conv2d(x, w, b, self.meta)
    }

    pub fn macs(&self, in_hw: (usize, usize)) -> (u64, (usize, usize)) {
        (conv_macs(&self.meta, self.c_in, self.c_out, in_hw), self.meta.output_hw(in_hw))
    }

    /// MAC count given the output size; convolution cost is output-indexed,
    /// which sidesteps the non-invertible ceil-halving of strided inputs.
    pub fn macs_for_output(&self, out_hw: (usize, usize)) -> u64 {
        let per_output = self.meta.kernel * self.meta.kernel * (self.c_in / self.meta.groups);
        (self.c_out * out_hw.0 * out_hw.1 * per_output) as u64
    }
}

pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Rc<ParamCell<T>>,
    pub beta: Rc<ParamCell<T>>,
    pub running_mean: Rc<ParamCell<T>>,
    pub running_var: Rc<ParamCell<T>>,
    pub eps: T,
    pub momentum: f64,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(reg: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: reg.register(format!("{name}.gamma"), ones(&[channels]), true),
            beta: reg.register(format!("{name}.beta"), zeros(&[channels]), true),
            running_mean: reg.register(format!("{name}.running_mean"), zeros(&[channels]), false),
            running_var: reg.register(format!("{name}.running_var"), ones(&[channels]), false),
            eps: T::from_f64(1e-5),
            momentum: 0.1,
        }
    }

    pub fn forward(&self, t: &mut Tape<T>, x: NodeId, train: bool) -> NodeId {
        let count = {
            let shape = t.value(x).shape();
            shape[0] * shape[2] * shape[3]
        };
        let g = t.param(&self.gamma);
        let b = t.param(&self.beta);
        let rm = self.running_mean.value.borrow().clone().into_dimensionality::<Ix1>().unwrap();
        let rv = self.running_var.value.borrow().clone().into_dimensionality::<Ix1>().unwrap();
        // a frozen layer keeps its statistics even in training mode
        let train = train && !self.gamma.frozen();
        let (y, stats) = t.batch_norm(x, g, b, (&rm, &rv), self.eps, train);
        if let Some((mean, var)) = stats {
            let m = self.momentum;
            let bessel = if count > 1 { count as f64 / (count as f64 - 1.0) } else { 1.0 };
            let mut rm_cell = self.running_mean.value.borrow_mut();
            let mut rv_cell = self.running_var.value.borrow_mut();
            for c in 0..mean.len() {
                let rm_old = rm_cell[[c].as_ref()].as_f64();
                let rv_old = rv_cell[[c].as_ref()].as_f64();
                rm_cell[[c].as_ref()] = T::from_f64((1.0 - m) * rm_old + m * mean[c].as_f64());
                rv_cell[[c].as_ref()] = T::from_f64((1.0 - m) * rv_old + m * var[c].as_f64() * bessel);
            }
        }
        y
    }
}

pub struct LinearLayer<T: Scalar> {
    pub weight: Rc<ParamCell<T>>,
    pub bias: Option<Rc<ParamCell<T>>>,
    pub in_features: usize,
    pub out_features: usize,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn new(reg: &mut ParamSet<T>, rng: &mut Rng, name: &str, in_features: usize, out_features: usize) -> Self {
        let weight = reg.register(
            format!("{name}.weight"),
            he_normal(rng, &[out_features, in_features], in_features),
            true,
        );
        let bias = Some(reg.register(format!("{name}.bias"), zeros(&[out_features]), true));
        LinearLayer { weight, bias, in_features, out_features }
    }

    pub fn forward(&self, t: &mut Tape<T>, x: NodeId) -> NodeId {
        let w = t.param(&self.weight);
        let b = self.bias.as_ref().map(|b| t.param(b));
        t.linear(x, w, b)
    }

    pub fn macs(&self) -> u64 {
        (self.in_features * self.out_features) as u64
    }
}

/// ReLU -> 2-D convolution -> batch norm, the ordering used by every
/// convolutional block in the searched cells.
pub struct ReluConvBn<T: Scalar> {
    pub conv: Conv2dLayer<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Scalar> ReluConvBn<T> {
    pub fn new(
        reg: &mut ParamSet<T>,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        meta: ConvMeta,
    ) -> Self {
        ReluConvBn {
            conv: Conv2dLayer::new(reg, rng, &format!("{name}.conv"), c_in, c_out, meta, false),
            bn: BatchNorm2d::new(reg, &format!("{name}.bn"), c_out),
        }
    }

    pub fn pointwise(reg: &mut ParamSet<T>, rng: &mut Rng, name: &str, c_in: usize, c_out: usize, stride: usize) -> Self {
        Self::new(reg, rng, name, c_in, c_out, ConvMeta::simple(1, stride, 0))
    }

    pub fn forward(&self, t: &mut Tape<T>, x: NodeId, train: bool) -> NodeId {
        let r = t.relu(x);
        let c = self.conv.forward(t, r);
        self.bn.forward(t, c, train)
    }

    pub fn macs(&self, in_hw: (usize, usize)) -> (u64, (usize, usize)) {
        self.conv.macs(in_hw)
    }
}

/// Doubled depthwise-separable block: ReLU -> depthwise -> pointwise -> BN,
/// applied twice; the stride lives in the first repetition.
pub struct SepConvBlock<T: Scalar> {
    dw1: Conv2dLayer<T>,
    pw1: Conv2dLayer<T>,
    bn1: BatchNorm2d<T>,
    dw2: Conv2dLayer<T>,
    pw2: Conv2dLayer<T>,
    bn2: BatchNorm2d<T>,
}

impl<T: Scalar> SepConvBlock<T> {
    pub fn new(
        reg: &mut ParamSet<T>,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        geo: OpGeometry,
        stride: usize,
    ) -> Self {
        let dw_meta = |s: usize| ConvMeta {
            kernel: geo.kernel,
            stride: s,
            padding: geo.padding,
            dilation: geo.dilation,
            groups: c_in,
        };
        SepConvBlock {
            dw1: Conv2dLayer::new(reg, rng, &format!("{name}.dw1"), c_in, c_in, dw_meta(stride), false),
            pw1: Conv2dLayer::new(reg, rng, &format!("{name}.pw1"), c_in, c_in, ConvMeta::simple(1, 1, 0), false),
            bn1: BatchNorm2d::new(reg, &format!("{name}.bn1"), c_in),
            dw2: Conv2dLayer::new(reg, rng, &format!("{name}.dw2"), c_in, c_in, dw_meta(1), false),
            pw2: Conv2dLayer::new(reg, rng, &format!("{name}.pw2"), c_in, c_out, ConvMeta::simple(1, 1, 0), false),
            bn2: BatchNorm2d::new(reg, &format!("{name}.bn2"), c_out),
        }
    }

    pub fn forward(&self, t: &mut Tape<T>, x: NodeId, train: bool) -> NodeId {
        let r = t.relu(x);
        let y = self.dw1.forward(t, r);
        let y = self.pw1.forward(t, y);
        let y = self.bn1.forward(t, y, train);
        let r = t.relu(y);
        let y = self.dw2.forward(t, r);
        let y = self.pw2.forward(t, y);
        self.bn2.forward(t, y, train)
    }

    pub fn macs(&self, in_hw: (usize, usize)) -> (u64, (usize, usize)) {
        let (m1, hw) = self.dw1.macs(in_hw);
        let (m2, hw) = self.pw1.macs(hw);
        let (m3, hw) = self.dw2.macs(hw);
        let (m4, hw) = self.pw2.macs(hw);
        (m1 + m2 + m3 + m4, hw)
    }
}

/// Dilated depthwise-separable block: ReLU -> dilated depthwise ->
/// pointwise -> BN, applied once.
pub struct DilConvBlock<T: Scalar> {
    dw: Conv2dLayer<T>,
    pw: Conv2dLayer<T>,
    bn: BatchNorm2d<T>,
}

impl<T: Scalar> DilConvBlock<T> {
    pub fn new(
        reg: &mut ParamSet<T>,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        geo: OpGeometry,
        stride: usize,
    ) -> Self {
        let dw_meta = ConvMeta {
            kernel: geo.kernel,
            stride,
            padding: geo.padding,
            dilation: geo.dilation,
            groups: c_in,
        };
        DilConvBlock {
            dw: Conv2dLayer::new(reg, rng, &format!("{name}.dw"), c_in, c_in, dw_meta, false),
            pw: Conv2dLayer::new(reg, rng, &format!("{name}.pw"), c_in, c_out, ConvMeta::simple(1, 1, 0), false),
            bn: BatchNorm2d::new(reg, &format!("{name}.bn"), c_out),
        }
    }

    pub fn forward(&self, t: &mut Tape<T>, x: NodeId, train: bool) -> NodeId {
        let r = t.relu(x);
        let y = self.dw.forward(t, r);
        let y = self.pw.forward(t, y);
        self.bn.forward(t, y, train)
    }

    pub fn macs(&self, in_hw: (usize, usize)) -> (u64, (usize, usize)) {
        let (m1, hw) = self.dw.macs(in_hw);
        let (m2, hw) = self.pw.macs(hw);
        (m1 + m2, hw)
    }
}

/// One instantiated candidate operation on a cell edge.
pub enum OpModule<T: Scalar> {
    SepConv(SepConvBlock<T>),
    DilConv(DilConvBlock<T>),
    MaxPool { stride: usize },
    AvgPool { stride: usize },
    Identity,
    /// Skip-connect on a reducing edge: identity cannot change spatial
    /// size, so it becomes a strided 1x1 projection.
    Projection(ReluConvBn<T>),
}

impl<T: Scalar> OpModule<T> {
    pub fn build(
        reg: &mut ParamSet<T>,
        rng: &mut Rng,
        name: &str,
        kind: CandidateOpKind,
        channels: usize,
        stride: usize,
        literal_dilconv_rows: bool,
    ) -> Self {
        match kind {
            CandidateOpKind::SepConv3 | CandidateOpKind::SepConv5 => {
                let geo = kind.geometry(literal_dilconv_rows).unwrap();
                OpModule::SepConv(SepConvBlock::new(reg, rng, name, channels, channels, geo, stride))
            }
            CandidateOpKind::DilConv3 | CandidateOpKind::DilConv5 => {
                let geo = kind.geometry(literal_dilconv_rows).unwrap();
                OpModule::DilConv(DilConvBlock::new(reg, rng, name, channels, channels, geo, stride))
            }
            CandidateOpKind::MaxPool3 => OpModule::MaxPool { stride },
            CandidateOpKind::AvgPool3 => OpModule::AvgPool { stride },
            CandidateOpKind::SkipConnect => {
                if stride == 1 {
                    OpModule::Identity
                } else {
                    OpModule::Projection(ReluConvBn::pointwise(reg, rng, name, channels, channels, stride))
                }
            }
        }
    }

    pub fn forward(&self, t: &mut Tape<T>, x: NodeId, train: bool) -> NodeId {
        match self {
            OpModule::SepConv(b) => b.forward(t, x, train),
            OpModule::DilConv(b) => b.forward(t, x, train),
            OpModule::MaxPool { stride } => t.max_pool(x, 3, *stride, 1),
            OpModule::AvgPool { stride } => t.avg_pool(x, 3, *stride, 1),
            OpModule::Identity => x,
            OpModule::Projection(p) => p.forward(t, x, train),
        }
    }

    /// MAC count; pooling and identity contribute zero.
    pub fn macs(&self, in_hw: (usize, usize)) -> (u64, (usize, usize)) {
        match self {
            OpModule::SepConv(b) => b.macs(in_hw),
            OpModule::DilConv(b) => b.macs(in_hw),
            OpModule::MaxPool { stride } | OpModule::AvgPool { stride } => {
                (0, ConvMeta::simple(3, *stride, 1).output_hw(in_hw))
            }
            OpModule::Identity => (0, in_hw),
            OpModule::Projection(p) => p.macs(in_hw),
        }
    }
}
