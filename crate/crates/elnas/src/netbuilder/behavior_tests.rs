//! Shape, equivalence, and cost checks for built networks.

use ndarray::{ArrayD, IxDyn};
use rand::Rng as _;

use crate::autodiff::{ParamSet, Tape};
use crate::rng;
use crate::searchspace::{
    derive_genotype, edge_count, ArchParams, CandidateOpKind, CellGenotype, CellKind, NetworkGenotype,
    Selection, NUM_OPS,
};

use super::cell::{CellLayout, MixedOp};
use super::network::{DiscreteNetwork, Supernet};
use super::teacher::TeacherBackbone;
use super::NetworkSpec;

fn rand_image_batch(seed: u64, n: usize, c: usize, hw: (usize, usize)) -> ArrayD<f64> {
    let mut r = rng::from_seed(seed);
    ArrayD::from_shape_simple_fn(IxDyn(&[n, c, hw.0, hw.1]), || r.gen_range(-1.0..1.0))
}

fn random_genotype(seed: u64, max_skip: usize) -> NetworkGenotype {
    let mut r = rng::from_seed(seed);
    let rows = edge_count(4);
    let normal = ndarray::Array2::from_shape_simple_fn((rows, NUM_OPS), || r.gen_range(-1.0f64..1.0));
    let reduction = ndarray::Array2::from_shape_simple_fn((rows, NUM_OPS), || r.gen_range(-1.0f64..1.0));
    derive_genotype(&ArchParams { alpha_normal: normal, alpha_reduction: reduction }, max_skip).unwrap()
}

fn all_op_genotype(op: CandidateOpKind) -> NetworkGenotype {
    let cell = |kind: CellKind| {
        let mut selections = Vec::new();
        for node in 0..4 {
            selections.push(Selection { node, source: 0, op });
            selections.push(Selection { node, source: 1, op });
        }
        CellGenotype { kind, selections }
    };
    NetworkGenotype { normal: cell(CellKind::Normal), reduction: cell(CellKind::Reduction) }
}

fn check_trace(spec: &NetworkSpec, tape: &Tape<f64>, out: &super::network::NetworkOutput, batch: usize) {
    let rows = spec.shape_trace();
    let stem_shape = tape.value(out.stem).shape().to_vec();
    assert_eq!(stem_shape, vec![batch, rows[1].channels, rows[1].hw.0, rows[1].hw.1]);
    for (i, &cell) in out.cell_outputs.iter().enumerate() {
        let row = &rows[2 + i];
        assert_eq!(
            tape.value(cell).shape(),
            &[batch, row.channels, row.hw.0, row.hw.1],
            "cell {i} shape"
        );
    }
    assert_eq!(tape.value(out.logits).shape(), &[batch, spec.num_classes]);
}

#[test]
fn discrete_forward_matches_trace() {
    let spec = NetworkSpec::final_model().with_c0(8).with_input_hw((32, 32));
    let genotype = random_genotype(5, 2);
    let net = DiscreteNetwork::<f64>::build(&spec, &genotype, 7).unwrap();
    let mut t = Tape::new();
    let out = net.forward(&mut t, rand_image_batch(1, 2, 3, (32, 32)), false).unwrap();
    check_trace(&spec, &t, &out, 2);
}

#[test]
fn supernet_forward_matches_trace() {
    let spec = NetworkSpec::final_model().with_c0(8).with_input_hw((32, 32));
    let net = Supernet::<f64>::build(&spec, 7).unwrap();
    let mut t = Tape::new();
    let out = net.forward(&mut t, rand_image_batch(2, 2, 3, (32, 32)), false).unwrap();
    check_trace(&spec, &t, &out, 2);
}

#[test]
fn input_shape_mismatch_is_config_error() {
    let spec = NetworkSpec::final_model().with_c0(8).with_input_hw((32, 32));
    let net = Supernet::<f64>::build(&spec, 7).unwrap();
    let mut t = Tape::new();
    let err = net.forward(&mut t, rand_image_batch(2, 2, 3, (16, 16)), false).unwrap_err();
    assert!(matches!(err, crate::Error::Config(_)));
}

#[test]
fn all_skip_genotype_is_shape_valid() {
    let spec = NetworkSpec::final_model().with_c0(8).with_input_hw((32, 32));
    let genotype = all_op_genotype(CandidateOpKind::SkipConnect);
    let net = DiscreteNetwork::<f64>::build(&spec, &genotype, 3).unwrap();
    let mut t = Tape::new();
    let out = net.forward(&mut t, rand_image_batch(3, 1, 3, (32, 32)), false).unwrap();
    check_trace(&spec, &t, &out, 1);
}

#[test]
fn structurally_invalid_genotype_rejected_with_report() {
    let spec = NetworkSpec::final_model().with_c0(8).with_input_hw((32, 32));
    let mut genotype = random_genotype(6, 2);
    genotype.normal.selections[0] = Selection { node: 0, source: 9, op: CandidateOpKind::SepConv3 };
    match DiscreteNetwork::<f64>::build(&spec, &genotype, 3) {
        Err(crate::Error::InvalidGenotype(report)) => assert!(!report.is_empty()),
        Err(other) => panic!("expected genotype rejection, got {other:?}"),
        Ok(_) => panic!("invalid genotype was accepted"),
    }
}

#[test]
fn one_hot_mixture_equals_single_branch() {
    // a supernet edge with one-hot weights must reproduce the branch exactly
    let layout = CellLayout {
        kind: CellKind::Reduction,
        nodes: 4,
        c_in0: 8,
        c_in1: 8,
        c_node: 4,
        c_out: 16,
        pre0_stride: 1,
        literal_dilconv_rows: false,
    };
    let mut reg = ParamSet::new();
    let mut r = rng::from_seed(11);
    let mixed = MixedOp::<f64>::build(&mut reg, &mut r, "edge", &layout, 0);
    let x = rand_image_batch(12, 2, 4, (9, 9));
    for k in 0..NUM_OPS {
        let mut t = Tape::new();
        let xi = t.input(x.clone());
        let branches: Vec<_> = mixed.ops.iter().map(|op| op.forward(&mut t, xi, true)).collect();
        let mut one_hot = vec![0.0f64; NUM_OPS];
        one_hot[k] = 1.0;
        let w = t.input(ArrayD::from_shape_vec(IxDyn(&[NUM_OPS]), one_hot).unwrap());
        let mixture = t.weighted_sum(&branches, w);
        let diff = tensor_max_abs_diff(t.value(mixture), t.value(branches[k]));
        assert!(diff < 1e-5, "op {k}: max diff {diff}");
    }
}

#[test]
fn equal_weights_mixture_is_branch_average() {
    let layout = CellLayout {
        kind: CellKind::Normal,
        nodes: 4,
        c_in0: 8,
        c_in1: 8,
        c_node: 4,
        c_out: 16,
        pre0_stride: 1,
        literal_dilconv_rows: false,
    };
    let mut reg = ParamSet::new();
    let mut r = rng::from_seed(13);
    let mixed = MixedOp::<f64>::build(&mut reg, &mut r, "edge", &layout, 2);
    let x = rand_image_batch(14, 1, 4, (6, 6));
    let mut t = Tape::new();
    let xi = t.input(x);
    let branches: Vec<_> = mixed.ops.iter().map(|op| op.forward(&mut t, xi, true)).collect();
    let w = t.input(ArrayD::from_elem(IxDyn(&[NUM_OPS]), 1.0 / NUM_OPS as f64));
    let mixture = t.weighted_sum(&branches, w);
    let mut mean = t.value(branches[0]).clone();
    for &b in &branches[1..] {
        mean += t.value(b);
    }
    mean.mapv_inplace(|v| v / NUM_OPS as f64);
    assert!(tensor_max_abs_diff(t.value(mixture), &mean) < 1e-9);
}

fn tensor_max_abs_diff(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    let mut worst = 0.0f64;
    ndarray::Zip::from(a).and(b).for_each(|&x, &y| worst = worst.max((x - y).abs()));
    worst
}

#[test]
fn stem_and_head_param_counts_match_hand_formulas() {
    let spec = NetworkSpec::final_model();
    let net = DiscreteNetwork::<f32>::build(&spec, &random_genotype(8, 2), 5).unwrap();
    let stem: u64 = net
        .params
        .learnable()
        .filter(|p| p.name().starts_with("stem."))
        .map(|p| p.numel() as u64)
        .sum();
    // 3x3x3x64 kernel plus one scale/shift pair per stem channel
    assert_eq!(stem, 3 * 3 * 3 * 64 + 2 * 64);
    let head: u64 = net
        .params
        .learnable()
        .filter(|p| p.name().starts_with("head."))
        .map(|p| p.numel() as u64)
        .sum();
    assert_eq!(head, 512 * 2 + 2);
}

#[test]
fn single_conv_flops_closed_form() {
    let mut reg = ParamSet::<f32>::new();
    let mut r = rng::from_seed(4);
    let conv = super::layers::Conv2dLayer::new(
        &mut reg,
        &mut r,
        "c",
        3,
        64,
        crate::autodiff::ConvMeta::simple(3, 1, 1),
        false,
    );
    let (macs, out_hw) = conv.macs((150, 150));
    assert_eq!(out_hw, (150, 150));
    assert_eq!(2 * macs, 2 * 3 * 3 * 3 * 64 * 150 * 150);
}

#[test]
fn pooling_and_skip_ops_count_zero_flops() {
    let layout = CellLayout {
        kind: CellKind::Normal,
        nodes: 4,
        c_in0: 8,
        c_in1: 8,
        c_node: 4,
        c_out: 16,
        pre0_stride: 1,
        literal_dilconv_rows: false,
    };
    let mut reg = ParamSet::<f32>::new();
    let mut r = rng::from_seed(4);
    let mixed = MixedOp::build(&mut reg, &mut r, "edge", &layout, 2);
    for (kind, op) in CandidateOpKind::ALL.iter().zip(mixed.ops.iter()) {
        let (macs, _) = op.macs((10, 10));
        if kind.is_pool() || kind.is_skip() {
            assert_eq!(macs, 0, "{kind:?}");
        } else {
            assert!(macs > 0, "{kind:?}");
        }
    }
}

#[test]
fn candidate_ops_preserve_or_halve_spatial_size() {
    for stride in [1usize, 2] {
        let layout = CellLayout {
            kind: if stride == 1 { CellKind::Normal } else { CellKind::Reduction },
            nodes: 4,
            c_in0: 4,
            c_in1: 4,
            c_node: 4,
            c_out: 16,
            pre0_stride: 1,
            literal_dilconv_rows: false,
        };
        let mut reg = ParamSet::<f64>::new();
        let mut r = rng::from_seed(4);
        let mixed = MixedOp::build(&mut reg, &mut r, "edge", &layout, 0);
        for hw in [19usize, 10, 8, 5] {
            let x = rand_image_batch(hw as u64, 1, 4, (hw, hw));
            for (kind, op) in CandidateOpKind::ALL.iter().zip(mixed.ops.iter()) {
                let mut t = Tape::new();
                let xi = t.input(x.clone());
                let y = op.forward(&mut t, xi, false);
                let got = t.value(y).shape()[2];
                let want = if stride == 1 { hw } else { hw.div_ceil(2) };
                assert_eq!(got, want, "{kind:?} stride {stride} at {hw}");
            }
        }
    }
}

#[test]
fn teacher_forward_taps_and_shapes() {
    let teacher = TeacherBackbone::<f64>::build(8, 3, 2, 21).unwrap();
    let mut t = Tape::new();
    let out = teacher.forward(&mut t, rand_image_batch(22, 2, 3, (32, 32)), false).unwrap();
    assert_eq!(out.taps.len(), 4);
    let hw = teacher.tap_hw((32, 32));
    let ch = teacher.tap_channels();
    for (i, &tap) in out.taps.iter().enumerate() {
        assert_eq!(t.value(tap).shape(), &[2, ch[i], hw[i].0, hw[i].1], "tap {i}");
    }
    assert_eq!(t.value(out.logits).shape(), &[2, 2]);
}

#[test]
fn alpha_gradient_matches_finite_differences() {
    // central differences through the full supernet on a small input
    let spec = NetworkSpec::final_model().with_c0(4).with_input_hw((8, 8));
    let net = Supernet::<f64>::build(&spec, 3).unwrap();
    let images = rand_image_batch(31, 4, 3, (8, 8));
    let labels = vec![0usize, 1, 0, 1];
    let loss_of = |net: &Supernet<f64>, grad: bool| -> f64 {
        let mut t = Tape::new();
        let out = net.forward(&mut t, images.clone(), true).unwrap();
        let loss = t.cross_entropy(out.logits, &labels);
        if grad {
            t.backward(loss);
        }
        t.scalar_value(loss)
    };
    net.params.zero_grads();
    loss_of(&net, true);
    let mut r = rng::from_seed(77);
    for cell in [&net.alpha_normal, &net.alpha_reduction] {
        for _ in 0..3 {
            let idx = r.gen_range(0..cell.numel());
            let orig = cell.value.borrow().as_slice().unwrap()[idx];
            let h = 1e-6;
            cell.value.borrow_mut().as_slice_mut().unwrap()[idx] = orig + h;
            let lp = loss_of(&net, false);
            cell.value.borrow_mut().as_slice_mut().unwrap()[idx] = orig - h;
            let lm = loss_of(&net, false);
            cell.value.borrow_mut().as_slice_mut().unwrap()[idx] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = cell.grad.borrow().as_slice().unwrap()[idx];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-10);
            assert!(rel < 1e-3, "{}[{idx}]: numeric {numeric} vs analytic {analytic}", cell.name());
        }
    }
}

#[test]
fn representative_full_scale_costs() {
    let spec = NetworkSpec::final_model();
    let genotype = random_genotype(40, 2);
    let net = DiscreteNetwork::<f32>::build(&spec, &genotype, 9).unwrap();
    let params = super::count_params(&net.params);
    assert!((1_000_000..3_000_000).contains(&params), "params {params}");
    let flops = super::network::count_flops_discrete(&net);
    assert!((500_000_000..2_000_000_000).contains(&flops), "flops {flops}");
}
