//! Gradient and value checks for every tape operation.
//!
//! Forward values are compared against a naive direct-convolution oracle;
//! gradients are compared against central finite differences in f64.

use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng as _;

use super::*;
use crate::rng;
use crate::scalar::Scalar;

fn rand_array(rng: &mut rng::Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0))
}

fn set_flat(p: &Rc<ParamCell<f64>>, idx: usize, v: f64) {
    let mut value = p.value.borrow_mut();
    value.as_slice_mut().unwrap()[idx] = v;
}

fn get_flat(p: &Rc<ParamCell<f64>>, idx: usize) -> f64 {
    p.value.borrow().as_slice().unwrap()[idx]
}

/// Compare analytic gradients against finite differences on a sample of
/// entries of every parameter touched by `run`.
fn check_grads(params: &[Rc<ParamCell<f64>>], run: &dyn Fn(bool) -> f64, tol: f64) {
    for p in params {
        p.zero_grad();
    }
    run(true);
    let mut rng = rng::from_seed(99);
    for p in params {
        let n = p.numel();
        let picks: Vec<usize> = if n <= 6 {
            (0..n).collect()
        } else {
            (0..6).map(|_| rng.gen_range(0..n)).collect()
        };
        for idx in picks {
            let orig = get_flat(p, idx);
            let h = 1e-5 * orig.abs().max(1.0);
            set_flat(p, idx, orig + h);
            let lp = run(false);
            set_flat(p, idx, orig - h);
            let lm = run(false);
            set_flat(p, idx, orig);
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = p.grad.borrow().as_slice().unwrap()[idx];
            let denom = numeric.abs().max(analytic.abs()).max(1e-8);
            assert!(
                (numeric - analytic).abs() / denom < tol,
                "{}[{}]: numeric {} vs analytic {}",
                p.name(),
                idx,
                numeric,
                analytic
            );
        }
    }
}

/// Direct O(n^7) convolution used as an independent forward oracle.
fn naive_conv2d(x: &ArrayD<f64>, w: &ArrayD<f64>, b: Option<&ArrayD<f64>>, m: &ConvMeta) -> ArrayD<f64> {
    let (n, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, cpg_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let eff = m.dilation * (k - 1) + 1;
    let oh = (h + 2 * m.padding - eff) / m.stride + 1;
    let ow = (wd + 2 * m.padding - eff) / m.stride + 1;
    let cpg_out = c_out / m.groups;
    let mut y = ArrayD::zeros(IxDyn(&[n, c_out, oh, ow]));
    for ni in 0..n {
        for co in 0..c_out {
            let g = co / cpg_out;
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut acc = b.map(|bv| bv[[co].as_ref()]).unwrap_or(0.0);
                    for cg in 0..cpg_in {
                        let ci = g * cpg_in + cg;
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = (ohi * m.stride + kh * m.dilation) as isize - m.padding as isize;
                                let iw = (owi * m.stride + kw * m.dilation) as isize - m.padding as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                    acc += x[[ni, ci, ih as usize, iw as usize].as_ref()]
                                        * w[[co, cg, kh, kw].as_ref()];
                                }
                            }
                        }
                    }
                    y[[ni, co, ohi, owi].as_ref()] = acc;
                }
            }
        }
    }
    y
}

fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mut worst = 0.0f64;
    ndarray::Zip::from(a).and(b).for_each(|&x, &y| {
        let e = (x - y).abs() / x.abs().max(y.abs()).max(1e-9);
        worst = worst.max(e);
    });
    worst
}

fn conv_case(shape: &[usize], c_out: usize, meta: ConvMeta, seed: u64) {
    let mut r = rng::from_seed(seed);
    let x = rand_array(&mut r, shape);
    let w = rand_array(&mut r, &[c_out, shape[1] / meta.groups, meta.kernel, meta.kernel]);
    let b = rand_array(&mut r, &[c_out]);

    let mut set = ParamSet::new();
    let xp = set.register("x", x.clone(), true);
    let wp = set.register("w", w.clone(), true);
    let bp = set.register("b", b.clone(), true);
    let target = rand_array(&mut r, naive_conv2d(&x, &w, Some(&b), &meta).shape());

    // forward oracle
    {
        let mut t = Tape::<f64>::new();
        let xi = t.param(&xp);
        let wi = t.param(&wp);
        let bi = t.param(&bp);
        let y = t.conv2d(xi, wi, Some(bi), meta);
        let reference = naive_conv2d(&xp.value.borrow(), &wp.value.borrow(), Some(&bp.value.borrow()), &meta);
        assert!(max_rel_err(t.value(y), &reference) < 1e-12, "conv forward mismatch");
    }

    let run = |grad: bool| -> f64 {
        let mut t = Tape::<f64>::new();
        let xi = t.param(&xp);
        let wi = t.param(&wp);
        let bi = t.param(&bp);
        let y = t.conv2d(xi, wi, Some(bi), meta);
        let tgt = t.input(target.clone());
        let loss = t.mse(y, tgt);
        if grad {
            t.backward(loss);
        }
        t.scalar_value(loss)
    };
    check_grads(&[xp.clone(), wp.clone(), bp.clone()], &run, 1e-5);
}

#[test]
fn conv2d_standard() {
    conv_case(&[2, 3, 6, 5], 4, ConvMeta::simple(3, 1, 1), 1);
}

#[test]
fn conv2d_strided() {
    conv_case(&[2, 3, 7, 7], 4, ConvMeta::simple(3, 2, 1), 2);
}

#[test]
fn conv2d_dilated() {
    conv_case(&[1, 2, 9, 9], 3, ConvMeta { kernel: 3, stride: 1, padding: 2, dilation: 2, groups: 1 }, 3);
}

#[test]
fn conv2d_dilated_strided_k5() {
    conv_case(&[1, 2, 11, 11], 2, ConvMeta { kernel: 5, stride: 2, padding: 4, dilation: 2, groups: 1 }, 4);
}

#[test]
fn conv2d_grouped() {
    conv_case(&[2, 4, 6, 6], 6, ConvMeta { kernel: 3, stride: 1, padding: 1, dilation: 1, groups: 2 }, 5);
}

#[test]
fn conv2d_depthwise() {
    conv_case(&[2, 4, 6, 6], 4, ConvMeta { kernel: 3, stride: 1, padding: 1, dilation: 1, groups: 4 }, 6);
}

#[test]
fn conv2d_depthwise_strided_dilated() {
    conv_case(&[1, 3, 9, 9], 3, ConvMeta { kernel: 3, stride: 2, padding: 2, dilation: 2, groups: 3 }, 7);
}

#[test]
fn conv2d_1x1_strided() {
    conv_case(&[2, 3, 7, 7], 5, ConvMeta::simple(1, 2, 0), 8);
}

#[test]
fn linear_grads() {
    let mut r = rng::from_seed(10);
    let mut set = ParamSet::new();
    let xp = set.register("x", rand_array(&mut r, &[3, 5]), true);
    let wp = set.register("w", rand_array(&mut r, &[4, 5]), true);
    let bp = set.register("b", rand_array(&mut r, &[4]), true);
    let target = rand_array(&mut r, &[3, 4]);
    let run = |grad: bool| -> f64 {
        let mut t = Tape::<f64>::new();
        let xi = t.param(&xp);
        let wi = t.param(&wp);
        let bi = t.param(&bp);
        let y = t.linear(xi, wi, Some(bi));
        let tgt = t.input(target.clone());
        let loss = t.mse(y, tgt);
        if grad {
            t.backward(loss);
        }
        t.scalar_value(loss)
    };
    check_grads(&[xp.clone(), wp.clone(), bp.clone()], &run, 1e-6);
}

#[test]
fn batch_norm_train_and_eval_grads() {
    let mut r = rng::from_seed(11);
    let mut set = ParamSet::new();
    let xp = set.register("x", rand_array(&mut r, &[3, 4, 5, 5]), true);
    let gp = set.register("gamma", rand_array(&mut r, &[4]), true);
    let bp = set.register("beta", rand_array(&mut r, &[4]), true);
    let rm = ndarray::Array1::from_shape_simple_fn(4, || r.gen_range(-0.5..0.5));
    let rv = ndarray::Array1::from_shape_simple_fn(4, || r.gen_range(0.5..1.5));
    let target = rand_array(&mut r, &[3, 4, 5, 5]);
    for train in [true, false] {
        let run = |grad: bool| -> f64 {
            let mut t = Tape::<f64>::new();
            let xi = t.param(&xp);
            let gi = t.param(&gp);
            let bi = t.param(&bp);
            let (y, _) = t.batch_norm(xi, gi, bi, (&rm, &rv), 1e-5, train);
            let tgt = t.input(target.clone());
            let loss = t.mse(y, tgt);
            if grad {
                t.backward(loss);
            }
            t.scalar_value(loss)
        };
        check_grads(&[xp.clone(), gp.clone(), bp.clone()], &run, 1e-5);
    }
}

#[test]
fn pool_grads() {
    let mut r = rng::from_seed(12);
    let mut set = ParamSet::new();
    let xp = set.register("x", rand_array(&mut r, &[2, 3, 7, 7]), true);
    let t2 = rand_array(&mut r, &[2, 3, 4, 4]);
    let t3 = rand_array(&mut r, &[2, 3, 3, 3]);
    for mode in 0..3 {
        let run = |grad: bool| -> f64 {
            let mut t = Tape::<f64>::new();
            let xi = t.param(&xp);
            let (y, tgt) = match mode {
                0 => (t.max_pool(xi, 3, 2, 1), t.input(t2.clone())),
                1 => (t.avg_pool(xi, 3, 2, 1), t.input(t2.clone())),
                _ => (t.adaptive_avg_pool(xi, (3, 3)), t.input(t3.clone())),
            };
            let loss = t.mse(y, tgt);
            if grad {
                t.backward(loss);
            }
            t.scalar_value(loss)
        };
        check_grads(&[xp.clone()], &run, 1e-5);
    }
}

#[test]
fn mixed_edge_grads() {
    // softmax over a logits row feeding a weighted sum of branches: the
    // continuous-relaxation pattern used on every supernet edge.
    let mut r = rng::from_seed(13);
    let mut set = ParamSet::new();
    let alpha = set.register("alpha", rand_array(&mut r, &[2, 3]), true);
    let b0 = set.register("b0", rand_array(&mut r, &[1, 2, 4, 4]), true);
    let b1 = set.register("b1", rand_array(&mut r, &[1, 2, 4, 4]), true);
    let b2 = set.register("b2", rand_array(&mut r, &[1, 2, 4, 4]), true);
    let target = rand_array(&mut r, &[1, 2, 4, 4]);
    let run = |grad: bool| -> f64 {
        let mut t = Tape::<f64>::new();
        let ai = t.param(&alpha);
        let soft = t.softmax_rows(ai);
        let row = t.row(soft, 1);
        let xs = [t.param(&b0), t.param(&b1), t.param(&b2)];
        let y = t.weighted_sum(&xs, row);
        let tgt = t.input(target.clone());
        let loss = t.mse(y, tgt);
        if grad {
            t.backward(loss);
        }
        t.scalar_value(loss)
    };
    check_grads(&[alpha.clone(), b0.clone(), b1.clone(), b2.clone()], &run, 1e-6);
}

#[test]
fn attention_map_grads() {
    let mut r = rng::from_seed(14);
    let mut set = ParamSet::new();
    let xp = set.register("x", rand_array(&mut r, &[2, 3, 4, 4]), true);
    let target = rand_array(&mut r, &[2, 1, 4, 4]);
    for power in [2.0, 3.0] {
        let run = |grad: bool| -> f64 {
            let mut t = Tape::<f64>::new();
            let xi = t.param(&xp);
            let a = t.attention_map(xi, power);
            let tgt = t.input(target.clone());
            let loss = t.mse(a, tgt);
            if grad {
                t.backward(loss);
            }
            t.scalar_value(loss)
        };
        check_grads(&[xp.clone()], &run, 1e-5);
    }
}

#[test]
fn attention_map_values() {
    // two channels holding 1 and 2 at one location, squared: (1+4)/2 = 2.5
    let mut t = Tape::<f64>::new();
    let mut x = ArrayD::zeros(IxDyn(&[1, 2, 1, 1]));
    x[[0, 0, 0, 0].as_ref()] = 1.0;
    x[[0, 1, 0, 0].as_ref()] = 2.0;
    let xi = t.input(x);
    let a = t.attention_map(xi, 2.0);
    assert!((t.value(a)[[0, 0, 0, 0].as_ref()] - 2.5).abs() < 1e-12);
}

#[test]
fn loss_ops_grads() {
    let mut r = rng::from_seed(15);
    let mut set = ParamSet::new();
    let sp = set.register("student", rand_array(&mut r, &[4, 2]), true);
    let tp = set.register("teacher", rand_array(&mut r, &[4, 2]), true);
    let labels = vec![0usize, 1, 1, 0];
    let run_ce = |grad: bool| -> f64 {
        let mut t = Tape::<f64>::new();
        let si = t.param(&sp);
        let loss = t.cross_entropy(si, &labels);
        if grad {
            t.backward(loss);
        }
        t.scalar_value(loss)
    };
    check_grads(&[sp.clone()], &run_ce, 1e-6);

    let run_kl = |grad: bool| -> f64 {
        let mut t = Tape::<f64>::new();
        let si = t.param(&sp);
        let ti = t.param(&tp);
        let loss = t.kl_div(si, ti);
        if grad {
            t.backward(loss);
        }
        t.scalar_value(loss)
    };
    check_grads(&[sp.clone(), tp.clone()], &run_kl, 1e-5);
}

#[test]
fn structural_ops_grads() {
    let mut r = rng::from_seed(16);
    let mut set = ParamSet::new();
    let a = set.register("a", rand_array(&mut r, &[1, 2, 3, 3]), true);
    let b = set.register("b", rand_array(&mut r, &[1, 4, 3, 3]), true);
    let target = rand_array(&mut r, &[1, 3, 3, 3]);
    let run = |grad: bool| -> f64 {
        let mut t = Tape::<f64>::new();
        let ai = t.param(&a);
        let bi = t.param(&b);
        let bm = t.channel_group_mean(bi, 4); // -> 1 channel
        let cat = t.concat_channels(&[ai, bm]); // -> 3 channels
        let rl = t.relu(cat);
        let sc = t.scale(rl, 1.7);
        let tgt = t.input(target.clone());
        let loss = t.mse(sc, tgt);
        if grad {
            t.backward(loss);
        }
        t.scalar_value(loss)
    };
    check_grads(&[a.clone(), b.clone()], &run, 1e-5);
}

#[test]
fn select_item_and_keep_grads() {
    let mut r = rng::from_seed(17);
    let mut set = ParamSet::new();
    let xp = set.register("x", rand_array(&mut r, &[2, 3]), true);
    let mut t = Tape::<f64>::new();
    let xi = t.param(&xp);
    let soft = t.softmax_rows(xi);
    let picked = t.select_item(soft, 1, 2);
    let kept = t.backward_keep(picked, &[soft]);
    let g = kept[0].as_ref().expect("kept gradient");
    assert_eq!(g.shape(), &[2, 3]);
    assert_eq!(g[[1, 2].as_ref()], 1.0);
    assert_eq!(g[[0, 0].as_ref()], 0.0);
}

#[test]
fn frozen_params_get_no_grad() {
    let mut r = rng::from_seed(18);
    let mut set = ParamSet::new();
    let xp = set.register("x", rand_array(&mut r, &[2, 2]), true);
    xp.set_frozen(true);
    let mut t = Tape::<f64>::new();
    let xi = t.param(&xp);
    let labels = vec![0usize, 1];
    let loss = t.cross_entropy(xi, &labels);
    t.backward(loss);
    assert!(xp.grad.borrow().iter().all(|&g| g == 0.0));
}

#[test]
fn cross_entropy_uniform_logits_is_ln2() {
    let mut t = Tape::<f64>::new();
    let xi = t.input(ArrayD::zeros(IxDyn(&[3, 2])));
    let loss = t.cross_entropy(xi, &[0, 1, 0]);
    assert!((t.scalar_value(loss) - (2.0f64).ln()).abs() < 1e-12);
}
