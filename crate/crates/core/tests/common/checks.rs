//! Finite-difference checks of every differentiable building block; each
//! returns a report so callers decide how to present it.

use hvmunet::autograd::Parameterized;
use hvmunet::model::{GroupNorm, HVssBlock};
use hvmunet::selective_scan::{HSs2d, HSs2dConfig, LocalSs2d, S6Params};
use hvmunet::training::{loss_and_grad, LossSpec, UNSUPERVISED};
use ndarray::{Array2, Array3, Array4, Ix2, Ix4};
use rand::Rng;

use super::{check_module, get, random_tensor, rng, set, CheckReport, STEP};

fn config(order: usize, channels: usize) -> HSs2dConfig {
    HSs2dConfig {
        state_dim: 2,
        ..HSs2dConfig::new(order, channels)
    }
}

/// Sum of the S6 output over a length-6 sequence with C = 2, N = 2.
pub fn s6() -> CheckReport {
    let mut r = rng(11);
    let params = S6Params::init("s6", 2, 2, &mut r);
    let x: Array2<f64> = random_tensor(&[6, 2], 1.0, &mut r).into_dimensionality::<Ix2>().unwrap();
    let sum_out = |p: &S6Params, x: &Array2<f64>| p.forward(x.view()).unwrap().0.sum();

    let (y, trace) = params.forward(x.view()).unwrap();
    let grads = params.backward(&trace, Array2::ones(y.raw_dim()).view());
    let analytic = grads.param_tensors();

    let mut report = CheckReport::default();
    let mut names = Vec::new();
    params.visit_params(&mut |p| names.push((p.name.clone(), p.numel())));
    let mut p = params.clone();
    for (idx, (name, numel)) in names.into_iter().enumerate() {
        for i in 0..numel {
            let orig = get(&p, &name, i);
            set(&mut p, &name, i, orig + STEP);
            let up = sum_out(&p, &x);
            set(&mut p, &name, i, orig - STEP);
            let down = sum_out(&p, &x);
            set(&mut p, &name, i, orig);
            let a = analytic[idx].as_slice().unwrap()[i];
            report.record(format!("{name}[{i}]"), a, (up - down) / (2.0 * STEP));
        }
    }
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.as_slice_mut().unwrap()[i] += STEP;
        xm.as_slice_mut().unwrap()[i] -= STEP;
        let numeric = (sum_out(&params, &xp) - sum_out(&params, &xm)) / (2.0 * STEP);
        report.record(format!("x[{i}]"), grads.x.as_slice().unwrap()[i], numeric);
    }
    report
}

pub fn local_ss2d() -> CheckReport {
    let mut r = rng(12);
    let mut m = LocalSs2d::init("loc", 4, 3, 2, &mut r).unwrap();
    let x = random_tensor(&[1, 4, 5, 6], 1.0, &mut r);
    check_module(&mut m, &x, |m, g, x| m.forward(g, x), 3)
}

/// On (1, 4, 6, 6).
pub fn h_ss2d(order: usize) -> CheckReport {
    let mut r = rng(20 + order as u64);
    let mut m = HSs2d::init("hss", config(order, 4), &mut r).unwrap();
    let x = random_tensor(&[1, 4, 6, 6], 1.0, &mut r);
    check_module(&mut m, &x, |m, g, x| m.forward(g, x), order as u64)
}

/// On (1, 4, 4, 4).
pub fn h_vss_block(order: usize) -> CheckReport {
    let mut r = rng(30 + order as u64);
    let mut block = HVssBlock::init("blk", config(order, 4), 4, &mut r).unwrap();
    let x = random_tensor(&[1, 4, 4, 4], 1.0, &mut r);
    check_module(&mut block, &x, |b, g, x| b.forward(g, x), 7)
}

/// On (2, C, 3, 4) with a random affine map.
pub fn group_norm(channels: usize, seed: u64) -> CheckReport {
    let mut r = rng(seed);
    let mut norm = GroupNorm::new("gn", channels);
    for v in norm.gamma.value.iter_mut().chain(norm.beta.value.iter_mut()) {
        *v = r.gen_range(-1.5..1.5);
    }
    let x = random_tensor(&[2, channels, 3, 4], 2.0, &mut r);
    check_module(&mut norm, &x, |n, g, x| n.forward(g, x), seed)
}

/// Logit gradient on (1, 4, 8, 8) with some unsupervised pixels; channel 3
/// never appears so the Dice mean runs over a subset.
pub fn loss(ce_weight: f64, dice_weight: f64) -> CheckReport {
    let mut r = rng(40);
    let logits: Array4<f64> = random_tensor(&[1, 4, 8, 8], 2.0, &mut r).into_dimensionality::<Ix4>().unwrap();
    let target = Array3::from_shape_fn((1, 8, 8), |_| match r.gen_range(0..10) {
        0 => UNSUPERVISED,
        v => (v % 3) as u8,
    });
    let spec = LossSpec {
        ce_weight,
        dice_weight,
        class_weights: vec![0.5, 1.5, 1.0, 2.0],
        dice_channels: vec![0, 1, 2, 3],
    };
    let (_, grad) = loss_and_grad(&logits, &target, &spec).unwrap();
    let f = |l: &Array4<f64>| loss_and_grad(l, &target, &spec).unwrap().0.total;
    let mut report = CheckReport::default();
    for i in 0..logits.len() {
        let mut up = logits.clone();
        let mut down = logits.clone();
        up.as_slice_mut().unwrap()[i] += STEP;
        down.as_slice_mut().unwrap()[i] -= STEP;
        let numeric = (f(&up) - f(&down)) / (2.0 * STEP);
        report.record(format!("logit[{i}]"), grad.as_slice().unwrap()[i], numeric);
    }
    report
}

pub const LOSS_WEIGHTS: [(f64, f64); 4] = [(1.0, 1.0), (1.0, 0.0), (0.0, 1.0), (0.3, 2.0)];
