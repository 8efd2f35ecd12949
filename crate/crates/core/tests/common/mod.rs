#![allow(dead_code)]

pub mod checks;
pub mod oracles;

use hvmunet::autograd::{Graph, Parameterized, Tensor, Var};
use hvmunet::Result;
use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Below this absolute difference two derivatives are indistinguishable
/// from central-difference round-off.
pub const ABS_FLOOR: f64 = 1e-9;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= ABS_FLOOR || diff <= REL_TOL * analytic.abs().max(numeric.abs())
}

#[derive(Debug, Default)]
pub struct CheckReport {
    pub checked: usize,
    pub failures: Vec<String>,
    pub worst_rel: f64,
}

impl CheckReport {
    pub fn record(&mut self, what: String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let diff = (analytic - numeric).abs();
        if analytic.abs().max(numeric.abs()) > 1e-6 {
            self.worst_rel = self.worst_rel.max(diff / analytic.abs().max(numeric.abs()));
        }
        if !close(analytic, numeric) {
            self.failures.push(format!("{what}: analytic {analytic:e} numeric {numeric:e}"));
        }
    }

    pub fn assert_ok(&self, name: &str) {
        assert!(self.checked > 0, "{name}: nothing checked");
        eprintln!("{name}: {} entries, worst relative error {:e}", self.checked, self.worst_rel);
        assert!(
            self.failures.is_empty(),
            "{name}: {} of {} entries off (worst rel {:e}):\n{}",
            self.failures.len(),
            self.checked,
            self.worst_rel,
            self.failures.iter().take(10).cloned().collect::<Vec<_>>().join("\n")
        );
    }
}

/// Compares graph gradients of `<w, f(x)>` for a fixed random `w` against
/// central differences, for the input and every parameter entry.
pub fn check_module<M, F>(module: &mut M, x: &Tensor, f: F, seed: u64) -> CheckReport
where
    M: Parameterized,
    F: Fn(&M, &mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = f(module, &mut g, xv).unwrap();
    let w = random_tensor(g.shape(y), 1.0, &mut rng(seed));
    let loss = g.weighted_sum(y, &w);
    let grads = g.backward(loss);

    let value = |m: &M, x: &Tensor| -> f64 {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let y = f(m, &mut g, xv).unwrap();
        (g.value(y) * &w).sum()
    };

    let mut report = CheckReport::default();
    let gx = grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.raw_dim()));
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.as_slice_mut().unwrap()[i] += STEP;
        xm.as_slice_mut().unwrap()[i] -= STEP;
        let numeric = (value(module, &xp) - value(module, &xm)) / (2.0 * STEP);
        report.record(format!("input[{i}]"), gx.as_slice().unwrap()[i], numeric);
    }

    let mut names = Vec::new();
    module.visit_params(&mut |p| names.push((p.name.clone(), p.numel())));
    for (name, numel) in names {
        let analytic = grads.param(&name).cloned();
        for i in 0..numel {
            let eval_at = |module: &mut M, delta: f64| {
                let orig = get(module, &name, i);
                set(module, &name, i, orig + delta);
                let v = value(module, x);
                set(module, &name, i, orig);
                v
            };
            let numeric = (eval_at(module, STEP) - eval_at(module, -STEP)) / (2.0 * STEP);
            let a = analytic.as_ref().map_or(0.0, |t| t.as_slice().unwrap()[i]);
            report.record(format!("{name}[{i}]"), a, numeric);
        }
    }
    report
}

pub fn get<M: Parameterized>(module: &M, name: &str, i: usize) -> f64 {
    let mut out = f64::NAN;
    module.visit_params(&mut |p| {
        if p.name == name {
            out = p.value.as_slice().unwrap()[i];
        }
    });
    out
}

pub fn set<M: Parameterized>(module: &mut M, name: &str, i: usize, v: f64) {
    module.visit_params_mut(&mut |p| {
        if p.name == name {
            p.value.as_slice_mut().unwrap()[i] = v;
        }
    });
}
