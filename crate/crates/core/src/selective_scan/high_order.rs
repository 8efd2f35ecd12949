use ndarray::{Array3, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::local::{hwc_to_nchw, nchw_to_hwc};
use super::{LocalSs2d, MAX_ORDER};
use crate::autograd::{ForwardHooks, Graph, Param, Parameterized, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeRule {
    #[default]
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HSs2dConfig {
    pub order: usize,
    pub channels: usize,
    pub local_kernel: usize,
    pub state_dim: usize,
    #[serde(default)]
    pub merge_rule: MergeRule,
}

impl HSs2dConfig {
    pub fn new(order: usize, channels: usize) -> Self {
        Self {
            order,
            channels,
            local_kernel: 3,
            state_dim: 8,
            merge_rule: MergeRule::Average,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_ORDER).contains(&self.order) {
            return Err(Error::OrderOutOfRange(self.order));
        }
        if self.channels % 2 != 0 {
            return Err(Error::OddChannelSplit(self.channels));
        }
        if self.local_kernel % 2 == 0 {
            return Err(Error::ConfigInvalid(format!(
                "local kernel {} must be odd",
                self.local_kernel
            )));
        }
        if self.state_dim == 0 {
            return Err(Error::ConfigInvalid("state_dim must be positive".into()));
        }
        Ok(())
    }
}

/// One recursion level: `out = P_out(inner(P_body x) * P_gate x)` with
/// channel-preserving 1x1 projections.
#[derive(Clone, Debug, PartialEq)]
pub struct GateLevel {
    pub gate_w: Param,
    pub gate_b: Param,
    pub body_w: Param,
    pub body_b: Param,
    pub out_w: Param,
    pub out_b: Param,
}

impl GateLevel {
    fn init<R: Rng + ?Sized>(prefix: &str, c: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (c as f64).sqrt();
        let w = |name: &str, rng: &mut R| Param::uniform(format!("{prefix}.{name}.w"), &[c, c, 1, 1], bound, rng);
        let b = |name: &str| Param::zeros(format!("{prefix}.{name}.b"), &[c]);
        Self {
            gate_w: w("gate", rng),
            gate_b: b("gate"),
            body_w: w("body", rng),
            body_b: b("body"),
            out_w: w("out", rng),
            out_b: b("out"),
        }
    }

    fn project(g: &mut Graph, x: Var, w: &Param, b: &Param) -> Var {
        let wv = g.param(w);
        let bv = g.param(b);
        g.conv2d(x, wv, Some(bv), 1)
    }
}

impl Parameterized for GateLevel {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for p in [&self.gate_w, &self.gate_b, &self.body_w, &self.body_b, &self.out_w, &self.out_b] {
            f(p);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for p in [
            &mut self.gate_w,
            &mut self.gate_b,
            &mut self.body_w,
            &mut self.body_b,
            &mut self.out_w,
            &mut self.out_b,
        ] {
            f(p);
        }
    }
}

/// High-order SS2D. `levels[0]` is the outermost (order `n`) level; the
/// recursion bottoms out in a single Local-SS2D.
#[derive(Clone, Debug, PartialEq)]
pub struct HSs2d {
    pub config: HSs2dConfig,
    pub levels: Vec<GateLevel>,
    pub base: LocalSs2d,
}

impl HSs2d {
    pub fn init<R: Rng + ?Sized>(prefix: &str, config: HSs2dConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let levels = (2..=config.order)
            .rev()
            .map(|o| GateLevel::init(&format!("{prefix}.o{o}"), c, rng))
            .collect();
        let base = LocalSs2d::init(&format!("{prefix}.o1"), c, config.local_kernel, config.state_dim, rng)?;
        Ok(Self { config, levels, base })
    }

    pub fn order(&self) -> usize {
        self.levels.len() + 1
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.forward_level(g, x, 0)
    }

    fn forward_level(&self, g: &mut Graph, x: Var, level: usize) -> Result<Var> {
        let Some(lv) = self.levels.get(level) else {
            return self.base.forward(g, x);
        };
        let gate = GateLevel::project(g, x, &lv.gate_w, &lv.gate_b);
        let body = GateLevel::project(g, x, &lv.body_w, &lv.body_b);
        let inner = self.forward_level(g, body, level + 1)?;
        let mixed = g.mul(inner, gate);
        Ok(GateLevel::project(g, mixed, &lv.out_w, &lv.out_b))
    }
}

impl Parameterized for HSs2d {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.levels.iter().for_each(|l| l.visit_params(f));
        self.base.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.levels.iter_mut().for_each(|l| l.visit_params_mut(f));
        self.base.visit_params_mut(f);
    }
}

/// High-order SS2D on an `H x W x C` map.
pub fn h_ss2d(x: ArrayView3<'_, f64>, cfg: &HSs2dConfig, params: &HSs2d) -> Result<Array3<f64>> {
    h_ss2d_with_hooks(x, cfg, params, ForwardHooks::default())
}

pub fn h_ss2d_with_hooks(
    x: ArrayView3<'_, f64>,
    cfg: &HSs2dConfig,
    params: &HSs2d,
    hooks: ForwardHooks,
) -> Result<Array3<f64>> {
    if !(1..=MAX_ORDER).contains(&cfg.order) {
        return Err(Error::OrderOutOfRange(cfg.order));
    }
    let (h, w, c) = x.dim();
    if h == 0 || w == 0 {
        return Err(Error::EmptyInput);
    }
    if cfg.order != params.order() || cfg.channels != c || params.base.channels() != c {
        return Err(Error::shape("config does not match input or parameters"));
    }
    let g = &mut Graph::inference().with_hooks(hooks);
    let xv = g.constant(hwc_to_nchw(x));
    let y = params.forward(g, xv)?;
    Ok(nchw_to_hwc(g.value(y)))
}
