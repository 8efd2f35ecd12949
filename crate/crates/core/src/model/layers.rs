use rand::Rng;

use crate::autograd::{Graph, Param, Parameterized, Var};
use crate::error::{Error, Result};
use crate::selective_scan::{HSs2d, HSs2dConfig};

/// Same-padded convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Param,
    pub bias: Param,
    pub groups: usize,
}

impl Conv {
    pub fn init<R: Rng + ?Sized>(
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Param::uniform(format!("{prefix}.w"), &[c_out, c_in, kernel, kernel], bound, rng),
            bias: Param::zeros(format!("{prefix}.b"), &[c_out]),
            groups: 1,
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.value.shape()[1] * self.groups
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let c = g.shape(x)[1];
        if c != self.c_in() {
            return Err(Error::shape(format!(
                "{} expects {} channels, got {c}",
                self.weight.name,
                self.c_in()
            )));
        }
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        Ok(g.conv2d(x, w, Some(b), self.groups))
    }
}

impl Parameterized for Conv {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNorm {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            gamma: Param::filled(format!("{prefix}.gamma"), &[channels], 1.0),
            beta: Param::zeros(format!("{prefix}.beta"), &[channels]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.shape(x)[1] != self.gamma.value.len() {
            return Err(Error::shape(format!("{} channel mismatch", self.gamma.name)));
        }
        let gm = g.param(&self.gamma);
        let bt = g.param(&self.beta);
        Ok(g.layer_norm_channels(x, gm, bt))
    }
}

impl Parameterized for LayerNorm {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Group normalization with `gcd(4, C)` groups.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm {
    pub gamma: Param,
    pub beta: Param,
    pub groups: usize,
}

pub const NORM_GROUPS: usize = 4;

impl GroupNorm {
    pub fn new(prefix: &str, channels: usize) -> Self {
        let gcd = |mut a: usize, mut b: usize| {
            while b != 0 {
                (a, b) = (b, a % b);
            }
            a
        };
        Self {
            gamma: Param::filled(format!("{prefix}.gamma"), &[channels], 1.0),
            beta: Param::zeros(format!("{prefix}.beta"), &[channels]),
            groups: gcd(NORM_GROUPS, channels),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.shape(x)[1] != self.gamma.value.len() {
            return Err(Error::shape(format!("{} channel mismatch", self.gamma.name)));
        }
        let gm = g.param(&self.gamma);
        let bt = g.param(&self.beta);
        Ok(g.group_norm(x, gm, bt, self.groups))
    }
}

impl Parameterized for GroupNorm {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Pixel-wise two-layer perceptron with a GELU between layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Conv,
    pub fc2: Conv,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(prefix: &str, channels: usize, ratio: usize, rng: &mut R) -> Self {
        let hidden = channels * ratio;
        Self {
            fc1: Conv::init(&format!("{prefix}.fc1"), channels, hidden, 1, rng),
            fc2: Conv::init(&format!("{prefix}.fc2"), hidden, channels, 1, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

impl Parameterized for Mlp {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.fc1.visit_params_mut(f);
        self.fc2.visit_params_mut(f);
    }
}

/// `y = HS(LN(x)) + x`, `out = MLP(LN(y)) + y`.
#[derive(Clone, Debug, PartialEq)]
pub struct HVssBlock {
    pub norm1: LayerNorm,
    pub hss: HSs2d,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl HVssBlock {
    pub fn init<R: Rng + ?Sized>(
        prefix: &str,
        hss: HSs2dConfig,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let c = hss.channels;
        Ok(Self {
            norm1: LayerNorm::new(&format!("{prefix}.ln1"), c),
            hss: HSs2d::init(&format!("{prefix}.hss"), hss, rng)?,
            norm2: LayerNorm::new(&format!("{prefix}.ln2"), c),
            mlp: Mlp::init(&format!("{prefix}.mlp"), c, mlp_ratio, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.hss.config.channels
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let c = g.shape(x)[1];
        if c != self.channels() {
            return Err(Error::shape(format!(
                "H-VSS block has {} channels, input has {c}",
                self.channels()
            )));
        }
        let n1 = self.norm1.forward(g, x)?;
        let hs = self.hss.forward(g, n1)?;
        let y = g.add(hs, x);
        let n2 = self.norm2.forward(g, y)?;
        let m = self.mlp.forward(g, n2)?;
        Ok(g.add(m, y))
    }

    /// Zeroes the last projection of both residual branches, which makes the
    /// block the identity map.
    pub fn zero_branch_outputs(&mut self) {
        let zero = |p: &mut Param| p.value.fill(0.0);
        match self.hss.levels.first_mut() {
            Some(top) => {
                zero(&mut top.out_w);
                zero(&mut top.out_b);
            }
            None => {
                // order 1: both halves of the local mix end in their own map
                zero(&mut self.hss.base.conv_weight);
                zero(&mut self.hss.base.conv_bias);
                for s in &mut self.hss.base.scan.scans {
                    zero(&mut s.c_weight);
                }
            }
        }
        zero(&mut self.mlp.fc2.weight);
        zero(&mut self.mlp.fc2.bias);
    }
}

impl Parameterized for HVssBlock {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.norm1.visit_params(f);
        self.hss.visit_params(f);
        self.norm2.visit_params(f);
        self.mlp.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.norm1.visit_params_mut(f);
        self.hss.visit_params_mut(f);
        self.norm2.visit_params_mut(f);
        self.mlp.visit_params_mut(f);
    }
}
