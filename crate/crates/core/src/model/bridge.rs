//! Skip-connection fusion: spatial attention with one convolution shared by
//! every scale, then channel attention driven by pooled descriptors of all
//! scales at once.

use rand::Rng;

use super::layers::Conv;
use crate::autograd::{Graph, Param, Parameterized, Var};
use crate::error::{Error, Result};

pub const SKIP_COUNT: usize = 6;
const SAB_KERNEL: usize = 7;

fn check_count(n: usize) -> Result<()> {
    if n != SKIP_COUNT {
        return Err(Error::SkipSetInvalid(n));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sab {
    pub conv: Conv,
}

impl Sab {
    pub fn init<R: Rng + ?Sized>(prefix: &str, rng: &mut R) -> Self {
        Self {
            conv: Conv::init(&format!("{prefix}.conv"), 2, 1, SAB_KERNEL, rng),
        }
    }

    /// `(N, 1, H, W)` field in `(0, 1)`.
    pub fn attention(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mean = g.channel_mean(x);
        let max = g.channel_max(x);
        let stats = g.concat_channels(&[mean, max]);
        let logits = self.conv.forward(g, stats)?;
        Ok(g.sigmoid(logits))
    }

    pub fn forward(&self, g: &mut Graph, skips: &[Var]) -> Result<Vec<Var>> {
        check_count(skips.len())?;
        if g.hooks.unit_attention {
            return Ok(skips.to_vec());
        }
        skips
            .iter()
            .map(|&x| {
                let att = self.attention(g, x)?;
                Ok(g.mul(x, att))
            })
            .collect()
    }
}

impl Parameterized for Sab {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.conv.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_params_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cab {
    /// One `(sum C) -> C_i` projection per scale.
    pub heads: Vec<Conv>,
}

impl Cab {
    pub fn init<R: Rng + ?Sized>(prefix: &str, channels: &[usize], rng: &mut R) -> Self {
        let total: usize = channels.iter().sum();
        Self {
            heads: channels
                .iter()
                .enumerate()
                .map(|(i, &c)| Conv::init(&format!("{prefix}.head{}", i + 1), total, c, 1, rng))
                .collect(),
        }
    }

    /// One `(N, C_i, 1, 1)` vector in `(0, 1)` per scale.
    pub fn attention(&self, g: &mut Graph, skips: &[Var]) -> Result<Vec<Var>> {
        check_count(skips.len())?;
        let pooled: Vec<Var> = skips.iter().map(|&x| g.global_avg_pool(x)).collect();
        let all = g.concat_channels(&pooled);
        self.heads
            .iter()
            .map(|head| {
                let logits = head.forward(g, all)?;
                Ok(g.sigmoid(logits))
            })
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, skips: &[Var]) -> Result<Vec<Var>> {
        check_count(skips.len())?;
        if g.hooks.unit_attention {
            return Ok(skips.to_vec());
        }
        let atts = self.attention(g, skips)?;
        Ok(skips
            .iter()
            .zip(atts)
            .map(|(&x, att)| g.mul(x, att))
            .collect())
    }
}

impl Parameterized for Cab {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.heads.iter().for_each(|h| h.visit_params(f));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.heads.iter_mut().for_each(|h| h.visit_params_mut(f));
    }
}
