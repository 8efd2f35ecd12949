use ndarray::{Array3, ArrayView3, Axis};
use rand::Rng;

use super::{HSs2dConfig, Ss2d};
use crate::autograd::{ForwardHooks, Graph, Param, Parameterized, Tensor, Var};
use crate::error::{Error, Result};

/// Half the channels through a depthwise convolution, half through SS2D.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalSs2d {
    /// `(C/2, 1, k, k)`
    pub conv_weight: Param,
    /// `(C/2)`
    pub conv_bias: Param,
    pub scan: Ss2d,
}

impl LocalSs2d {
    pub fn init<R: Rng + ?Sized>(
        prefix: &str,
        channels: usize,
        kernel: usize,
        state_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels % 2 != 0 {
            return Err(Error::OddChannelSplit(channels));
        }
        if kernel % 2 == 0 {
            return Err(Error::ConfigInvalid(format!("local kernel {kernel} must be odd")));
        }
        let half = channels / 2;
        let bound = 1.0 / ((kernel * kernel) as f64).sqrt();
        Ok(Self {
            conv_weight: Param::uniform(format!("{prefix}.dw.w"), &[half, 1, kernel, kernel], bound, rng),
            conv_bias: Param::zeros(format!("{prefix}.dw.b"), &[half]),
            scan: Ss2d::init(&format!("{prefix}.ss2d"), half, state_dim, rng),
        })
    }

    pub fn channels(&self) -> usize {
        2 * self.conv_bias.value.len()
    }

    pub fn kernel(&self) -> usize {
        self.conv_weight.value.shape()[2]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let c = g.shape(x)[1];
        if c % 2 != 0 {
            return Err(Error::OddChannelSplit(c));
        }
        if c != self.channels() {
            return Err(Error::shape(format!(
                "local-ss2d built for {} channels, input has {c}",
                self.channels()
            )));
        }
        let half = c / 2;
        let local = g.narrow_channels(x, 0, half);
        let global = g.narrow_channels(x, half, half);
        let w = g.param(&self.conv_weight);
        let b = g.param(&self.conv_bias);
        let local = g.conv2d(local, w, Some(b), half);
        let global = self.scan.forward(g, global)?;
        Ok(g.concat_channels(&[local, global]))
    }
}

impl Parameterized for LocalSs2d {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.conv_weight);
        f(&self.conv_bias);
        self.scan.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.conv_weight);
        f(&mut self.conv_bias);
        self.scan.visit_params_mut(f);
    }
}

pub(crate) fn hwc_to_nchw(x: ArrayView3<'_, f64>) -> Tensor {
    x.permuted_axes([2, 0, 1])
        .insert_axis(Axis(0))
        .as_standard_layout()
        .into_owned()
        .into_dyn()
}

pub(crate) fn nchw_to_hwc(t: &Tensor) -> Array3<f64> {
    let t = t.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    t.index_axis(Axis(0), 0)
        .permuted_axes([1, 2, 0])
        .as_standard_layout()
        .into_owned()
}

/// Local-SS2D on an `H x W x C` map.
pub fn local_ss2d(x: ArrayView3<'_, f64>, cfg: &HSs2dConfig, params: &LocalSs2d) -> Result<Array3<f64>> {
    local_ss2d_with_hooks(x, cfg, params, ForwardHooks::default())
}

pub fn local_ss2d_with_hooks(
    x: ArrayView3<'_, f64>,
    cfg: &HSs2dConfig,
    params: &LocalSs2d,
    hooks: ForwardHooks,
) -> Result<Array3<f64>> {
    let g = &mut Graph::inference().with_hooks(hooks);
    let (h, w, c) = x.dim();
    if h == 0 || w == 0 {
        return Err(Error::EmptyInput);
    }
    if c % 2 != 0 {
        return Err(Error::OddChannelSplit(c));
    }
    if cfg.channels != c || params.kernel() != cfg.local_kernel {
        return Err(Error::shape("config does not match input or parameters"));
    }
    let xv = g.constant(hwc_to_nchw(x));
    let y = params.forward(g, xv)?;
    Ok(nchw_to_hwc(g.value(y)))
}
