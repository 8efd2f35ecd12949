//! Selective state-space recurrence over one sequence.
//!
//! Per step `t`, with input row `x_t` of width `C`:
//!
//! ```text
//! delta_t = softplus(w_delta . x_t + b_delta)        (scalar)
//! B_t     = W_B x_t,  C_t = W_C x_t                  (length N)
//! Abar_t  = exp(delta_t * A),  A = -exp(A_log)
//! h_t     = Abar_t * h_{t-1} + delta_t * B_t * x_t   (C x N, h_0 = 0)
//! y_t     = h_t C_t                                  (length C)
//! ```

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

use super::DirectionalSequence;
use crate::autograd::ops::{sigmoid, softplus};
use crate::autograd::{Param, Parameterized, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct S6Params {
    /// `[N]`
    pub a_log: Param,
    /// `[C]`
    pub delta_weight: Param,
    /// `[1]`
    pub delta_bias: Param,
    /// `[N, C]`
    pub b_weight: Param,
    /// `[N, C]`
    pub c_weight: Param,
}

/// Saved forward state for [`S6Params::backward`].
#[derive(Clone, Debug)]
pub struct S6Trace {
    len: usize,
    channels: usize,
    state: usize,
    x: Vec<f64>,
    pre: Vec<f64>,
    delta: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    a_bar: Vec<f64>,
    /// `h_t` for t = 1..=L, laid out `[t][c][n]`.
    h: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct S6Grads {
    pub x: Array2<f64>,
    pub a_log: Array1<f64>,
    pub delta_weight: Array1<f64>,
    pub delta_bias: f64,
    pub b_weight: Array2<f64>,
    pub c_weight: Array2<f64>,
}

fn vec1(p: &Param) -> &[f64] {
    p.value.as_slice().expect("parameters are contiguous")
}

impl S6Params {
    /// `A_log = ln(1..=N)`, projections uniform in `±1/sqrt(C)`, and a step
    /// bias giving an initial `delta` log-uniform in `[1e-3, 1e-1]`.
    pub fn init<R: Rng + ?Sized>(prefix: &str, channels: usize, state_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        let a_log = Tensor::from_shape_fn(ndarray::IxDyn(&[state_dim]), |i| ((i[0] + 1) as f64).ln());
        let dt = (rng.gen_range(1e-3f64.ln()..1e-1f64.ln())).exp();
        let inv_softplus = dt + (-(-dt).exp_m1()).ln();
        Self {
            a_log: Param::new(format!("{prefix}.a_log"), a_log),
            delta_weight: Param::uniform(format!("{prefix}.delta_w"), &[channels], bound, rng),
            delta_bias: Param::filled(format!("{prefix}.delta_b"), &[1], inv_softplus),
            b_weight: Param::uniform(format!("{prefix}.b_w"), &[state_dim, channels], bound, rng),
            c_weight: Param::uniform(format!("{prefix}.c_w"), &[state_dim, channels], bound, rng),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.value.len()
    }

    pub fn channels(&self) -> usize {
        self.delta_weight.value.len()
    }

    /// Effective (negative) decay rates.
    pub fn a(&self) -> Array1<f64> {
        vec1(&self.a_log).iter().map(|v| -v.exp()).collect()
    }

    fn check(&self) -> Result<()> {
        let (n, c) = (self.state_dim(), self.channels());
        if n == 0 {
            return Err(Error::shape("state_dim must be at least 1"));
        }
        if self.delta_bias.value.len() != 1
            || self.b_weight.value.shape() != [n, c]
            || self.c_weight.value.shape() != [n, c]
        {
            return Err(Error::shape("inconsistent S6 projection shapes"));
        }
        Ok(())
    }

    /// Runs the recurrence over `x` (`L x C`).
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, S6Trace)> {
        self.check()?;
        let (len, ch) = x.dim();
        if ch != self.channels() {
            return Err(Error::shape(format!(
                "sequence has {ch} channels, projections expect {}",
                self.channels()
            )));
        }
        if len == 0 {
            return Err(Error::EmptyInput);
        }
        let n = self.state_dim();
        let xs: Vec<f64> = x.iter().copied().collect();
        let wd = vec1(&self.delta_weight);
        let bd = vec1(&self.delta_bias)[0];
        let wb = vec1(&self.b_weight);
        let wc = vec1(&self.c_weight);
        let a = self.a();

        let mut trace = S6Trace {
            len,
            channels: ch,
            state: n,
            pre: vec![0.0; len],
            delta: vec![0.0; len],
            b: vec![0.0; len * n],
            c: vec![0.0; len * n],
            a_bar: vec![0.0; len * n],
            h: vec![0.0; len * ch * n],
            x: xs,
        };
        let mut y = vec![0.0; len * ch];
        for t in 0..len {
            let xt = &trace.x[t * ch..(t + 1) * ch];
            let pre = bd + wd.iter().zip(xt).map(|(w, v)| w * v).sum::<f64>();
            let delta = softplus(pre);
            trace.pre[t] = pre;
            trace.delta[t] = delta;
            for k in 0..n {
                let row_b = &wb[k * ch..(k + 1) * ch];
                let row_c = &wc[k * ch..(k + 1) * ch];
                trace.b[t * n + k] = row_b.iter().zip(xt).map(|(w, v)| w * v).sum();
                trace.c[t * n + k] = row_c.iter().zip(xt).map(|(w, v)| w * v).sum();
                trace.a_bar[t * n + k] = (delta * a[k]).exp();
            }
            let (done, rest) = trace.h.split_at_mut(t * ch * n);
            let prev = (t > 0).then(|| &done[(t - 1) * ch * n..]);
            let cur = &mut rest[..ch * n];
            for c in 0..ch {
                let mut acc = 0.0;
                for k in 0..n {
                    let carry = prev.map_or(0.0, |p| p[c * n + k]);
                    let hv = trace.a_bar[t * n + k] * carry + delta * trace.b[t * n + k] * xt[c];
                    cur[c * n + k] = hv;
                    acc += trace.c[t * n + k] * hv;
                }
                y[t * ch + c] = acc;
            }
        }
        let y = Array2::from_shape_vec((len, ch), y).unwrap();
        Ok((y, trace))
    }

    /// Gradients of `sum(dy * y)` with respect to the input and every
    /// parameter.
    pub fn backward(&self, trace: &S6Trace, dy: ArrayView2<'_, f64>) -> S6Grads {
        let (len, ch, n) = (trace.len, trace.channels, trace.state);
        assert_eq!(dy.dim(), (len, ch));
        let dys: Vec<f64> = dy.iter().copied().collect();
        let wd = vec1(&self.delta_weight);
        let wb = vec1(&self.b_weight);
        let wc = vec1(&self.c_weight);
        let a = self.a();

        let mut dx = vec![0.0; len * ch];
        let mut da = vec![0.0; n];
        let mut dwd = vec![0.0; ch];
        let mut dbd = 0.0;
        let mut dwb = vec![0.0; n * ch];
        let mut dwc = vec![0.0; n * ch];
        let mut carry = vec![0.0; ch * n];
        let mut dh = vec![0.0; ch * n];
        let mut db_t = vec![0.0; n];
        let mut dc_t = vec![0.0; n];
        let mut dabar = vec![0.0; n];

        for t in (0..len).rev() {
            let xt = &trace.x[t * ch..(t + 1) * ch];
            let dyt = &dys[t * ch..(t + 1) * ch];
            let ht = &trace.h[t * ch * n..(t + 1) * ch * n];
            let hprev = (t > 0).then(|| &trace.h[(t - 1) * ch * n..t * ch * n]);
            let delta = trace.delta[t];
            let bt = &trace.b[t * n..(t + 1) * n];
            let ct = &trace.c[t * n..(t + 1) * n];
            let abar = &trace.a_bar[t * n..(t + 1) * n];

            dc_t.iter_mut().for_each(|v| *v = 0.0);
            db_t.iter_mut().for_each(|v| *v = 0.0);
            dabar.iter_mut().for_each(|v| *v = 0.0);
            let mut ddelta = 0.0;
            for c in 0..ch {
                let mut dxc = 0.0;
                for k in 0..n {
                    let i = c * n + k;
                    dc_t[k] += dyt[c] * ht[i];
                    let g = dyt[c] * ct[k] + carry[i];
                    dh[i] = g;
                    if let Some(hp) = hprev {
                        dabar[k] += g * hp[i];
                    }
                    ddelta += g * bt[k] * xt[c];
                    db_t[k] += g * delta * xt[c];
                    dxc += g * delta * bt[k];
                }
                dx[t * ch + c] += dxc;
            }
            for k in 0..n {
                ddelta += dabar[k] * abar[k] * a[k];
                da[k] += dabar[k] * abar[k] * delta;
            }
            let dpre = ddelta * sigmoid(trace.pre[t]);
            dbd += dpre;
            for c in 0..ch {
                dwd[c] += dpre * xt[c];
                let mut dxc = dpre * wd[c];
                for k in 0..n {
                    dwb[k * ch + c] += db_t[k] * xt[c];
                    dwc[k * ch + c] += dc_t[k] * xt[c];
                    dxc += wb[k * ch + c] * db_t[k] + wc[k * ch + c] * dc_t[k];
                }
                dx[t * ch + c] += dxc;
            }
            for c in 0..ch {
                for k in 0..n {
                    carry[c * n + k] = abar[k] * dh[c * n + k];
                }
            }
        }

        let a_log_grad = da.iter().zip(a.iter()).map(|(d, av)| d * av).collect();
        S6Grads {
            x: Array2::from_shape_vec((len, ch), dx).unwrap(),
            a_log: a_log_grad,
            delta_weight: Array1::from(dwd),
            delta_bias: dbd,
            b_weight: Array2::from_shape_vec((n, ch), dwb).unwrap(),
            c_weight: Array2::from_shape_vec((n, ch), dwc).unwrap(),
        }
    }
}

impl S6Grads {
    /// Parameter gradients as tensors shaped like the parameters, in
    /// [`Parameterized::visit_params`] order.
    pub fn param_tensors(&self) -> [Tensor; 5] {
        [
            self.a_log.clone().into_dyn(),
            self.delta_weight.clone().into_dyn(),
            Array1::from(vec![self.delta_bias]).into_dyn(),
            self.b_weight.clone().into_dyn(),
            self.c_weight.clone().into_dyn(),
        ]
    }
}

impl Parameterized for S6Params {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.a_log);
        f(&self.delta_weight);
        f(&self.delta_bias);
        f(&self.b_weight);
        f(&self.c_weight);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.a_log);
        f(&mut self.delta_weight);
        f(&mut self.delta_bias);
        f(&mut self.b_weight);
        f(&mut self.c_weight);
    }
}

/// Applies the recurrence to one directional sequence.
pub fn s6_apply(seq: &DirectionalSequence, params: &S6Params) -> Result<DirectionalSequence> {
    let (y, _) = params.forward(seq.values.view())?;
    Ok(DirectionalSequence {
        values: y,
        direction: seq.direction,
        origin_shape: seq.origin_shape,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selective_scan::ScanDirection;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_params(a_log: f64, wd: f64, bd: f64, wb: f64, wc: f64) -> S6Params {
        let t = |name: &str, v: f64, shape: &[usize]| Param::filled(name, shape, v);
        S6Params {
            a_log: t("a", a_log, &[1]),
            delta_weight: t("wd", wd, &[1]),
            delta_bias: t("bd", bd, &[1]),
            b_weight: t("wb", wb, &[1, 1]),
            c_weight: t("wc", wc, &[1, 1]),
        }
    }

    #[test]
    fn zero_readout_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = S6Params::init("s", 3, 4, &mut rng);
        p.c_weight.value.fill(0.0);
        let x = Array2::from_shape_fn((7, 3), |(t, c)| (t as f64 - 2.0) * 0.3 + c as f64);
        let (y, _) = p.forward(x.view()).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn length_one_scalar_by_hand() {
        // x = 2, w_delta = 0.5, b_delta = -0.25: pre = 0.75, delta = ln(1 + e^0.75)
        // B = 1.5 * 2 = 3, C = -0.5 * 2 = -1; h_1 = delta * 3 * 2; y = -h_1
        let p = scalar_params(0.3, 0.5, -0.25, 1.5, -0.5);
        let seq = DirectionalSequence::new(array![[2.0]], ScanDirection::RowMajor, (1, 1)).unwrap();
        let out = s6_apply(&seq, &p).unwrap();
        let delta = (1.0 + 0.75f64.exp()).ln();
        let expected = -(delta * 3.0 * 2.0);
        assert!((out.values[[0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = S6Params::init("s", 3, 2, &mut rng);
        let x = Array2::zeros((4, 2));
        assert!(matches!(p.forward(x.view()), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn decay_is_contractive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = S6Params::init("s", 2, 6, &mut rng);
        let x = Array2::from_shape_fn((20, 2), |(t, c)| ((t * 3 + c) as f64).sin() * 4.0);
        let (_, trace) = p.forward(x.view()).unwrap();
        assert!(trace.a_bar.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(trace.delta.iter().all(|&d| d > 0.0));
    }
}
