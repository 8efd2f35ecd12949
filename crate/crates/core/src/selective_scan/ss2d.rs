use ndarray::{Array2, IxDyn};
use rand::Rng;

use super::{scan_order, S6Params, S6Trace, ScanDirection};
use crate::autograd::{Graph, Param, Parameterized, Tensor, Var};
use crate::error::{Error, Result};

/// Four independent S6 blocks, one per scan direction, merged by averaging.
#[derive(Clone, Debug, PartialEq)]
pub struct Ss2d {
    pub scans: [S6Params; 4],
}

impl Ss2d {
    pub fn init<R: Rng + ?Sized>(prefix: &str, channels: usize, state_dim: usize, rng: &mut R) -> Self {
        let scans = ScanDirection::ALL
            .map(|d| S6Params::init(&format!("{prefix}.{}", d.name()), channels, state_dim, rng));
        Self { scans }
    }

    pub fn channels(&self) -> usize {
        self.scans[0].channels()
    }

    /// Taped SS2D over an `(N, C, H, W)` tensor.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(format!("ss2d expects 4-d input, got {shape:?}")));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if c != self.channels() {
            return Err(Error::shape(format!(
                "ss2d has {} channels, input has {c}",
                self.channels()
            )));
        }
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::EmptyInput);
        }
        if g.hooks.s6_passthrough {
            return Ok(x);
        }

        let hw = h * w;
        let orders: Vec<Vec<usize>> = ScanDirection::ALL
            .iter()
            .map(|&d| scan_order(d, h, w))
            .collect();
        let keep = g.grad_enabled();
        let xs = g.value(x).as_standard_layout().into_owned();
        let xs = xs.as_slice().unwrap();

        let mut out = vec![0.0; n * c * hw];
        let mut traces: Vec<S6Trace> = Vec::new();
        let mut seq = Array2::<f64>::zeros((hw, c));
        for b in 0..n {
            let plane = &xs[b * c * hw..(b + 1) * c * hw];
            let mut maps = [vec![0.0; c * hw], vec![0.0; c * hw], vec![0.0; c * hw], vec![0.0; c * hw]];
            for (dir, order) in orders.iter().enumerate() {
                for (t, &p) in order.iter().enumerate() {
                    for ch in 0..c {
                        seq[[t, ch]] = plane[ch * hw + p];
                    }
                }
                let (y, trace) = self.scans[dir].forward(seq.view())?;
                for (t, &p) in order.iter().enumerate() {
                    for ch in 0..c {
                        maps[dir][ch * hw + p] = y[[t, ch]];
                    }
                }
                if keep {
                    traces.push(trace);
                }
            }
            let dst = &mut out[b * c * hw..(b + 1) * c * hw];
            for (i, o) in dst.iter_mut().enumerate() {
                *o = ((maps[0][i] + maps[1][i]) + (maps[2][i] + maps[3][i])) * 0.25;
            }
        }
        let value = Tensor::from_shape_vec(IxDyn(&shape), out).unwrap();

        let mut inputs = vec![x];
        for s in &self.scans {
            s.visit_params(&mut |p: &Param| inputs.push(g.param(p)));
        }
        let scans = self.scans.clone();
        Ok(g.custom(
            &inputs,
            value,
            Box::new(move |ctx| {
                let dy = ctx.grad.as_standard_layout().into_owned();
                let dy = dy.as_slice().unwrap();
                let mut dx = vec![0.0; n * c * hw];
                let mut pgrads: Vec<[Tensor; 5]> = scans
                    .iter()
                    .map(|s| {
                        let mut z = Vec::new();
                        s.visit_params(&mut |p| z.push(Tensor::zeros(p.value.raw_dim())));
                        z.try_into().unwrap()
                    })
                    .collect();
                let mut dseq = Array2::<f64>::zeros((hw, c));
                for b in 0..n {
                    let gplane = &dy[b * c * hw..(b + 1) * c * hw];
                    for (dir, order) in orders.iter().enumerate() {
                        for (t, &p) in order.iter().enumerate() {
                            for ch in 0..c {
                                dseq[[t, ch]] = 0.25 * gplane[ch * hw + p];
                            }
                        }
                        let grads = scans[dir].backward(&traces[b * 4 + dir], dseq.view());
                        let dplane = &mut dx[b * c * hw..(b + 1) * c * hw];
                        for (t, &p) in order.iter().enumerate() {
                            for ch in 0..c {
                                dplane[ch * hw + p] += grads.x[[t, ch]];
                            }
                        }
                        for (acc, gt) in pgrads[dir].iter_mut().zip(grads.param_tensors()) {
                            *acc += &gt.into_shape_with_order(acc.raw_dim()).unwrap();
                        }
                    }
                }
                let mut res = vec![Some(Tensor::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap())];
                for pg in pgrads {
                    res.extend(pg.into_iter().map(Some));
                }
                res
            }),
        ))
    }
}

impl Parameterized for Ss2d {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.scans.iter().for_each(|s| s.visit_params(f));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.scans.iter_mut().for_each(|s| s.visit_params_mut(f));
    }
}
