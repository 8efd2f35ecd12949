//! Image-shaped ops over `(N, C, H, W)` tensors.

use ndarray::IxDyn;

use super::{Graph, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

fn dims4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected a 4-d tensor, got {s:?}");
    [s[0], s[1], s[2], s[3]]
}

fn contiguous(t: &Tensor) -> std::borrow::Cow<'_, [f64]> {
    match t.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(t.iter().copied().collect()),
    }
}

fn tensor4(shape: [usize; 4], data: Vec<f64>) -> Tensor {
    Tensor::from_shape_vec(IxDyn(&shape), data).unwrap()
}

struct ConvGeom {
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    k: usize,
    groups: usize,
}

impl ConvGeom {
    fn cig(&self) -> usize {
        self.ci / self.groups
    }

    fn cog(&self) -> usize {
        self.co / self.groups
    }

    /// Visits every (input offset, output offset, weight index, run length)
    /// row segment of a same-padded stride-1 convolution.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (h, w, k) = (self.h as isize, self.w as isize, self.k);
        let pad = (k / 2) as isize;
        let (cig, cog) = (self.cig(), self.cog());
        for b in 0..self.n {
            for o in 0..self.co {
                let grp = o / cog;
                let out_base = (b * self.co + o) * self.h * self.w;
                for cl in 0..cig {
                    let c = grp * cig + cl;
                    let in_base = (b * self.ci + c) * self.h * self.w;
                    for kh in 0..k {
                        let dy = kh as isize - pad;
                        let oh_lo = (-dy).max(0);
                        let oh_hi = (h - dy).min(h);
                        for kw in 0..k {
                            let dx = kw as isize - pad;
                            let ow_lo = (-dx).max(0);
                            let ow_hi = (w - dx).min(w);
                            if ow_hi <= ow_lo {
                                continue;
                            }
                            let widx = ((o * cig + cl) * k + kh) * k + kw;
                            let run = (ow_hi - ow_lo) as usize;
                            for oh in oh_lo..oh_hi {
                                let ih = oh + dy;
                                let out_off = out_base + (oh * w + ow_lo) as usize;
                                let in_off = in_base + (ih * w + ow_lo + dx) as usize;
                                f(in_off, out_off, widx, run);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// Same-padded, stride-1 2-d convolution. `weight` is
    /// `(C_out, C_in / groups, k, k)` with odd `k`; `bias` is `(C_out)`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, groups: usize) -> Var {
        let [n, ci, h, w] = dims4(self.value(x));
        let ws = self.shape(weight).to_vec();
        assert_eq!(ws.len(), 4);
        let (co, cig, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(ws[3], k, "square kernels only");
        assert!(k % 2 == 1, "odd kernels only");
        assert!(groups >= 1 && ci % groups == 0 && co % groups == 0);
        assert_eq!(cig, ci / groups, "weight/input channel mismatch");
        let geom = ConvGeom {
            n,
            ci,
            co,
            h,
            w,
            k,
            groups,
        };

        let xs = contiguous(self.value(x));
        let wt = contiguous(self.value(weight));
        let mut out = vec![0.0; n * co * h * w];
        geom.for_each_row(|i, o, widx, run| {
            let wv = wt[widx];
            let dst = &mut out[o..o + run];
            let src = &xs[i..i + run];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wv * s;
            }
        });
        if let Some(b) = bias {
            let bv = contiguous(self.value(b));
            assert_eq!(bv.len(), co);
            for (plane, chunk) in out.chunks_mut(h * w).enumerate() {
                let bo = bv[plane % co];
                chunk.iter_mut().for_each(|v| *v += bo);
            }
        }
        drop(xs);
        drop(wt);

        let mut inputs = vec![x, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.custom(
            &inputs,
            tensor4([n, co, h, w], out),
            Box::new(move |ctx| {
                let dy = contiguous(ctx.grad);
                let xs = contiguous(ctx.inputs[0]);
                let wt = contiguous(ctx.inputs[1]);
                let mut dx = ctx.needs[0].then(|| vec![0.0; n * ci * h * w]);
                let mut dw = ctx.needs[1].then(|| vec![0.0; wt.len()]);
                geom.for_each_row(|i, o, widx, run| {
                    let g = &dy[o..o + run];
                    if let Some(dx) = dx.as_mut() {
                        let wv = wt[widx];
                        for (d, gv) in dx[i..i + run].iter_mut().zip(g) {
                            *d += wv * gv;
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        let s: f64 = g.iter().zip(&xs[i..i + run]).map(|(a, b)| a * b).sum();
                        dw[widx] += s;
                    }
                });
                let mut res = vec![
                    dx.map(|d| tensor4([n, ci, h, w], d)),
                    dw.map(|d| tensor4([co, cig, k, k], d)),
                ];
                if ctx.inputs.len() == 3 {
                    res.push(ctx.needs[2].then(|| {
                        let mut db = vec![0.0; co];
                        for (plane, chunk) in dy.chunks(h * w).enumerate() {
                            db[plane % co] += chunk.iter().sum::<f64>();
                        }
                        Tensor::from_shape_vec(IxDyn(&[co]), db).unwrap()
                    }));
                }
                res
            }),
        )
    }

    /// 2x2 max pooling with stride 2. Ties go to the first element in raster
    /// order.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let [n, c, h, w] = dims4(self.value(x));
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even dims");
        let (oh, ow) = (h / 2, w / 2);
        let xs = contiguous(self.value(x));
        let mut out = vec![0.0; n * c * oh * ow];
        let mut arg = vec![0usize; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for r in 0..oh {
                for q in 0..ow {
                    let mut best = base + 2 * r * w + 2 * q;
                    for (dr, dq) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * r + dr) * w + 2 * q + dq;
                        if xs[idx] > xs[best] {
                            best = idx;
                        }
                    }
                    let o = plane * oh * ow + r * ow + q;
                    out[o] = xs[best];
                    arg[o] = best;
                }
            }
        }
        drop(xs);
        self.custom(
            &[x],
            tensor4([n, c, oh, ow], out),
            Box::new(move |ctx| {
                let dy = contiguous(ctx.grad);
                let mut dx = vec![0.0; n * c * h * w];
                for (o, &src) in arg.iter().enumerate() {
                    dx[src] += dy[o];
                }
                vec![Some(tensor4([n, c, h, w], dx))]
            }),
        )
    }

    /// Bilinear x2 upsampling with half-pixel centres and edge clamping.
    pub fn upsample_bilinear2(&mut self, x: Var) -> Var {
        let [n, c, h, w] = dims4(self.value(x));
        let (oh, ow) = (2 * h, 2 * w);
        let rows = bilinear_taps(h, oh);
        let cols = bilinear_taps(w, ow);
        let xs = contiguous(self.value(x));
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xs[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for (r, &(r0, r1, lr)) in rows.iter().enumerate() {
                for (q, &(c0, c1, lc)) in cols.iter().enumerate() {
                    let top = src[r0 * w + c0] * (1.0 - lc) + src[r0 * w + c1] * lc;
                    let bot = src[r1 * w + c0] * (1.0 - lc) + src[r1 * w + c1] * lc;
                    dst[r * ow + q] = top * (1.0 - lr) + bot * lr;
                }
            }
        }
        drop(xs);
        self.custom(
            &[x],
            tensor4([n, c, oh, ow], out),
            Box::new(move |ctx| {
                let dy = contiguous(ctx.grad);
                let mut dx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    let g = &dy[plane * oh * ow..(plane + 1) * oh * ow];
                    let d = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for (r, &(r0, r1, lr)) in rows.iter().enumerate() {
                        for (q, &(c0, c1, lc)) in cols.iter().enumerate() {
                            let v = g[r * ow + q];
                            d[r0 * w + c0] += v * (1.0 - lr) * (1.0 - lc);
                            d[r0 * w + c1] += v * (1.0 - lr) * lc;
                            d[r1 * w + c0] += v * lr * (1.0 - lc);
                            d[r1 * w + c1] += v * lr * lc;
                        }
                    }
                }
                vec![Some(tensor4([n, c, h, w], dx))]
            }),
        )
    }

    /// Layer normalisation across channels at every pixel, with per-channel
    /// affine `gamma`, `beta`.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let [n, c, h, w] = dims4(self.value(x));
        let hw = h * w;
        let xs = contiguous(self.value(x));
        let gm = contiguous(self.value(gamma)).into_owned();
        let bt = contiguous(self.value(beta)).into_owned();
        assert_eq!(gm.len(), c);
        assert_eq!(bt.len(), c);
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; n * hw];
        let mut out = vec![0.0; xs.len()];
        for b in 0..n {
            for p in 0..hw {
                let at = |ch: usize| (b * c + ch) * hw + p;
                let mean = (0..c).map(|ch| xs[at(ch)]).sum::<f64>() / c as f64;
                let var = (0..c).map(|ch| (xs[at(ch)] - mean).powi(2)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + LN_EPS).sqrt();
                inv_std[b * hw + p] = is;
                for ch in 0..c {
                    let xh = (xs[at(ch)] - mean) * is;
                    xhat[at(ch)] = xh;
                    out[at(ch)] = gm[ch] * xh + bt[ch];
                }
            }
        }
        drop(xs);
        self.custom(
            &[x, gamma, beta],
            tensor4([n, c, h, w], out),
            Box::new(move |ctx| {
                let dy = contiguous(ctx.grad);
                let mut dx = vec![0.0; dy.len()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for b in 0..n {
                    for p in 0..hw {
                        let at = |ch: usize| (b * c + ch) * hw + p;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for ch in 0..c {
                            let g = dy[at(ch)];
                            dg[ch] += g * xhat[at(ch)];
                            db[ch] += g;
                            let dxh = g * gm[ch];
                            sum_d += dxh;
                            sum_dx += dxh * xhat[at(ch)];
                        }
                        let is = inv_std[b * hw + p];
                        for ch in 0..c {
                            let dxh = dy[at(ch)] * gm[ch];
                            dx[at(ch)] = is / c as f64
                                * (c as f64 * dxh - sum_d - xhat[at(ch)] * sum_dx);
                        }
                    }
                }
                vec![
                    ctx.needs[0].then(|| tensor4([n, c, h, w], dx)),
                    ctx.needs[1].then(|| Tensor::from_shape_vec(IxDyn(&[c]), dg).unwrap()),
                    ctx.needs[2].then(|| Tensor::from_shape_vec(IxDyn(&[c]), db).unwrap()),
                ]
            }),
        )
    }

    /// Normalizes each sample over `(C / groups, H, W)` blocks, then applies
    /// a per-channel affine map.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let [n, c, h, w] = dims4(self.value(x));
        assert!(groups > 0 && c % groups == 0, "{c} channels in {groups} groups");
        let block = c / groups * h * w;
        let xs = contiguous(self.value(x));
        let gm = contiguous(self.value(gamma)).into_owned();
        let bt = contiguous(self.value(beta)).into_owned();
        assert_eq!(gm.len(), c);
        assert_eq!(bt.len(), c);
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; n * groups];
        let mut out = vec![0.0; xs.len()];
        // channels of one group are contiguous in NCHW
        for b in 0..n {
            for gi in 0..groups {
                let base = (b * groups + gi) * block;
                let vals = &xs[base..base + block];
                let mean = vals.iter().sum::<f64>() / block as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / block as f64;
                let is = 1.0 / (var + LN_EPS).sqrt();
                inv_std[b * groups + gi] = is;
                for (j, v) in vals.iter().enumerate() {
                    let at = base + j;
                    let ch = (at / (h * w)) % c;
                    let xh = (v - mean) * is;
                    xhat[at] = xh;
                    out[at] = gm[ch] * xh + bt[ch];
                }
            }
        }
        drop(xs);
        self.custom(
            &[x, gamma, beta],
            tensor4([n, c, h, w], out),
            Box::new(move |ctx| {
                let dy = contiguous(ctx.grad);
                let mut dx = vec![0.0; dy.len()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                let chan = |at: usize| (at / (h * w)) % c;
                for b in 0..n {
                    for gi in 0..groups {
                        let base = (b * groups + gi) * block;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for at in base..base + block {
                            let ch = chan(at);
                            dg[ch] += dy[at] * xhat[at];
                            db[ch] += dy[at];
                            let dxh = dy[at] * gm[ch];
                            sum_d += dxh;
                            sum_dx += dxh * xhat[at];
                        }
                        let is = inv_std[b * groups + gi];
                        let m = block as f64;
                        for at in base..base + block {
                            let dxh = dy[at] * gm[chan(at)];
                            dx[at] = is / m * (m * dxh - sum_d - xhat[at] * sum_dx);
                        }
                    }
                }
                vec![
                    ctx.needs[0].then(|| tensor4([n, c, h, w], dx)),
                    ctx.needs[1].then(|| Tensor::from_shape_vec(IxDyn(&[c]), dg).unwrap()),
                    ctx.needs[2].then(|| Tensor::from_shape_vec(IxDyn(&[c]), db).unwrap()),
                ]
            }),
        )
    }

    /// Mean over channels: `(N, C, H, W) -> (N, 1, H, W)`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let [n, c, h, w] = dims4(self.value(x));
        let hw = h * w;
        let xs = contiguous(self.value(x));
        let mut out = vec![0.0; n * hw];
        for b in 0..n {
            for ch in 0..c {
                let src = &xs[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for (o, s) in out[b * hw..(b + 1) * hw].iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= c as f64);
        drop(xs);
        self.custom(
            &[x],
            tensor4([n, 1, h, w], out),
            Box::new(move |ctx| {
                let dy = contiguous(ctx.grad);
                let mut dx = vec![0.0; n * c * hw];
                for b in 0..n {
                    for ch in 0..c {
                        let dst = &mut dx[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                        for (d, g) in dst.iter_mut().zip(&dy[b * hw..(b + 1) * hw]) {
                            *d = g / c as f64;
                        }
                    }
                }
                vec![Some(tensor4([n, c, h, w], dx))]
            }),
        )
    }

    /// Max over channels: `(N, C, H, W) -> (N, 1, H, W)`; ties to the lowest
    /// channel.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let [n, c, h, w] = dims4(self.value(x));
        let hw = h * w;
        let xs = contiguous(self.value(x));
        let mut out = vec![f64::NEG_INFINITY; n * hw];
        let mut arg = vec![0usize; n * hw];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    let v = xs[(b * c + ch) * hw + p];
                    if v > out[b * hw + p] {
                        out[b * hw + p] = v;
                        arg[b * hw + p] = (b * c + ch) * hw + p;
                    }
                }
            }
        }
        drop(xs);
        self.custom(
            &[x],
            tensor4([n, 1, h, w], out),
            Box::new(move |ctx| {
                let dy = contiguous(ctx.grad);
                let mut dx = vec![0.0; n * c * hw];
                for (o, &src) in arg.iter().enumerate() {
                    dx[src] += dy[o];
                }
                vec![Some(tensor4([n, c, h, w], dx))]
            }),
        )
    }

    /// Spatial mean: `(N, C, H, W) -> (N, C, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let [n, c, h, w] = dims4(self.value(x));
        let hw = h * w;
        let xs = contiguous(self.value(x));
        let out: Vec<f64> = xs
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        drop(xs);
        self.custom(
            &[x],
            tensor4([n, c, 1, 1], out),
            Box::new(move |ctx| {
                let dy = contiguous(ctx.grad);
                let mut dx = Vec::with_capacity(n * c * hw);
                for g in dy.iter() {
                    dx.extend(std::iter::repeat_n(g / hw as f64, hw));
                }
                vec![Some(tensor4([n, c, h, w], dx))]
            }),
        )
    }
}

/// `(lo, hi, weight_of_hi)` per output index for half-pixel x2 resampling.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(shape: [usize; 4], f: impl Fn(usize) -> f64) -> Tensor {
        let n = shape.iter().product();
        tensor4(shape, (0..n).map(f).collect())
    }

    #[test]
    fn identity_kernel_convolution_is_identity() {
        let mut g = Graph::inference();
        let x = g.constant(t4([1, 2, 3, 4], |i| i as f64 * 0.5 - 1.0));
        let mut wv = Tensor::zeros(IxDyn(&[2, 1, 3, 3]));
        wv[[0, 0, 1, 1]] = 1.0;
        wv[[1, 0, 1, 1]] = 1.0;
        let w = g.constant(wv);
        let y = g.conv2d(x, w, None, 2);
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_matches_direct_sum_at_border() {
        let x = t4([1, 1, 3, 3], |i| (i + 1) as f64);
        let mut g = Graph::inference();
        let xv = g.constant(x);
        let w = g.constant(Tensor::from_elem(IxDyn(&[1, 1, 3, 3]), 1.0));
        let y = g.conv2d(xv, w, None, 1);
        // corner (0,0): 1 + 2 + 4 + 5
        assert_eq!(g.value(y)[[0, 0, 0, 0]], 12.0);
        assert_eq!(g.value(y)[[0, 0, 1, 1]], 45.0);
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::from_elem(IxDyn(&[1, 1, 3, 2]), 7.0));
        let y = g.upsample_bilinear2(x);
        assert_eq!(g.shape(y), &[1, 1, 6, 4]);
        assert!(g.value(y).iter().all(|&v| (v - 7.0).abs() < 1e-12));
    }

    #[test]
    fn group_norm_standardizes_each_group() {
        let mut g = Graph::inference();
        let x = g.constant(t4([2, 4, 3, 3], |i| ((i * 37) % 11) as f64 * 0.7 + (i / 18) as f64));
        let gm = g.constant(Tensor::from_elem(IxDyn(&[4]), 1.0));
        let bt = g.constant(Tensor::zeros(IxDyn(&[4])));
        let y = g.group_norm(x, gm, bt, 2);
        let ys = g.value(y).as_slice().unwrap().to_vec();
        for block in ys.chunks(18) {
            let mean = block.iter().sum::<f64>() / 18.0;
            let var = block.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn max_pool_picks_largest() {
        let mut g = Graph::inference();
        let x = g.constant(t4([1, 1, 2, 4], |i| [1., 5., 0., 2., 3., 4., 9., 1.][i]));
        let y = g.max_pool2(x);
        assert_eq!(g.value(y).iter().copied().collect::<Vec<_>>(), vec![5.0, 9.0]);
    }
}
