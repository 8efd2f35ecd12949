use ndarray::{Axis, IxDyn, Slice};

use super::{Graph, Tensor, Var};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Sums `grad` down to `shape` over axes where `shape` has extent 1.
pub(crate) fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut g = grad.clone();
    for (axis, (&target, &have)) in shape.iter().zip(grad.shape()).enumerate() {
        if target == 1 && have != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        self.custom(
            &[a, b],
            value,
            Box::new(move |ctx| {
                vec![
                    ctx.needs[0].then(|| reduce_to(ctx.grad, &sa)),
                    ctx.needs[1].then(|| reduce_to(ctx.grad, &sb)),
                ]
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        self.custom(
            &[a, b],
            value,
            Box::new(move |ctx| {
                vec![
                    ctx.needs[0].then(|| reduce_to(ctx.grad, &sa)),
                    ctx.needs[1].then(|| -reduce_to(ctx.grad, &sb)),
                ]
            }),
        )
    }

    /// Elementwise product; `b` may broadcast against `a` along unit axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        self.custom(
            &[a, b],
            value,
            Box::new(move |ctx| {
                let (x, y) = (ctx.inputs[0], ctx.inputs[1]);
                vec![
                    ctx.needs[0].then(|| reduce_to(&(ctx.grad * y), &sa)),
                    ctx.needs[1].then(|| reduce_to(&(ctx.grad * x), &sb)),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.custom(&[a], value, Box::new(move |ctx| vec![Some(ctx.grad * k)]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let shape = self.shape(a).to_vec();
        self.custom(
            &[a],
            Tensor::from_elem(IxDyn(&[]), s),
            Box::new(move |ctx| {
                let g = ctx.grad.iter().next().copied().unwrap_or(0.0);
                vec![Some(Tensor::from_elem(IxDyn(&shape), g))]
            }),
        )
    }

    /// Sum of `a * weights` for a fixed weight array.
    pub fn weighted_sum(&mut self, a: Var, weights: &Tensor) -> Var {
        let w = weights.clone();
        let s = (self.value(a) * &w).sum();
        self.custom(
            &[a],
            Tensor::from_elem(IxDyn(&[]), s),
            Box::new(move |ctx| {
                let g = ctx.grad.iter().next().copied().unwrap_or(0.0);
                vec![Some(&w * g)]
            }),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.custom(
            &[a],
            value,
            Box::new(|ctx| {
                let mut g = ctx.inputs[0].mapv(gelu_grad);
                g *= ctx.grad;
                vec![Some(g)]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.custom(
            &[a],
            value,
            Box::new(|ctx| {
                let mut g = ctx.output.mapv(|s| s * (1.0 - s));
                g *= ctx.grad;
                vec![Some(g)]
            }),
        )
    }

    /// Channels `[start, start + len)` of an `(N, C, ...)` tensor.
    pub fn narrow_channels(&mut self, a: Var, start: usize, len: usize) -> Var {
        let full = self.shape(a).to_vec();
        let value = self
            .value(a)
            .slice_axis(Axis(1), Slice::from(start..start + len))
            .to_owned();
        self.custom(
            &[a],
            value,
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(IxDyn(&full));
                g.slice_axis_mut(Axis(1), Slice::from(start..start + len))
                    .assign(ctx.grad);
                vec![Some(g)]
            }),
        )
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat shapes agree");
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
        self.custom(
            parts,
            value,
            Box::new(move |ctx| {
                let mut start = 0;
                widths
                    .iter()
                    .zip(&ctx.needs)
                    .map(|(&w, &need)| {
                        let s = start;
                        start += w;
                        need.then(|| {
                            ctx.grad
                                .slice_axis(Axis(1), Slice::from(s..s + w))
                                .to_owned()
                        })
                    })
                    .collect()
            }),
        )
    }
}
