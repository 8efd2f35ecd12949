use ndarray::{Array3, Array4, Ix4, IxDyn};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Target value for pixels that carry no supervision.
pub const UNSUPERVISED: u8 = u8::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct LossSpec {
    pub ce_weight: f64,
    pub dice_weight: f64,
    /// One weight per output channel.
    pub class_weights: Vec<f64>,
    /// Channels that enter the soft-Dice mean.
    pub dice_channels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub cross_entropy: f64,
    /// Mean soft Dice over channels with ground-truth support, `None` when no
    /// Dice channel has support.
    pub mean_soft_dice: Option<f64>,
}

pub(crate) fn softmax(logits: &Array4<f64>) -> Array4<f64> {
    let mut p = logits.clone();
    let (n, c, h, w) = p.dim();
    for b in 0..n {
        for r in 0..h {
            for q in 0..w {
                let m = (0..c).map(|k| p[[b, k, r, q]]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..c {
                    let e = (p[[b, k, r, q]] - m).exp();
                    p[[b, k, r, q]] = e;
                    z += e;
                }
                for k in 0..c {
                    p[[b, k, r, q]] /= z;
                }
            }
        }
    }
    p
}

/// Value and logit gradient of
/// `ce_w * CE_weighted + dice_w * (1 - mean soft Dice)`.
///
/// The cross-entropy is normalized by the summed weights of supervised
/// pixels. Soft Dice for channel `c` is `2 sum(p_c y_c) / (sum p_c + sum y_c)`
/// over supervised pixels, averaged over Dice channels present in `target`.
pub fn loss_and_grad(
    logits: &Array4<f64>,
    target: &Array3<u8>,
    spec: &LossSpec,
) -> Result<(LossParts, Array4<f64>)> {
    let (n, c, h, w) = logits.dim();
    if target.dim() != (n, h, w) {
        return Err(Error::shape(format!(
            "target {:?} vs logits {:?}",
            target.dim(),
            logits.dim()
        )));
    }
    if spec.class_weights.len() != c {
        return Err(Error::shape(format!(
            "{} class weights for {c} channels",
            spec.class_weights.len()
        )));
    }
    if let Some(&bad) = target.iter().find(|&&t| t != UNSUPERVISED && t as usize >= c) {
        return Err(Error::shape(format!("target channel {bad} >= {c}")));
    }
    let p = softmax(logits);
    let mut wsum = 0.0;
    let mut ce = 0.0;
    let mut inter = vec![0.0; c];
    let mut psum = vec![0.0; c];
    let mut gsum = vec![0.0; c];
    for ((b, r, q), &t) in target.indexed_iter() {
        if t == UNSUPERVISED {
            continue;
        }
        let t = t as usize;
        let wt = spec.class_weights[t];
        wsum += wt;
        ce -= wt * p[[b, t, r, q]].max(f64::MIN_POSITIVE).ln();
        for k in 0..c {
            psum[k] += p[[b, k, r, q]];
        }
        inter[t] += p[[b, t, r, q]];
        gsum[t] += 1.0;
    }
    if wsum == 0.0 {
        return Err(Error::NoSupervision);
    }
    ce /= wsum;
    let active: Vec<usize> = spec.dice_channels.iter().copied().filter(|&k| gsum[k] > 0.0).collect();
    let dice = |k: usize| 2.0 * inter[k] / (psum[k] + gsum[k]);
    let mean_dice = (!active.is_empty()).then(|| active.iter().map(|&k| dice(k)).sum::<f64>() / active.len() as f64);
    let total = spec.ce_weight * ce + spec.dice_weight * mean_dice.map_or(0.0, |d| 1.0 - d);

    // dL/dp for the Dice term, then the softmax Jacobian; CE folds in directly.
    let mut grad = Array4::zeros((n, c, h, w));
    let dice_scale = if active.is_empty() {
        0.0
    } else {
        -spec.dice_weight / active.len() as f64
    };
    let mut gp = vec![0.0; c];
    for ((b, r, q), &t) in target.indexed_iter() {
        if t == UNSUPERVISED {
            continue;
        }
        let t = t as usize;
        gp.iter_mut().for_each(|v| *v = 0.0);
        for &k in &active {
            let den = psum[k] + gsum[k];
            let y = (k == t) as u8 as f64;
            gp[k] = dice_scale * 2.0 * (y * den - inter[k]) / (den * den);
        }
        let dot: f64 = (0..c).map(|k| gp[k] * p[[b, k, r, q]]).sum();
        let cw = spec.ce_weight * spec.class_weights[t] / wsum;
        for k in 0..c {
            let pk = p[[b, k, r, q]];
            let ce_g = cw * (pk - (k == t) as u8 as f64);
            grad[[b, k, r, q]] = pk * (gp[k] - dot) + ce_g;
        }
    }
    Ok((
        LossParts {
            total,
            cross_entropy: ce,
            mean_soft_dice: mean_dice,
        },
        grad,
    ))
}

/// Records the loss on the tape as a scalar node.
pub fn loss_op(g: &mut Graph, logits: Var, target: &Array3<u8>, spec: &LossSpec) -> Result<(Var, LossParts)> {
    let l = g
        .value(logits)
        .clone()
        .into_dimensionality::<Ix4>()
        .map_err(|e| Error::shape(e.to_string()))?;
    let (parts, grad) = loss_and_grad(&l, target, spec)?;
    let grad: Tensor = grad.into_dyn();
    let v = g.custom(
        &[logits],
        Tensor::from_elem(IxDyn(&[]), parts.total),
        Box::new(move |ctx| {
            let s = ctx.grad.iter().next().copied().unwrap_or(0.0);
            vec![Some(&grad * s)]
        }),
    );
    Ok((v, parts))
}
