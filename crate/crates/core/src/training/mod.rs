//! Loss, Adam, the training loop and resumable checkpoints.
//!
//! With four output channels, channel `k` predicts label `k + 1` (benign, G3,
//! G4, G5) and background pixels are unsupervised; at inference background
//! is assigned by the tissue saturation rule. With five channels, channel
//! `k` is label `k` and background is learned like any other class.

mod loss;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Parameterized, Tensor};
use crate::checkpoint::{canonical_json, decode_f64s, decode_tensors, encode_f64s, encode_tensors, Container};
use crate::data::{is_tissue_pixel, ImagePatch, RgbImage, SegmentationMask, BACKGROUND, BENIGN, G5, IGNORE};
use crate::error::{Error, Result};
use crate::model::{FeatureMap, Model};

pub use loss::{loss_and_grad, loss_op, LossParts, LossSpec, UNSUPERVISED};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

fn default_lr() -> f64 {
    1e-3
}

fn default_batch() -> usize {
    8
}

fn default_steps() -> usize {
    200
}

fn default_loss_weights() -> (f64, f64) {
    (1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub max_steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// `(ce_weight, dice_weight)`.
    #[serde(default = "default_loss_weights")]
    pub loss_weights: (f64, f64),
    /// Per output channel; inverse training frequency when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            max_steps: default_steps(),
            seed: 0,
            loss_weights: default_loss_weights(),
            class_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("train.learning_rate must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if self.max_steps == 0 {
            return bad("train.max_steps must be positive");
        }
        let (ce, dice) = self.loss_weights;
        if !(ce.is_finite() && dice.is_finite()) || ce < 0.0 || dice < 0.0 || ce + dice == 0.0 {
            return bad("train.loss_weights must be non-negative and not both zero");
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return bad("train.class_weights must be positive");
            }
        }
        Ok(())
    }
}

fn check_classes(num_classes: usize) -> Result<()> {
    if num_classes == 4 || num_classes == 5 {
        Ok(())
    } else {
        Err(Error::ConfigInvalid(format!(
            "num_classes must be 4 (tissue classes) or 5 (with background), got {num_classes}"
        )))
    }
}

/// Output channel trained on `label`, if any.
pub fn channel_of(label: u8, num_classes: usize) -> Option<u8> {
    match (label, num_classes) {
        (IGNORE, _) => None,
        (BACKGROUND, 4) => None,
        (l, 4) => Some(l - 1),
        (l, _) => Some(l),
    }
}

pub fn label_of(channel: usize, num_classes: usize) -> u8 {
    if num_classes == 4 {
        channel as u8 + 1
    } else {
        channel as u8
    }
}

/// Channels whose labels are tissue classes.
pub fn tissue_channels(num_classes: usize) -> Vec<usize> {
    (BENIGN..=G5).filter_map(|l| channel_of(l, num_classes)).map(usize::from).collect()
}

/// `(N, 3, H, W)` in `[0, 1]`.
pub fn images_to_batch(images: &[&RgbImage]) -> Result<FeatureMap> {
    let first = images.first().ok_or(Error::EmptyInput)?;
    let (h, w, _) = first.dim();
    if let Some(bad) = images.iter().find(|i| i.dim() != (h, w, 3)) {
        return Err(Error::shape(format!("batch image {:?} vs {:?}", bad.dim(), first.dim())));
    }
    let mut x = Array4::zeros((images.len(), 3, h, w));
    for (b, img) in images.iter().enumerate() {
        for ((r, c, k), &v) in img.indexed_iter() {
            x[[b, k, r, c]] = v as f64 / 255.0;
        }
    }
    FeatureMap::new(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Array4<f64>,
    /// Output channel per pixel, [`UNSUPERVISED`] where there is none.
    pub targets: Array3<u8>,
}

impl Dataset {
    pub fn new(inputs: Array4<f64>, targets: Array3<u8>) -> Result<Self> {
        let (n, _, h, w) = inputs.dim();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        if targets.dim() != (n, h, w) {
            return Err(Error::shape(format!("targets {:?} vs inputs {:?}", targets.dim(), inputs.dim())));
        }
        Ok(Self { inputs, targets })
    }

    pub fn from_patches(patches: &[ImagePatch], num_classes: usize) -> Result<Self> {
        check_classes(num_classes)?;
        let imgs: Vec<&RgbImage> = patches.iter().map(|p| &p.pixels).collect();
        let x = images_to_batch(&imgs)?;
        let (n, _, h, w) = x.dims();
        let mut t = Array3::from_elem((n, h, w), UNSUPERVISED);
        for (b, p) in patches.iter().enumerate() {
            if p.mask.dim() != (h, w) {
                return Err(Error::shape(format!("patch {} mask {:?}", p.stem(), p.mask.dim())));
            }
            for ((r, c), &l) in p.mask.labels().indexed_iter() {
                t[[b, r, c]] = channel_of(l, num_classes).unwrap_or(UNSUPERVISED);
            }
        }
        Self::new(x.0, t)
    }

    pub fn len(&self) -> usize {
        self.inputs.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> (Array4<f64>, Array3<u8>) {
        (self.inputs.select(Axis(0), idx), self.targets.select(Axis(0), idx))
    }
}

/// Inverse pixel frequency per channel, scaled so present channels average
/// 1; channels never seen get 1.
pub fn inverse_frequency_weights(targets: &Array3<u8>, num_channels: usize) -> Vec<f64> {
    let mut counts = vec![0u64; num_channels];
    for &t in targets.iter() {
        if (t as usize) < num_channels {
            counts[t as usize] += 1;
        }
    }
    let inv: Vec<Option<f64>> = counts.iter().map(|&n| (n > 0).then(|| 1.0 / n as f64)).collect();
    let present: Vec<f64> = inv.iter().flatten().copied().collect();
    if present.is_empty() {
        return vec![1.0; num_channels];
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    inv.iter().map(|v| v.map_or(1.0, |v| v / mean)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        let mut m = BTreeMap::new();
        model.visit_params(&mut |p| {
            m.insert(p.name.clone(), Tensor::zeros(p.value.raw_dim()));
        });
        Self {
            t: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params_mut(&mut |p| {
            let Some(g) = grads.get(&p.name) else { return };
            let m = ms.get_mut(&p.name).expect("moment per parameter");
            let v = vs.get_mut(&p.name).expect("moment per parameter");
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                });
        });
    }
}

pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    pub step: usize,
    pub history: Vec<f64>,
    pub class_weights: Vec<f64>,
}

impl TrainState {
    pub fn new(model: Model, config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        check_classes(model.config.num_classes)?;
        let c = model.config.num_classes;
        let class_weights = match &config.class_weights {
            Some(w) if w.len() == c => w.clone(),
            Some(w) => {
                return Err(Error::ConfigInvalid(format!(
                    "{} class weights for {c} output channels",
                    w.len()
                )))
            }
            None => inverse_frequency_weights(&dataset.targets, c),
        };
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            optimizer: Adam::new(&model),
            config,
            model,
            step: 0,
            history: Vec::new(),
            class_weights,
        })
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            ce_weight: self.config.loss_weights.0,
            dice_weight: self.config.loss_weights.1,
            class_weights: self.class_weights.clone(),
            dice_channels: tissue_channels(self.model.config.num_classes),
        }
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        if self.config.batch_size >= n {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut self.rng, n, self.config.batch_size).into_vec()
        }
    }
}

/// Loss value and parameter gradients on one batch.
pub fn loss_and_param_grads(
    model: &Model,
    x: Array4<f64>,
    t: &Array3<u8>,
    spec: &LossSpec,
) -> Result<(LossParts, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let xv = g.constant(x.into_dyn());
    let out = model.forward_graph(&mut g, xv)?;
    let (l, parts) = loss_op(&mut g, out.logits, t, spec)?;
    let grads = g.backward(l);
    let map = grads
        .params()
        .filter_map(|(n, t)| t.map(|t| (n.to_string(), t.clone())))
        .collect();
    Ok((parts, map))
}

/// One optimizer step. Errors with [`Error::Divergence`] carrying the
/// 0-based step index when the loss or a gradient is not finite.
pub fn train_step(state: &mut TrainState, data: &Dataset) -> Result<f64> {
    let idx = state.next_batch(data.len());
    let (x, t) = data.select(&idx);
    let spec = state.loss_spec();
    let (parts, grads) = loss_and_param_grads(&state.model, x, &t, &spec)?;
    let step = state.step;
    if !parts.total.is_finite() || grads.values().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Divergence { step });
    }
    state.optimizer.step(&mut state.model, &grads, state.config.learning_rate);
    state.step += 1;
    state.history.push(parts.total);
    Ok(parts.total)
}

pub fn train_steps(state: &mut TrainState, data: &Dataset, k: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    for _ in 0..k {
        train_step(state, data)?;
    }
    Ok(())
}

/// Trains until `config.max_steps`.
pub fn fit(model: Model, data: &Dataset, config: &TrainConfig) -> Result<TrainState> {
    let mut state = TrainState::new(model, config.clone(), data)?;
    train_steps(&mut state, data, config.max_steps)?;
    Ok(state)
}

/// Mean soft Dice over tissue channels with support, on the whole dataset.
pub fn mean_soft_dice(model: &Model, data: &Dataset, batch: usize) -> Result<f64> {
    let c = model.config.num_classes;
    let channels = tissue_channels(c);
    let mut inter = vec![0.0; c];
    let mut psum = vec![0.0; c];
    let mut gsum = vec![0.0; c];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, t) = data.select(chunk);
        let p = loss::softmax(&model.forward(&FeatureMap::new(x)?)?.0);
        for ((b, r, q), &y) in t.indexed_iter() {
            if y == UNSUPERVISED {
                continue;
            }
            for k in 0..c {
                psum[k] += p[[b, k, r, q]];
            }
            inter[y as usize] += p[[b, y as usize, r, q]];
            gsum[y as usize] += 1.0;
        }
    }
    let active: Vec<usize> = channels.into_iter().filter(|&k| gsum[k] > 0.0).collect();
    if active.is_empty() {
        return Err(Error::NoSupport);
    }
    Ok(active.iter().map(|&k| 2.0 * inter[k] / (psum[k] + gsum[k])).sum::<f64>() / active.len() as f64)
}

/// Arg-max label maps. With four output channels, pixels failing the tissue
/// saturation test are labelled background.
pub fn predict_masks(model: &Model, images: &[&RgbImage]) -> Result<Vec<SegmentationMask>> {
    let c = model.config.num_classes;
    check_classes(c)?;
    let logits = model.forward(&images_to_batch(images)?)?.0;
    let (n, _, h, w) = logits.dim();
    (0..n)
        .map(|b| {
            let img = images[b];
            let labels = Array2::from_shape_fn((h, w), |(r, q)| {
                if c == 4 && !is_tissue_pixel([img[[r, q, 0]], img[[r, q, 1]], img[[r, q, 2]]]) {
                    return BACKGROUND;
                }
                let col = logits.slice(s![b, .., r, q]);
                let mut best = 0;
                for k in 1..c {
                    if col[k] > col[best] {
                        best = k;
                    }
                }
                label_of(best, c)
            });
            SegmentationMask::new(labels)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainHeader {
    config: TrainConfig,
    class_weights: Vec<f64>,
    step: usize,
    adam_t: u64,
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let mut c = state.model.to_container()?;
    let mut opt: Vec<(String, &Tensor)> = Vec::new();
    for (n, t) in &state.optimizer.m {
        opt.push((format!("m:{n}"), t));
    }
    for (n, t) in &state.optimizer.v {
        opt.push((format!("v:{n}"), t));
    }
    c.push(b"OPTM", encode_tensors(opt.iter().map(|(n, t)| (n.as_str(), *t))));
    let mut rng = state.rng.get_seed().to_vec();
    rng.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    rng.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    c.push(b"RNGS", rng);
    c.push(b"HIST", encode_f64s(&state.history));
    let header = TrainHeader {
        config: state.config.clone(),
        class_weights: state.class_weights.clone(),
        step: state.step,
        adam_t: state.optimizer.t,
    };
    c.push(b"TCFG", canonical_json(&header)?.into_bytes());
    Ok(c.encode())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let corrupt = |m: String| Error::CorruptCheckpoint(m);
    let c = Container::decode(bytes)?;
    let model = Model::from_container(&c)?;
    let header: TrainHeader =
        serde_json::from_slice(c.require(b"TCFG")?).map_err(|e| corrupt(format!("train header: {e}")))?;
    let mut adam = Adam::new(&model);
    adam.t = header.adam_t;
    let mut seen = 0;
    for (name, t) in decode_tensors(c.require(b"OPTM")?)? {
        let (kind, pname) = name.split_once(':').ok_or_else(|| corrupt(format!("bad moment name {name}")))?;
        let slot = match kind {
            "m" => adam.m.get_mut(pname),
            "v" => adam.v.get_mut(pname),
            _ => None,
        }
        .ok_or_else(|| corrupt(format!("unknown moment {name}")))?;
        if slot.shape() != t.shape() {
            return Err(corrupt(format!("moment {name} has wrong shape")));
        }
        *slot = t;
        seen += 1;
    }
    if seen != adam.m.len() * 2 {
        return Err(corrupt("optimizer moments incomplete".into()));
    }
    let rng_bytes = c.require(b"RNGS")?;
    if rng_bytes.len() != 32 + 8 + 16 {
        return Err(corrupt("rng section has wrong length".into()));
    }
    let mut rng = ChaCha8Rng::from_seed(rng_bytes[..32].try_into().unwrap());
    rng.set_stream(u64::from_le_bytes(rng_bytes[32..40].try_into().unwrap()));
    rng.set_word_pos(u128::from_le_bytes(rng_bytes[40..56].try_into().unwrap()));
    let history = decode_f64s(c.require(b"HIST")?)?;
    if history.len() != header.step {
        return Err(corrupt("loss history length differs from step".into()));
    }
    Ok(TrainState {
        config: header.config,
        model,
        optimizer: adam,
        rng,
        step: header.step,
        history,
        class_weights: header.class_weights,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    crate::checkpoint::write_atomic(path, &encode_checkpoint(state)?)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// `step,loss` lines with a header.
pub fn history_csv(history: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, v) in history.iter().enumerate() {
        s.push_str(&format!("{},{v:?}\n", i + 1));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_mapping() {
        assert_eq!(channel_of(BACKGROUND, 4), None);
        assert_eq!(channel_of(BENIGN, 4), Some(0));
        assert_eq!(channel_of(G5, 4), Some(3));
        assert_eq!(channel_of(BACKGROUND, 5), Some(0));
        assert_eq!(channel_of(IGNORE, 5), None);
        for c in 0..4 {
            assert_eq!(channel_of(label_of(c, 4), 4), Some(c as u8));
        }
        assert_eq!(tissue_channels(4), vec![0, 1, 2, 3]);
        assert_eq!(tissue_channels(5), vec![1, 2, 3, 4]);
    }

    #[test]
    fn weights_average_one() {
        let t = Array3::from_shape_vec((1, 1, 4), vec![0, 0, 0, 2]).unwrap();
        let w = inverse_frequency_weights(&t, 4);
        assert_eq!(w[1], 1.0);
        assert_eq!(w[3], 1.0);
        assert!((w[0] + w[2] - 2.0).abs() < 1e-15);
        assert!((w[2] / w[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn config_rules() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.loss_weights = (0.0, 0.0);
        assert!(c.validate().is_err());
        c.loss_weights = (-1.0, 1.0);
        assert!(c.validate().is_err());
    }
}
