//! Six-stage U-shaped network. Stages 1-2 are convolution blocks, stages 3-6
//! are H-VSS blocks of orders 2-5; skips pass through SAB then CAB before the
//! decoder adds them back in.

mod bridge;
mod layers;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use bridge::{Cab, Sab, SKIP_COUNT};
pub use layers::{Conv, GroupNorm, HVssBlock, LayerNorm, Mlp, NORM_GROUPS};

use crate::autograd::{ForwardHooks, Graph, Param, Parameterized, Tensor, Var};
use crate::checkpoint::{canonical_json, decode_tensors, encode_tensors, Container};
use crate::error::{Error, Result};
use crate::selective_scan::HSs2dConfig;

pub const STAGES: usize = 6;
/// Five 2x poolings separate the six stages.
pub const SPATIAL_MULTIPLE: usize = 32;

fn default_state_dim() -> usize {
    8
}

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stage_channels: Vec<usize>,
    pub stage_orders: BTreeMap<String, usize>,
    pub conv_kernel: usize,
    pub num_classes: usize,
    pub input_channels: usize,
    #[serde(default = "default_state_dim")]
    pub state_dim: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![8, 16, 32, 64, 128, 256],
            stage_orders: (3..=STAGES)
                .map(|s| (format!("stage{s}"), s - 1))
                .collect(),
            conv_kernel: 3,
            num_classes: 4,
            input_channels: 3,
            state_dim: default_state_dim(),
            mlp_ratio: default_mlp_ratio(),
        }
    }
}

impl ModelConfig {
    /// Small channel widths used for desk-scale tests.
    pub fn reduced() -> Self {
        Self {
            stage_channels: vec![4, 8, 8, 8, 16, 16],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.stage_channels.len() != STAGES {
            return bad(format!(
                "stage_channels must have length {STAGES}, got {}",
                self.stage_channels.len()
            ));
        }
        if self.stage_channels.contains(&0) {
            return bad("stage_channels must be strictly positive".into());
        }
        for (i, &c) in self.stage_channels.iter().enumerate().skip(2) {
            if c % 2 != 0 {
                return bad(format!("stage{} channels ({c}) must be even", i + 1));
            }
        }
        let expected: BTreeSet<String> = (3..=STAGES).map(|s| format!("stage{s}")).collect();
        let got: BTreeSet<String> = self.stage_orders.keys().cloned().collect();
        if got != expected {
            return bad(format!("stage_orders must cover exactly {expected:?}, got {got:?}"));
        }
        for s in 3..=STAGES {
            let order = self.stage_orders[&format!("stage{s}")];
            if order != s - 1 {
                return bad(format!("stage{s} must have order {}, got {order}", s - 1));
            }
        }
        if self.conv_kernel % 2 == 0 || self.conv_kernel == 0 {
            return bad(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.input_channels == 0 {
            return bad("input_channels must be positive".into());
        }
        if self.state_dim == 0 {
            return bad("state_dim must be positive".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// Scan order of 1-based `stage`, `None` for the convolution stages.
    pub fn order_of(&self, stage: usize) -> Option<usize> {
        self.stage_orders.get(&format!("stage{stage}")).copied()
    }

    fn hss(&self, stage: usize) -> HSs2dConfig {
        HSs2dConfig {
            local_kernel: self.conv_kernel,
            state_dim: self.state_dim,
            ..HSs2dConfig::new(
                self.order_of(stage).expect("validated"),
                self.stage_channels[stage - 1],
            )
        }
    }
}

/// `(N, C, H, W)` activations.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(pub Array4<f64>);

impl FeatureMap {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.shape().contains(&0) {
            return Err(Error::EmptyInput);
        }
        Ok(Self(data))
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let a = t
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|e| Error::shape(e.to_string()))?;
        Self::new(a)
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.0.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn tensor(&self) -> Tensor {
        self.0.clone().into_dyn()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EncoderStage {
    Conv { conv: Conv, norm: GroupNorm },
    Vss { proj: Conv, block: HVssBlock },
}

#[derive(Clone, Debug, PartialEq)]
pub enum DecoderStage {
    Conv { up: Option<Conv>, conv: Conv, norm: GroupNorm },
    Vss { up: Option<Conv>, block: HVssBlock },
}

pub struct ForwardOutputs {
    pub logits: Var,
    /// Encoder stage outputs, stage 1 first.
    pub encoder: Vec<Var>,
    pub bridged: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    pub encoder: Vec<EncoderStage>,
    pub sab: Sab,
    pub cab: Cab,
    /// Stage 6 first, stage 1 last.
    pub decoder: Vec<DecoderStage>,
    pub head: Conv,
}

pub fn build_model(config: ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let ch = config.stage_channels.clone();
    let k = config.conv_kernel;

    let mut encoder = Vec::with_capacity(STAGES);
    for s in 1..=STAGES {
        let c_in = if s == 1 { config.input_channels } else { ch[s - 2] };
        let prefix = format!("enc{s}");
        encoder.push(if s <= 2 {
            EncoderStage::Conv {
                conv: Conv::init(&format!("{prefix}.conv"), c_in, ch[s - 1], k, rng),
                norm: GroupNorm::new(&format!("{prefix}.norm"), ch[s - 1]),
            }
        } else {
            EncoderStage::Vss {
                proj: Conv::init(&format!("{prefix}.proj"), c_in, ch[s - 1], k, rng),
                block: HVssBlock::init(&format!("{prefix}.vss"), config.hss(s), config.mlp_ratio, rng)?,
            }
        });
    }
    let sab = Sab::init("bridge.sab", rng);
    let cab = Cab::init("bridge.cab", &ch, rng);

    let mut decoder = Vec::with_capacity(STAGES);
    for s in (1..=STAGES).rev() {
        let prefix = format!("dec{s}");
        let up = (s < STAGES).then(|| Conv::init(&format!("{prefix}.up"), ch[s], ch[s - 1], k, rng));
        decoder.push(if s <= 2 {
            DecoderStage::Conv {
                up,
                conv: Conv::init(&format!("{prefix}.conv"), ch[s - 1], ch[s - 1], k, rng),
                norm: GroupNorm::new(&format!("{prefix}.norm"), ch[s - 1]),
            }
        } else {
            DecoderStage::Vss {
                up,
                block: HVssBlock::init(&format!("{prefix}.vss"), config.hss(s), config.mlp_ratio, rng)?,
            }
        });
    }
    let head = Conv::init("head", ch[0], config.num_classes, 1, rng);

    let model = Model {
        config,
        seed,
        encoder,
        sab,
        cab,
        decoder,
        head,
    };
    let mut names = BTreeSet::new();
    let mut dup = None;
    model.visit_params(&mut |p| {
        if !names.insert(p.name.clone()) {
            dup = Some(p.name.clone());
        }
    });
    if let Some(name) = dup {
        return Err(Error::ConfigInvalid(format!("duplicate parameter name {name}")));
    }
    Ok(model)
}

impl Model {
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 {
            return Err(Error::shape(format!("expected (N, C, H, W), got {shape:?}")));
        }
        if shape.contains(&0) {
            return Err(Error::EmptyInput);
        }
        if shape[1] != self.config.input_channels {
            return Err(Error::shape(format!(
                "model takes {} input channels, got {}",
                self.config.input_channels, shape[1]
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
            return Err(Error::SpatialDivisibility {
                height: h,
                width: w,
                multiple: SPATIAL_MULTIPLE,
            });
        }
        Ok(())
    }

    /// Taped forward pass.
    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<ForwardOutputs> {
        self.check_input(g.shape(x))?;
        let mut skips = Vec::with_capacity(STAGES);
        let mut cur = x;
        for (i, stage) in self.encoder.iter().enumerate() {
            if i > 0 {
                cur = g.max_pool2(cur);
            }
            cur = match stage {
                EncoderStage::Conv { conv, norm } => {
                    let y = conv.forward(g, cur)?;
                    let y = norm.forward(g, y)?;
                    g.gelu(y)
                }
                EncoderStage::Vss { proj, block } => {
                    let y = proj.forward(g, cur)?;
                    block.forward(g, y)?
                }
            };
            skips.push(cur);
        }

        let spatial = self.sab.forward(g, &skips)?;
        let bridged = self.cab.forward(g, &spatial)?;

        let mut y: Option<Var> = None;
        for (j, stage) in self.decoder.iter().enumerate() {
            let s = STAGES - j;
            let skip = bridged[s - 1];
            let (up, body) = match stage {
                DecoderStage::Conv { up, .. } | DecoderStage::Vss { up, .. } => (up, stage),
            };
            let z = match (y, up) {
                (None, _) => skip,
                (Some(prev), Some(up)) => {
                    let u = g.upsample_bilinear2(prev);
                    let u = up.forward(g, u)?;
                    g.add(u, skip)
                }
                (Some(_), None) => unreachable!("every stage below the bottom has an up conv"),
            };
            y = Some(match body {
                DecoderStage::Conv { conv, norm, .. } => {
                    let v = conv.forward(g, z)?;
                    let v = norm.forward(g, v)?;
                    g.gelu(v)
                }
                DecoderStage::Vss { block, .. } => block.forward(g, z)?,
            });
        }
        let logits = self.head.forward(g, y.expect("six decoder stages"))?;
        Ok(ForwardOutputs {
            logits,
            encoder: skips,
            bridged,
        })
    }

    /// Logits `(N, num_classes, H, W)`.
    pub fn forward(&self, batch: &FeatureMap) -> Result<FeatureMap> {
        self.forward_with_hooks(batch, ForwardHooks::default())
    }

    pub fn forward_with_hooks(&self, batch: &FeatureMap, hooks: ForwardHooks) -> Result<FeatureMap> {
        let mut g = Graph::inference().with_hooks(hooks);
        let x = g.constant(batch.tensor());
        let out = self.forward_graph(&mut g, x)?;
        FeatureMap::from_tensor(g.value(out.logits))
    }

    /// Encoder stage output maps for one input batch.
    pub fn encoder_outputs(&self, batch: &FeatureMap) -> Result<Vec<FeatureMap>> {
        let mut g = Graph::inference();
        let x = g.constant(batch.tensor());
        let out = self.forward_graph(&mut g, x)?;
        out.encoder
            .iter()
            .map(|&v| FeatureMap::from_tensor(g.value(v)))
            .collect()
    }

    /// Cloned `(name, value)` pairs sorted by name.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push((p.name.clone(), p.value.clone())));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.visit_params(&mut |p| {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.iter() {
                h.update(v.to_le_bytes());
            }
        });
        format!("{:x}", h.finalize())
    }

    pub fn hvss_blocks_mut(&mut self) -> Vec<&mut HVssBlock> {
        let mut out = Vec::new();
        for s in &mut self.encoder {
            if let EncoderStage::Vss { block, .. } = s {
                out.push(block);
            }
        }
        for s in &mut self.decoder {
            if let DecoderStage::Vss { block, .. } = s {
                out.push(block);
            }
        }
        out
    }

    pub(crate) fn header_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Header<'a> {
            config: &'a ModelConfig,
            seed: u64,
        }
        canonical_json(&Header {
            config: &self.config,
            seed: self.seed,
        })
    }

    pub(crate) fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.push(b"CONF", self.header_json()?.into_bytes());
        let named = self.named_params();
        c.push(b"PARM", encode_tensors(named.iter().map(|(n, t)| (n.as_str(), t))));
        Ok(c)
    }

    pub(crate) fn from_container(c: &Container) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Header {
            config: ModelConfig,
            seed: u64,
        }
        let header: Header = serde_json::from_slice(c.require(b"CONF")?)
            .map_err(|e| Error::CorruptCheckpoint(format!("model header: {e}")))?;
        let mut model = build_model(header.config, header.seed)?;
        let mut stored: BTreeMap<String, Tensor> = decode_tensors(c.require(b"PARM")?)?.into_iter().collect();
        let mut problem = None;
        model.visit_params_mut(&mut |p| match stored.remove(&p.name) {
            Some(t) if t.shape() == p.value.shape() => p.value = t,
            Some(_) => problem = Some(format!("shape mismatch for {}", p.name)),
            None => problem = Some(format!("missing parameter {}", p.name)),
        });
        if let Some(msg) = problem {
            return Err(Error::CorruptCheckpoint(msg));
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::CorruptCheckpoint(format!("unexpected parameter {extra}")));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

impl Parameterized for EncoderStage {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            EncoderStage::Conv { conv, norm } => {
                conv.visit_params(f);
                norm.visit_params(f);
            }
            EncoderStage::Vss { proj, block } => {
                proj.visit_params(f);
                block.visit_params(f);
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            EncoderStage::Conv { conv, norm } => {
                conv.visit_params_mut(f);
                norm.visit_params_mut(f);
            }
            EncoderStage::Vss { proj, block } => {
                proj.visit_params_mut(f);
                block.visit_params_mut(f);
            }
        }
    }
}

impl Parameterized for DecoderStage {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            DecoderStage::Conv { up, conv, norm } => {
                if let Some(u) = up {
                    u.visit_params(f);
                }
                conv.visit_params(f);
                norm.visit_params(f);
            }
            DecoderStage::Vss { up, block } => {
                if let Some(u) = up {
                    u.visit_params(f);
                }
                block.visit_params(f);
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            DecoderStage::Conv { up, conv, norm } => {
                if let Some(u) = up {
                    u.visit_params_mut(f);
                }
                conv.visit_params_mut(f);
                norm.visit_params_mut(f);
            }
            DecoderStage::Vss { up, block } => {
                if let Some(u) = up {
                    u.visit_params_mut(f);
                }
                block.visit_params_mut(f);
            }
        }
    }
}

impl Parameterized for Model {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.encoder.iter().for_each(|s| s.visit_params(f));
        self.sab.visit_params(f);
        self.cab.visit_params(f);
        self.decoder.iter().for_each(|s| s.visit_params(f));
        self.head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.iter_mut().for_each(|s| s.visit_params_mut(f));
        self.sab.visit_params_mut(f);
        self.cab.visit_params_mut(f);
        self.decoder.iter_mut().for_each(|s| s.visit_params_mut(f));
        self.head.visit_params_mut(f);
    }
}

/// One H-VSS block on a feature map.
pub fn h_vss_block(x: &FeatureMap, block: &HVssBlock) -> Result<FeatureMap> {
    let mut g = Graph::inference();
    let xv = g.constant(x.tensor());
    let y = block.forward(&mut g, xv)?;
    FeatureMap::from_tensor(g.value(y))
}

fn run_bridge(
    skips: &[FeatureMap],
    hooks: ForwardHooks,
    f: impl FnOnce(&mut Graph, &[Var]) -> Result<Vec<Var>>,
) -> Result<Vec<FeatureMap>> {
    if skips.len() != SKIP_COUNT {
        return Err(Error::SkipSetInvalid(skips.len()));
    }
    let mut g = Graph::inference().with_hooks(hooks);
    let vars: Vec<Var> = skips.iter().map(|s| g.constant(s.tensor())).collect();
    let out = f(&mut g, &vars)?;
    out.iter().map(|&v| FeatureMap::from_tensor(g.value(v))).collect()
}

pub fn sab(skips: &[FeatureMap], params: &Sab) -> Result<Vec<FeatureMap>> {
    sab_with_hooks(skips, params, ForwardHooks::default())
}

pub fn sab_with_hooks(skips: &[FeatureMap], params: &Sab, hooks: ForwardHooks) -> Result<Vec<FeatureMap>> {
    run_bridge(skips, hooks, |g, v| params.forward(g, v))
}

pub fn cab(skips: &[FeatureMap], params: &Cab) -> Result<Vec<FeatureMap>> {
    cab_with_hooks(skips, params, ForwardHooks::default())
}

pub fn cab_with_hooks(skips: &[FeatureMap], params: &Cab, hooks: ForwardHooks) -> Result<Vec<FeatureMap>> {
    run_bridge(skips, hooks, |g, v| params.forward(g, v))
}

/// Spatial attention fields, one `(N, 1, H, W)` map per scale.
pub fn sab_attention(skips: &[FeatureMap], params: &Sab) -> Result<Vec<FeatureMap>> {
    run_bridge(skips, ForwardHooks::default(), |g, v| {
        v.iter().map(|&x| params.attention(g, x)).collect()
    })
}

/// Channel attention vectors, one `(N, C_i, 1, 1)` map per scale.
pub fn cab_attention(skips: &[FeatureMap], params: &Cab) -> Result<Vec<FeatureMap>> {
    run_bridge(skips, ForwardHooks::default(), |g, v| params.attention(g, v))
}

pub fn forward(model: &Model, batch: &FeatureMap) -> Result<FeatureMap> {
    model.forward(batch)
}

/// Per-pixel softmax over the class axis.
pub fn softmax_channels(logits: &FeatureMap) -> FeatureMap {
    let mut p = logits.0.clone();
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
    FeatureMap(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(h: usize, w: usize) -> FeatureMap {
        FeatureMap(Array4::from_shape_fn((1, 3, h, w), |(_, c, r, q)| {
            ((c * 31 + r * 7 + q * 3) % 17) as f64 / 17.0
        }))
    }

    #[test]
    fn forward_shape_and_finite() {
        let m = build_model(ModelConfig::reduced(), 3).unwrap();
        let out = m.forward(&input(32, 64)).unwrap();
        assert_eq!(out.dims(), (1, 4, 32, 64));
        assert!(out.is_finite());
    }

    #[test]
    fn indivisible_input_rejected() {
        let m = build_model(ModelConfig::reduced(), 3).unwrap();
        assert!(matches!(
            m.forward(&input(48, 32)),
            Err(Error::SpatialDivisibility { height: 48, .. })
        ));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_model(ModelConfig::reduced(), 11).unwrap();
        let b = build_model(ModelConfig::reduced(), 11).unwrap();
        let c = build_model(ModelConfig::reduced(), 12).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::reduced();
        c.stage_orders.insert("stage4".into(), 4);
        assert!(matches!(c.validate(), Err(Error::ConfigInvalid(_))));
        let mut c = ModelConfig::reduced();
        c.stage_channels.pop();
        assert!(matches!(c.validate(), Err(Error::ConfigInvalid(_))));
        let mut c = ModelConfig::reduced();
        c.conv_kernel = 4;
        assert!(matches!(c.validate(), Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model(ModelConfig::reduced(), 5).unwrap();
        let p = dir.path().join("m.bin");
        m.save(&p).unwrap();
        let back = Model::load(&p).unwrap();
        assert_eq!(back, m);
    }
}
