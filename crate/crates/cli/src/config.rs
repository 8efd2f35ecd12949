use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hvmunet::model::ModelConfig;
use hvmunet::tissue_graph::GraphConfig;
use hvmunet::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub patch_size: usize,
    pub overlap: f64,
    pub min_tissue: f64,
    pub folds: usize,
    /// Seeds fold assignment and augmentation.
    pub seed: u64,
    /// Run tissue-graph benign-mask estimation on every kept patch.
    #[serde(default)]
    pub estimate_benign: bool,
    /// Stain reference image; normalization is skipped without one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stain_reference: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            patch_size: 512,
            overlap: 0.5,
            min_tissue: hvmunet::data::DEFAULT_MIN_TISSUE,
            folds: 4,
            seed: 0,
            estimate_benign: false,
            stain_reference: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    pub output_root: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub graph: GraphConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("parsing config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.dataset_root);
        resolve(&mut cfg.output_root);
        if let Some(r) = cfg.pipeline.stain_reference.as_mut() {
            resolve(r);
        }
        Ok(cfg)
    }

    #[cfg(test)]
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.graph.validate()?;
        let p = &self.pipeline;
        if p.patch_size == 0 {
            bail!("pipeline.patch_size must be positive");
        }
        if !(0.0..1.0).contains(&p.overlap) {
            bail!("pipeline.overlap must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&p.min_tissue) {
            bail!("pipeline.min_tissue must lie in [0, 1]");
        }
        if p.folds < 2 {
            bail!("pipeline.folds must be at least 2");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
dataset_root = "data"
output_root = "out"

[model]
stage_channels = [4, 8, 8, 8, 16, 16]
stage_orders = { stage3 = 2, stage4 = 3, stage5 = 4, stage6 = 5 }
conv_kernel = 3
num_classes = 4
input_channels = 3

[train]
learning_rate = 0.003
batch_size = 4
max_steps = 5
seed = 3

[pipeline]
patch_size = 64
overlap = 0.5
min_tissue = 0.1
folds = 2
seed = 1

[graph]
n_segments = 50
compactness = 10.0
tau = 8.0
"#;

    #[test]
    fn roundtrip_is_fixed_point() {
        let a = RunConfig::parse(SAMPLE).unwrap();
        let text = a.to_toml().unwrap();
        let b = RunConfig::parse(&text).unwrap();
        assert_eq!(a, b);
        assert_eq!(text, b.to_toml().unwrap());
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = SAMPLE.replace("folds = 2", "folds = 2\nfold = 3");
        assert!(RunConfig::parse(&bad).is_err());
        let bad = SAMPLE.replace("tau = 8.0", "tau = 8.0\ntaus = 1.0");
        assert!(RunConfig::parse(&bad).is_err());
    }

    #[test]
    fn nested_invariants_checked() {
        let bad = SAMPLE.replace("conv_kernel = 3", "conv_kernel = 4");
        assert!(RunConfig::parse(&bad).is_err());
        let bad = SAMPLE.replace("folds = 2", "folds = 1");
        assert!(RunConfig::parse(&bad).is_err());
    }
}
