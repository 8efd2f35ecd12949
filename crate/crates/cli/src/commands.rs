use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use hvmunet::checkpoint::{canonical_json, write_atomic};
use hvmunet::data::io::{load_dataset, read_mask, read_rgb, write_mask, write_rgb};
use hvmunet::data::{
    augment_balance, extract_patches, make_folds, tissue_filter, FoldManifest, ImagePatch, Transform, CLASS_NAMES,
};
use hvmunet::metrics::{evaluate, summarize, MetricsReport};
use hvmunet::model::build_model;
use hvmunet::tissue_graph::estimate_benign_mask;
use hvmunet::training::{fit, history_csv, load_checkpoint, predict_masks, save_checkpoint, Dataset};
use serde::{Deserialize, Serialize};

use crate::chart;
use crate::config::{PipelineConfig, RunConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchEntry {
    pub stem: String,
    pub slide_id: String,
    pub patient_id: String,
    pub fold: usize,
    pub origin: (usize, usize),
    pub tissue_fraction: f64,
    pub dominant_class: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<Transform>,
    /// Relative to the preprocessed directory.
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub pipeline: PipelineConfig,
    pub folds: FoldManifest,
    pub patches: Vec<PatchEntry>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldCounts {
    pub patients: usize,
    pub patches: usize,
    pub augmented: usize,
    /// Patches per dominant class, augmented copies included.
    pub patches_per_class: BTreeMap<String, usize>,
    /// Pixels per label, augmented copies included.
    pub pixels_per_class: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub slides: usize,
    pub extracted: usize,
    pub kept: usize,
    pub discarded: usize,
    pub folds: BTreeMap<String, FoldCounts>,
}

pub fn preprocessed_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_root.join("preprocessed")
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = canonical_json(v)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn label_name(l: u8) -> String {
    CLASS_NAMES
        .get(l as usize)
        .map_or_else(|| "ignore".to_string(), |s| s.to_string())
}

/// Builds the patch set in a sibling temp directory, then swaps it in.
pub fn preprocess(cfg: &RunConfig) -> Result<Manifest> {
    let p = &cfg.pipeline;
    let slides = load_dataset(&cfg.dataset_root)?;
    let reference = p.stain_reference.as_deref().map(read_rgb).transpose()?;

    let mut summary = PreprocessSummary {
        slides: slides.len(),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for slide in &slides {
        let patches = extract_patches(slide, p.patch_size, p.overlap)
            .with_context(|| format!("extracting slide {}", slide.slide_id))?;
        summary.extracted += patches.len();
        for mut patch in patches {
            if !tissue_filter(&patch, p.min_tissue) {
                continue;
            }
            if p.estimate_benign {
                patch.mask = estimate_benign_mask(&patch.pixels, &patch.mask, &cfg.graph, reference.as_ref())?;
            }
            kept.push(patch);
        }
    }
    summary.kept = kept.len();
    summary.discarded = summary.extracted - summary.kept;
    if kept.is_empty() {
        bail!("no patch passed the tissue filter (min_tissue {})", p.min_tissue);
    }
    let folds = make_folds(&kept, p.folds, p.seed)?;

    let out = preprocessed_dir(cfg);
    let tmp = cfg.output_root.join(".preprocessed.tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    let mut entries = Vec::new();
    for f in 0..folds.fold_count {
        let fold_patches: Vec<ImagePatch> = kept
            .iter()
            .filter(|x| folds.fold_of(&x.patient_id) == Some(f))
            .cloned()
            .collect();
        let balanced = augment_balance(&fold_patches, p.seed.wrapping_add(f as u64 + 1))?;
        let mut counts = FoldCounts {
            patients: folds.patients_in(f).len(),
            ..Default::default()
        };
        for patch in &balanced {
            let stem = patch.stem();
            let image = format!("patches/{f}/{stem}.png");
            let mask = format!("patches/{f}/{stem}_mask.png");
            write_rgb(&tmp.join(&image), &patch.pixels)?;
            write_mask(&tmp.join(&mask), &patch.mask)?;
            let dominant = patch.mask.dominant_class();
            counts.patches += 1;
            counts.augmented += patch.augmentation.is_some() as usize;
            if let Some(d) = dominant {
                *counts.patches_per_class.entry(label_name(d)).or_default() += 1;
            }
            for &l in patch.mask.labels().iter() {
                *counts.pixels_per_class.entry(label_name(l)).or_default() += 1;
            }
            entries.push(PatchEntry {
                stem,
                slide_id: patch.slide_id.clone(),
                patient_id: patch.patient_id.clone(),
                fold: f,
                origin: patch.origin,
                tissue_fraction: patch.tissue_fraction,
                dominant_class: dominant,
                augmentation: patch.augmentation.clone(),
                image,
                mask,
            });
        }
        summary.folds.insert(f.to_string(), counts);
    }
    let manifest = Manifest {
        pipeline: p.clone(),
        folds,
        patches: entries,
    };
    write_json(&tmp.join("manifest.json"), &manifest)?;
    write_json(&tmp.join("summary.json"), &summary)?;
    if out.exists() {
        fs::remove_dir_all(&out)?;
    }
    fs::rename(&tmp, &out)?;
    println!(
        "preprocess: {} slides, {} patches extracted, {} kept, {} written",
        summary.slides,
        summary.extracted,
        summary.kept,
        manifest.patches.len()
    );
    Ok(manifest)
}

pub fn load_manifest(cfg: &RunConfig) -> Result<Manifest> {
    let path = preprocessed_dir(cfg).join("manifest.json");
    let text = fs::read_to_string(&path)
        .with_context(|| format!("missing fold manifest {}; run preprocess first", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn check_fold(manifest: &Manifest, fold: usize) -> Result<()> {
    if fold >= manifest.folds.fold_count {
        bail!(
            "fold {fold} out of range: the manifest has {} folds (0..{})",
            manifest.folds.fold_count,
            manifest.folds.fold_count
        );
    }
    Ok(())
}

fn load_patch(cfg: &RunConfig, e: &PatchEntry) -> Result<ImagePatch> {
    let dir = preprocessed_dir(cfg);
    Ok(ImagePatch {
        pixels: read_rgb(&dir.join(&e.image))?,
        mask: read_mask(&dir.join(&e.mask))?,
        slide_id: e.slide_id.clone(),
        patient_id: e.patient_id.clone(),
        origin: e.origin,
        tissue_fraction: e.tissue_fraction,
        augmentation: e.augmentation.clone(),
    })
}

pub fn run_dir(cfg: &RunConfig, fold: usize) -> PathBuf {
    cfg.output_root.join("runs").join(format!("fold{fold}"))
}

/// Trains on every fold except `fold`.
pub fn train(cfg: &RunConfig, fold: usize) -> Result<()> {
    let manifest = load_manifest(cfg)?;
    check_fold(&manifest, fold)?;
    let patches = manifest
        .patches
        .iter()
        .filter(|e| e.fold != fold)
        .map(|e| load_patch(cfg, e))
        .collect::<Result<Vec<_>>>()?;
    if patches.is_empty() {
        bail!("no training patches outside fold {fold}");
    }
    let data = Dataset::from_patches(&patches, cfg.model.num_classes)?;
    let model = build_model(cfg.model.clone(), cfg.train.seed)?;
    let state = fit(model, &data, &cfg.train)?;
    let dir = run_dir(cfg, fold);
    save_checkpoint(&state, &dir.join("checkpoint.bin"))?;
    write_atomic(&dir.join("loss.csv"), history_csv(&state.history).as_bytes())?;
    println!(
        "train: fold {fold}, {} patches, {} steps, final loss {:.6}, parameters {}",
        data.len(),
        state.step,
        state.history.last().copied().unwrap_or(f64::NAN),
        state.model.checksum()
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOutput {
    pub fold: usize,
    pub source: String,
    pub patches: usize,
    pub report: MetricsReport,
}

pub fn eval_dir(cfg: &RunConfig, fold: usize) -> PathBuf {
    cfg.output_root.join("eval").join(format!("fold{fold}"))
}

/// Scores the held-out fold's original patches against either a checkpoint
/// (default `runs/fold<k>/checkpoint.bin`) or a directory of
/// `<stem>_mask.png` predictions.
pub fn eval(cfg: &RunConfig, fold: usize, checkpoint: Option<&Path>, predictions: Option<&Path>) -> Result<EvalOutput> {
    if checkpoint.is_some() && predictions.is_some() {
        bail!("pass either --checkpoint or --predictions, not both");
    }
    let manifest = load_manifest(cfg)?;
    check_fold(&manifest, fold)?;
    let held_out: Vec<&PatchEntry> = manifest
        .patches
        .iter()
        .filter(|e| e.fold == fold && e.augmentation.is_none())
        .collect();
    let gts = held_out
        .iter()
        .map(|e| read_mask(&preprocessed_dir(cfg).join(&e.mask)))
        .collect::<hvmunet::Result<Vec<_>>>()?;

    let (source, preds) = match predictions {
        Some(dir) => {
            let preds = held_out
                .iter()
                .zip(&gts)
                .map(|(e, gt)| {
                    let path = dir.join(format!("{}_mask.png", e.stem));
                    let p = read_mask(&path)?;
                    if p.dim() != gt.dim() {
                        return Err(anyhow!(hvmunet::Error::ShapeMismatch(format!(
                            "{} is {:?}, ground truth is {:?}",
                            path.display(),
                            p.dim(),
                            gt.dim()
                        ))));
                    }
                    Ok(p)
                })
                .collect::<Result<Vec<_>>>()?;
            ("predictions".to_string(), preds)
        }
        None => {
            let path = checkpoint.map_or_else(|| run_dir(cfg, fold).join("checkpoint.bin"), Path::to_path_buf);
            let state = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
            let mut preds = Vec::with_capacity(held_out.len());
            for chunk in held_out.chunks(cfg.train.batch_size.max(1)) {
                let imgs = chunk
                    .iter()
                    .map(|e| read_rgb(&preprocessed_dir(cfg).join(&e.image)))
                    .collect::<hvmunet::Result<Vec<_>>>()?;
                let refs: Vec<_> = imgs.iter().collect();
                preds.extend(predict_masks(&state.model, &refs)?);
            }
            ("checkpoint".to_string(), preds)
        }
    };
    let report = evaluate(preds.iter().zip(&gts))?;
    let out = EvalOutput {
        fold,
        source,
        patches: held_out.len(),
        report,
    };
    let dir = eval_dir(cfg, fold);
    write_json(&dir.join("report.json"), &out)?;
    write_atomic(&dir.join("report.txt"), out.report.to_table().as_bytes())?;
    print!("fold {fold} ({} patches)\n{}", out.patches, out.report.to_table());
    Ok(out)
}

/// Collects every `eval/fold<k>/report.json` into a mean ± std summary.
pub fn report(cfg: &RunConfig) -> Result<()> {
    let root = cfg.output_root.join("eval");
    let mut folds = Vec::new();
    let entries = fs::read_dir(&root).with_context(|| format!("no evaluations under {}", root.display()))?;
    for e in entries {
        let path = e?.path().join("report.json");
        if path.is_file() {
            let out: EvalOutput = serde_json::from_str(&fs::read_to_string(&path)?)
                .with_context(|| format!("parsing {}", path.display()))?;
            folds.push((out.fold, out.report));
        }
    }
    if folds.is_empty() {
        bail!("no evaluations under {}", root.display());
    }
    folds.sort_by_key(|(f, _)| *f);
    let summary = summarize(&folds)?;
    let dir = cfg.output_root.join("report");
    write_json(&dir.join("summary.json"), &summary)?;
    write_atomic(&dir.join("summary.txt"), summary.to_table().as_bytes())?;
    write_atomic(&dir.join("dice.png"), &chart::dice_bars(&summary)?)?;
    print!("{}", summary.to_table());
    Ok(())
}
