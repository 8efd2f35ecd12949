//! Slides, annotation masks and patch extraction: windows, tissue filter,
//! max-vote fusion, patient-wise folds and class-balancing augmentation.

mod augment;
pub mod io;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment_balance, augment_balance_to, transform_mask, transform_pixels, Transform};

pub const BACKGROUND: u8 = 0;
pub const BENIGN: u8 = 1;
pub const G3: u8 = 2;
pub const G4: u8 = 3;
pub const G5: u8 = 4;
pub const IGNORE: u8 = 255;
pub const CLASS_NAMES: [&str; 5] = ["background", "benign", "G3", "G4", "G5"];
pub const MAX_ANNOTATORS: usize = 6;

pub const TISSUE_SATURATION: f64 = 0.08;
pub const DEFAULT_MIN_TISSUE: f64 = 0.1;

/// `H x W x 3` 8-bit RGB.
pub type RgbImage = Array3<u8>;

pub fn is_valid_label(v: u8) -> bool {
    v <= G5 || v == IGNORE
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegmentationMask {
    labels: Array2<u8>,
}

impl SegmentationMask {
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&v| !is_valid_label(v)) {
            return Err(Error::InvalidLabel(bad));
        }
        Ok(Self { labels })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), label))
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn into_labels(self) -> Array2<u8> {
        self.labels
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.labels[[r, c]]
    }

    pub fn label_set(&self) -> BTreeSet<u8> {
        self.labels.iter().copied().collect()
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Self {
        Self {
            labels: self.labels.slice(s![row..row + h, col..col + w]).to_owned(),
        }
    }

    /// Modal non-background, non-ignore label; ties go to the higher label.
    pub fn dominant_class(&self) -> Option<u8> {
        let mut counts = [0usize; 5];
        for &v in self.labels.iter() {
            if v != BACKGROUND && v != IGNORE {
                counts[v as usize] += 1;
            }
        }
        (BENIGN..=G5)
            .filter(|&c| counts[c as usize] > 0)
            .max_by_key(|&c| (counts[c as usize], c))
    }
}

/// Saturation `(max - min) / 255` of one RGB pixel.
pub fn saturation(px: [u8; 3]) -> f64 {
    let mx = px.iter().max().copied().unwrap();
    let mn = px.iter().min().copied().unwrap();
    (mx - mn) as f64 / 255.0
}

pub fn is_tissue_pixel(px: [u8; 3]) -> bool {
    saturation(px) > TISSUE_SATURATION
}

fn pixel(img: &RgbImage, r: usize, c: usize) -> [u8; 3] {
    [img[[r, c, 0]], img[[r, c, 1]], img[[r, c, 2]]]
}

pub fn tissue_fraction(img: &RgbImage) -> f64 {
    let (h, w, _) = img.dim();
    if h * w == 0 {
        return 0.0;
    }
    let mut n = 0usize;
    for r in 0..h {
        for c in 0..w {
            n += is_tissue_pixel(pixel(img, r, c)) as usize;
        }
    }
    n as f64 / (h * w) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlideRecord {
    pub slide_id: String,
    pub patient_id: String,
    pub image: RgbImage,
    pub annotations: BTreeMap<String, SegmentationMask>,
}

impl SlideRecord {
    pub fn new(
        slide_id: impl Into<String>,
        patient_id: impl Into<String>,
        image: RgbImage,
        annotations: BTreeMap<String, SegmentationMask>,
    ) -> Result<Self> {
        let slide_id = slide_id.into();
        let (h, w, ch) = image.dim();
        if ch != 3 {
            return Err(Error::shape(format!("slide {slide_id} has {ch} channels, expected 3")));
        }
        if annotations.is_empty() || annotations.len() > MAX_ANNOTATORS {
            return Err(Error::ConfigInvalid(format!(
                "slide {slide_id} has {} annotators, expected 1..={MAX_ANNOTATORS}",
                annotations.len()
            )));
        }
        for (id, m) in &annotations {
            if m.dim() != (h, w) {
                return Err(Error::shape(format!(
                    "annotation {id} of slide {slide_id} is {:?}, slide is {h}x{w}",
                    m.dim()
                )));
            }
        }
        Ok(Self {
            slide_id,
            patient_id: patient_id.into(),
            image,
            annotations,
        })
    }

    pub fn dim(&self) -> (usize, usize) {
        let (h, w, _) = self.image.dim();
        (h, w)
    }

    pub fn fused_mask(&self) -> Result<SegmentationMask> {
        let masks: Vec<SegmentationMask> = self.annotations.values().cloned().collect();
        fuse_annotations(&masks)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    pub pixels: RgbImage,
    pub mask: SegmentationMask,
    pub slide_id: String,
    pub patient_id: String,
    /// Top-left corner in slide coordinates.
    pub origin: (usize, usize),
    pub tissue_fraction: f64,
    /// Set on synthesized copies: the transform applied to the source patch
    /// at the same slide and origin.
    pub augmentation: Option<Transform>,
}

impl ImagePatch {
    pub fn size(&self) -> (usize, usize) {
        self.mask.dim()
    }

    /// File stem used in the patch directory layout.
    pub fn stem(&self) -> String {
        let base = format!("{}_{}_{}", self.slide_id, self.origin.0, self.origin.1);
        match &self.augmentation {
            Some(t) => format!("{base}_aug{}", t.copy),
            None => base,
        }
    }

    /// Canonical ordering key.
    pub fn key(&self) -> (String, usize, usize, Option<usize>) {
        (
            self.slide_id.clone(),
            self.origin.0,
            self.origin.1,
            self.augmentation.as_ref().map(|t| t.copy),
        )
    }
}

/// Window origins along one axis: multiples of `stride` while the window
/// fits, plus a window flush with the far border when the grid misses it.
pub fn window_positions(dim: usize, size: usize, stride: usize) -> Vec<usize> {
    if dim < size {
        return Vec::new();
    }
    let last = dim - size;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if last % stride != 0 {
        out.push(last);
    }
    out
}

pub fn stride_for(size: usize, overlap: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::ConfigInvalid(format!("overlap {overlap} outside [0, 1)")));
    }
    if size == 0 {
        return Err(Error::ConfigInvalid("patch size must be positive".into()));
    }
    let stride = (size as f64 * (1.0 - overlap)).round() as usize;
    Ok(stride.max(1))
}

/// Cuts the slide into overlapping windows; patch masks come from the fused
/// annotations. Output is ordered by (row, col).
pub fn extract_patches(slide: &SlideRecord, size: usize, overlap: f64) -> Result<Vec<ImagePatch>> {
    let stride = stride_for(size, overlap)?;
    let (h, w) = slide.dim();
    if h < size || w < size {
        return Err(Error::SlideTooSmall {
            height: h,
            width: w,
            size,
        });
    }
    let fused = slide.fused_mask()?;
    let rows = window_positions(h, size, stride);
    let cols = window_positions(w, size, stride);
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            let pixels = slide.image.slice(s![r..r + size, c..c + size, ..]).to_owned();
            out.push(ImagePatch {
                tissue_fraction: tissue_fraction(&pixels),
                pixels,
                mask: fused.crop(r, c, size, size),
                slide_id: slide.slide_id.clone(),
                patient_id: slide.patient_id.clone(),
                origin: (r, c),
                augmentation: None,
            });
        }
    }
    Ok(out)
}

pub fn tissue_filter(patch: &ImagePatch, min_fraction: f64) -> bool {
    patch.tissue_fraction >= min_fraction
}

/// Per-pixel max vote over non-ignore labels; ties go to the more severe
/// (higher) label and all-ignore pixels stay ignore.
pub fn fuse_annotations(masks: &[SegmentationMask]) -> Result<SegmentationMask> {
    let first = masks.first().ok_or(Error::EmptyInput)?;
    let dim = first.dim();
    if let Some(m) = masks.iter().find(|m| m.dim() != dim) {
        return Err(Error::shape(format!(
            "annotation masks disagree: {dim:?} vs {:?}",
            m.dim()
        )));
    }
    let labels = Array2::from_shape_fn(dim, |(r, c)| {
        let mut counts = [0usize; 5];
        for m in masks {
            let v = m.get(r, c);
            if v != IGNORE {
                counts[v as usize] += 1;
            }
        }
        (0..=G5)
            .filter(|&l| counts[l as usize] > 0)
            .max_by_key(|&l| (counts[l as usize], l))
            .unwrap_or(IGNORE)
    });
    Ok(SegmentationMask { labels })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldManifest {
    pub fold_count: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldManifest {
    pub fn fold_of(&self, patient_id: &str) -> Option<usize> {
        self.assignment.get(patient_id).copied()
    }

    pub fn patients_in(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(p, _)| p.as_str())
            .collect()
    }
}

pub fn make_folds(patches: &[ImagePatch], k: usize, seed: u64) -> Result<FoldManifest> {
    let patients: BTreeSet<&str> = patches.iter().map(|p| p.patient_id.as_str()).collect();
    make_folds_for(patients, k, seed)
}

/// Shuffles the sorted patient ids with a seeded ChaCha8 stream, then deals
/// them round-robin.
pub fn make_folds_for<'a>(
    patients: impl IntoIterator<Item = &'a str>,
    k: usize,
    seed: u64,
) -> Result<FoldManifest> {
    if k < 2 {
        return Err(Error::ConfigInvalid(format!("fold count must be >= 2, got {k}")));
    }
    let sorted: BTreeSet<&str> = patients.into_iter().collect();
    if sorted.len() < k {
        return Err(Error::InsufficientPatients {
            patients: sorted.len(),
            folds: k,
        });
    }
    let mut order: Vec<&str> = sorted.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(FoldManifest {
        fold_count: k,
        seed,
        assignment: order
            .into_iter()
            .enumerate()
            .map(|(i, p)| (p.to_string(), i % k))
            .collect(),
    })
}
