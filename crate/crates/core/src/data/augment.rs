use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{tissue_fraction, ImagePatch, RgbImage, SegmentationMask, IGNORE};
use crate::error::{Error, Result};

pub const MAX_ROTATION_DEG: f64 = 10.0;
pub const MAX_SHIFT_FRACTION: f64 = 0.1;
const FILL_PIXEL: u8 = 255;

/// Rotation about the patch centre followed by a vertical shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transform {
    pub angle_deg: f64,
    /// Fraction of patch height; positive moves content down.
    pub shift_fraction: f64,
    /// Index of this copy among all copies emitted by one balancing pass.
    pub copy: usize,
}

impl Transform {
    /// Source coordinate `(row, col)` sampled by output pixel `(r, c)`.
    fn source(&self, r: usize, c: usize, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let dy = self.shift_fraction * h as f64;
        let qy = r as f64 - dy - cy;
        let qx = c as f64 - cx;
        let (sin, cos) = self.angle_deg.to_radians().sin_cos();
        (cos * qy - sin * qx + cy, sin * qy + cos * qx + cx)
    }
}

/// Nearest-neighbour resampling; pixels mapped from outside become ignore.
pub fn transform_mask(mask: &SegmentationMask, t: &Transform) -> SegmentationMask {
    let (h, w) = mask.dim();
    let labels = Array2::from_shape_fn((h, w), |(r, c)| {
        let (sy, sx) = t.source(r, c, h, w);
        let (ry, rx) = (sy.round(), sx.round());
        if ry < 0.0 || rx < 0.0 || ry > (h - 1) as f64 || rx > (w - 1) as f64 {
            IGNORE
        } else {
            mask.get(ry as usize, rx as usize)
        }
    });
    SegmentationMask::new(labels).expect("resampling only copies valid labels")
}

/// Bilinear resampling with white outside the source.
pub fn transform_pixels(img: &RgbImage, t: &Transform) -> RgbImage {
    let (h, w, ch) = img.dim();
    let fetch = |y: i64, x: i64, k: usize| -> f64 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            FILL_PIXEL as f64
        } else {
            img[[y as usize, x as usize, k]] as f64
        }
    };
    let mut out = Array3::zeros((h, w, ch));
    for r in 0..h {
        for c in 0..w {
            let (sy, sx) = t.source(r, c, h, w);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as i64, x0 as i64);
            for k in 0..ch {
                let top = fetch(y0, x0, k) * (1.0 - fx) + fetch(y0, x0 + 1, k) * fx;
                let bot = fetch(y0 + 1, x0, k) * (1.0 - fx) + fetch(y0 + 1, x0 + 1, k) * fx;
                let v = top * (1.0 - fy) + bot * fy;
                out[[r, c, k]] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

fn apply(src: &ImagePatch, t: Transform) -> ImagePatch {
    let pixels = transform_pixels(&src.pixels, &t);
    ImagePatch {
        tissue_fraction: tissue_fraction(&pixels),
        pixels,
        mask: transform_mask(&src.mask, &t),
        slide_id: src.slide_id.clone(),
        patient_id: src.patient_id.clone(),
        origin: src.origin,
        augmentation: Some(t),
    }
}

/// Balances dominant-class counts to at least 90% of the largest class.
pub fn augment_balance(patches: &[ImagePatch], seed: u64) -> Result<Vec<ImagePatch>> {
    augment_balance_to(patches, seed, 9, 10)
}

/// Appends transformed copies of under-represented classes until each class
/// count is at least `ceil(max * num / den)`. Classes are counted by the
/// dominant label of the source patch; all-background patches don't count.
pub fn augment_balance_to(
    patches: &[ImagePatch],
    seed: u64,
    num: usize,
    den: usize,
) -> Result<Vec<ImagePatch>> {
    if patches.is_empty() {
        return Err(Error::EmptyInput);
    }
    if den == 0 || num > den {
        return Err(Error::ConfigInvalid(format!("balance ratio {num}/{den} outside (0, 1]")));
    }
    let mut by_class: BTreeMap<u8, Vec<&ImagePatch>> = BTreeMap::new();
    for p in patches.iter().filter(|p| p.augmentation.is_none()) {
        if let Some(c) = p.mask.dominant_class() {
            by_class.entry(c).or_default().push(p);
        }
    }
    let mut out = patches.to_vec();
    let Some(max) = by_class.values().map(Vec::len).max() else {
        return Ok(out);
    };
    let target = (max * num).div_ceil(den);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut copy = 0;
    for sources in by_class.values() {
        for i in 0..target.saturating_sub(sources.len()) {
            let t = Transform {
                angle_deg: rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
                shift_fraction: rng.gen_range(-MAX_SHIFT_FRACTION..=MAX_SHIFT_FRACTION),
                copy,
            };
            copy += 1;
            out.push(apply(sources[i % sources.len()], t));
        }
    }
    Ok(out)
}
