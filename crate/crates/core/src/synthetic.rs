//! Seeded synthetic tissue images for tests and demos: white background with
//! coloured blobs whose hue encodes the class.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ImagePatch, RgbImage, SegmentationMask, SlideRecord, BACKGROUND, BENIGN, G3, G4, G5, IGNORE};
use crate::error::Result;

/// Stain-like colour per label 0..=4.
pub const PALETTE: [[u8; 3]; 5] = [
    [255, 255, 255],
    [235, 150, 195],
    [180, 80, 190],
    [120, 50, 170],
    [70, 20, 110],
];

fn paint(img: &mut RgbImage, labels: &Array2<u8>, rng: &mut ChaCha8Rng, noise: i32) {
    for ((r, c), &l) in labels.indexed_iter() {
        for k in 0..3 {
            let base = PALETTE[l as usize][k] as i32;
            let v = if l == BACKGROUND || noise == 0 {
                base
            } else {
                base + rng.gen_range(-noise..=noise)
            };
            img[[r, c, k]] = v.clamp(0, 255) as u8;
        }
    }
}

/// Label map with up to `blobs` discs on background.
pub fn blob_labels(h: usize, w: usize, blobs: usize, rng: &mut ChaCha8Rng) -> Array2<u8> {
    let mut labels = Array2::from_elem((h, w), BACKGROUND);
    let short = h.min(w) as f64;
    for _ in 0..blobs {
        let class = rng.gen_range(BENIGN..=G5);
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let rad = rng.gen_range(0.15 * short..0.35 * short);
        for ((r, c), l) in labels.indexed_iter_mut() {
            if (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2) <= rad * rad {
                *l = class;
            }
        }
    }
    labels
}

/// Patches cycling through the four tissue classes as the first blob so
/// every class appears once `n >= 4`.
pub fn patches(n: usize, size: usize, seed: u64) -> Result<Vec<ImagePatch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut labels = blob_labels(size, size, 2, &mut rng);
            let class = BENIGN + (i % 4) as u8;
            let (cy, cx) = (size as f64 / 2.0, size as f64 / 2.0);
            let rad = size as f64 * 0.22;
            for ((r, c), l) in labels.indexed_iter_mut() {
                if (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2) <= rad * rad {
                    *l = class;
                }
            }
            let mut pixels = Array3::zeros((size, size, 3));
            paint(&mut pixels, &labels, &mut rng, 6);
            Ok(ImagePatch {
                tissue_fraction: crate::data::tissue_fraction(&pixels),
                pixels,
                mask: SegmentationMask::new(labels)?,
                slide_id: format!("syn{i}"),
                patient_id: format!("p{i}"),
                origin: (0, 0),
                augmentation: None,
            })
        })
        .collect()
}

/// A slide with `annotators` masks that agree on the blobs except for a
/// seeded fraction of pixels relabelled or ignored.
pub fn slide(
    slide_id: &str,
    patient_id: &str,
    size: (usize, usize),
    annotators: usize,
    seed: u64,
) -> Result<SlideRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = size;
    let blobs = ((h * w) as f64 / (160.0 * 160.0)).ceil() as usize + 2;
    let labels = blob_labels(h, w, blobs, &mut rng);
    let mut image = Array3::zeros((h, w, 3));
    paint(&mut image, &labels, &mut rng, 6);
    let mut annotations = BTreeMap::new();
    for a in 0..annotators {
        let mut m = labels.clone();
        for v in m.iter_mut() {
            let u: f64 = rng.gen();
            if u < 0.02 {
                *v = IGNORE;
            } else if u < 0.04 && *v != BACKGROUND {
                *v = [G3, G4][rng.gen_range(0..2)];
            }
        }
        annotations.insert(format!("annotator{}", a + 1), SegmentationMask::new(m)?);
    }
    SlideRecord::new(slide_id, patient_id, image, annotations)
}
