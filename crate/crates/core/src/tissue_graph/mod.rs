//! Benign-mask estimation for slides annotated only with Gleason grades:
//! stain normalization, SLIC superpixels, greedy colour merging, a region
//! adjacency graph with per-region features, and a saturation rule that
//! marks unannotated tissue regions benign.

mod slic;
mod stain;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{is_tissue_pixel, saturation, RgbImage, SegmentationMask, BACKGROUND, BENIGN, TISSUE_SATURATION};
use crate::error::{Error, Result};

pub use slic::{rgb_to_lab, slic_superpixels, SLIC_ITERATIONS};
pub use stain::{channel_stats, stain_normalize, ycbcr_pixels};

pub const HISTOGRAM_BINS: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelMap {
    pub labels: Array2<usize>,
    pub count: usize,
}

impl SuperpixelMap {
    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    /// Every label in `[0, count)` occurs and each region is 4-connected.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.count];
        for &l in self.labels.iter() {
            if l >= self.count {
                return Err(Error::shape(format!("label {l} >= count {}", self.count)));
            }
            seen[l] = true;
        }
        if let Some(l) = seen.iter().position(|s| !s) {
            return Err(Error::shape(format!("label {l} never occurs")));
        }
        let (_, sizes) = slic::components(&self.labels);
        if sizes.len() != self.count {
            return Err(Error::shape("a region is not 4-connected"));
        }
        Ok(())
    }

    pub fn areas(&self) -> Vec<usize> {
        let mut a = vec![0; self.count];
        self.labels.iter().for_each(|&l| a[l] += 1);
        a
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub n_segments: usize,
    pub compactness: f64,
    pub tau: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            n_segments: 400,
            compactness: 10.0,
            tau: 8.0,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_segments == 0 {
            return Err(Error::ConfigInvalid("graph.n_segments must be positive".into()));
        }
        if !(self.compactness.is_finite() && self.compactness >= 0.0) {
            return Err(Error::ConfigInvalid("graph.compactness must be >= 0".into()));
        }
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(Error::ConfigInvalid("graph.tau must be >= 0".into()));
        }
        Ok(())
    }
}

fn check_dims(sp: &SuperpixelMap, image: &RgbImage) -> Result<()> {
    let (h, w, _) = image.dim();
    if sp.dim() != (h, w) {
        return Err(Error::shape(format!(
            "superpixel map {:?} does not match image {h}x{w}",
            sp.dim()
        )));
    }
    Ok(())
}

/// Unordered adjacent label pairs `(a, b)` with `a < b`, 4-connectivity.
pub fn adjacent_pairs(labels: &Array2<usize>) -> BTreeSet<(usize, usize)> {
    let (h, w) = labels.dim();
    let mut out = BTreeSet::new();
    for r in 0..h {
        for c in 0..w {
            let a = labels[[r, c]];
            for (nr, nc) in [(r + 1, c), (r, c + 1)] {
                if nr < h && nc < w {
                    let b = labels[[nr, nc]];
                    if a != b {
                        out.insert((a.min(b), a.max(b)));
                    }
                }
            }
        }
    }
    out
}

fn mean_distance(a: &([f64; 3], usize), b: &([f64; 3], usize)) -> f64 {
    let (na, nb) = (a.1 as f64, b.1 as f64);
    (0..3)
        .map(|k| (a.0[k] / na - b.0[k] / nb).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Greedily merges the closest adjacent pair by mean-RGB distance while it
/// is below `tau`. The merged region keeps the smaller id; ties go to the
/// lexicographically smallest pair. Surviving ids are renumbered in
/// ascending order.
pub fn merge_superpixels(sp: &SuperpixelMap, image: &RgbImage, tau: f64) -> Result<SuperpixelMap> {
    check_dims(sp, image)?;
    let n = sp.count;
    // sums of RGB values and pixel counts
    let mut stats = vec![([0.0f64; 3], 0usize); n];
    for ((r, c), &l) in sp.labels.indexed_iter() {
        for k in 0..3 {
            stats[l].0[k] += image[[r, c, k]] as f64;
        }
        stats[l].1 += 1;
    }
    let mut neighbours: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for (a, b) in adjacent_pairs(&sp.labels) {
        neighbours[a].insert(b);
        neighbours[b].insert(a);
    }
    let mut parent: Vec<usize> = (0..n).collect();
    let mut alive: BTreeSet<usize> = (0..n).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for &a in &alive {
            for &b in neighbours[a].range(a + 1..) {
                let d = mean_distance(&stats[a], &stats[b]);
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, a, b));
                }
            }
        }
        let Some((d, a, b)) = best.filter(|&(d, _, _)| d < tau) else {
            break;
        };
        debug_assert!(d < tau);
        for k in 0..3 {
            stats[a].0[k] += stats[b].0[k];
        }
        stats[a].1 += stats[b].1;
        let nb = std::mem::take(&mut neighbours[b]);
        for x in nb {
            neighbours[x].remove(&b);
            if x != a {
                neighbours[x].insert(a);
                neighbours[a].insert(x);
            }
        }
        neighbours[a].remove(&a);
        parent[b] = a;
        alive.remove(&b);
    }
    let find = |mut x: usize| {
        while parent[x] != x {
            x = parent[x];
        }
        x
    };
    let new_id: BTreeMap<usize, usize> = alive.iter().enumerate().map(|(i, &old)| (old, i)).collect();
    let labels = sp.labels.mapv(|l| new_id[&find(l)]);
    Ok(SuperpixelMap {
        labels,
        count: alive.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatures {
    pub region: usize,
    pub area: usize,
    /// `(row, col)`.
    pub centroid: (f64, f64),
    pub eccentricity: f64,
    pub mean_rgb: [f64; 3],
    pub std_rgb: [f64; 3],
    /// `HISTOGRAM_BINS` bins per channel (R, then G, then B), normalized by
    /// area.
    pub histogram: Vec<f64>,
}

impl RegionFeatures {
    pub fn vector(&self) -> Vec<f64> {
        let mut v = vec![
            self.area as f64,
            self.centroid.0,
            self.centroid.1,
            self.eccentricity,
        ];
        v.extend(self.mean_rgb);
        v.extend(self.std_rgb);
        v.extend(&self.histogram);
        v
    }
}

/// Eccentricity of the ellipse with the same second central moments.
pub fn eccentricity(mu20: f64, mu02: f64, mu11: f64) -> f64 {
    let mid = (mu20 + mu02) / 2.0;
    let rad = (((mu20 - mu02) / 2.0).powi(2) + mu11 * mu11).sqrt();
    let (l1, l2) = (mid + rad, (mid - rad).max(0.0));
    if l1 <= 0.0 {
        0.0
    } else {
        (1.0 - l2 / l1).sqrt()
    }
}

/// Per-region feature vectors for tissue-graph nodes.
pub trait FeatureExtractor {
    fn extract(&self, sp: &SuperpixelMap, image: &RgbImage) -> Result<Vec<Vec<f64>>>;
}

/// Area, centroid, eccentricity, mean/std RGB and colour histogram.
#[derive(Clone, Copy, Debug, Default)]
pub struct HandCrafted;

impl FeatureExtractor for HandCrafted {
    fn extract(&self, sp: &SuperpixelMap, image: &RgbImage) -> Result<Vec<Vec<f64>>> {
        Ok(node_features(sp, image)?.iter().map(RegionFeatures::vector).collect())
    }
}

pub fn node_features(sp: &SuperpixelMap, image: &RgbImage) -> Result<Vec<RegionFeatures>> {
    check_dims(sp, image)?;
    let n = sp.count;
    let areas = sp.areas();
    let mut pos = vec![(0.0, 0.0); n];
    let mut sum = vec![[0.0; 3]; n];
    let mut hist = vec![vec![0.0; 3 * HISTOGRAM_BINS]; n];
    for ((r, c), &l) in sp.labels.indexed_iter() {
        pos[l].0 += r as f64;
        pos[l].1 += c as f64;
        for k in 0..3 {
            let v = image[[r, c, k]];
            sum[l][k] += v as f64;
            hist[l][k * HISTOGRAM_BINS + v as usize * HISTOGRAM_BINS / 256] += 1.0;
        }
    }
    let centroid: Vec<(f64, f64)> = (0..n)
        .map(|l| (pos[l].0 / areas[l] as f64, pos[l].1 / areas[l] as f64))
        .collect();
    let mean: Vec<[f64; 3]> = (0..n).map(|l| sum[l].map(|s| s / areas[l] as f64)).collect();
    let mut moments = vec![(0.0, 0.0, 0.0); n];
    let mut var = vec![[0.0; 3]; n];
    for ((r, c), &l) in sp.labels.indexed_iter() {
        let (dy, dx) = (r as f64 - centroid[l].0, c as f64 - centroid[l].1);
        moments[l].0 += dx * dx;
        moments[l].1 += dy * dy;
        moments[l].2 += dx * dy;
        for k in 0..3 {
            var[l][k] += (image[[r, c, k]] as f64 - mean[l][k]).powi(2);
        }
    }
    Ok((0..n)
        .map(|l| {
            let a = areas[l] as f64;
            RegionFeatures {
                region: l,
                area: areas[l],
                centroid: centroid[l],
                eccentricity: eccentricity(moments[l].0 / a, moments[l].1 / a, moments[l].2 / a),
                mean_rgb: mean[l],
                std_rgb: var[l].map(|v| (v / a).sqrt()),
                histogram: hist[l].iter().map(|h| h / a).collect(),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    pub region: usize,
    pub features: Vec<f64>,
    pub centroid: (f64, f64),
    pub area: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TissueGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: BTreeSet<(usize, usize)>,
}

/// Adjacency graph whose nodes carry geometry only; see [`tissue_graph`] for
/// featured nodes.
pub fn build_rag(sp: &SuperpixelMap) -> TissueGraph {
    let areas = sp.areas();
    let mut pos = vec![(0.0, 0.0); sp.count];
    for ((r, c), &l) in sp.labels.indexed_iter() {
        pos[l].0 += r as f64;
        pos[l].1 += c as f64;
    }
    TissueGraph {
        nodes: (0..sp.count)
            .map(|l| GraphNode {
                region: l,
                features: Vec::new(),
                centroid: (pos[l].0 / areas[l] as f64, pos[l].1 / areas[l] as f64),
                area: areas[l],
            })
            .collect(),
        edges: adjacent_pairs(&sp.labels),
    }
}

pub fn tissue_graph(sp: &SuperpixelMap, image: &RgbImage, extractor: &dyn FeatureExtractor) -> Result<TissueGraph> {
    let mut g = build_rag(sp);
    let feats = extractor.extract(sp, image)?;
    if feats.len() != g.nodes.len() {
        return Err(Error::shape(format!(
            "extractor returned {} feature vectors for {} regions",
            feats.len(),
            g.nodes.len()
        )));
    }
    for (node, f) in g.nodes.iter_mut().zip(feats) {
        node.features = f;
    }
    Ok(g)
}

/// Superpixels after merging, computed on the (optionally normalized) image.
pub fn merged_regions(image: &RgbImage, cfg: &GraphConfig, reference: Option<&RgbImage>) -> Result<SuperpixelMap> {
    cfg.validate()?;
    let normalized = match reference {
        Some(r) => stain_normalize(image, r)?,
        None => image.clone(),
    };
    let n = cfg.n_segments.min(image.dim().0 * image.dim().1);
    let sp = slic_superpixels(&normalized, n, cfg.compactness)?;
    merge_superpixels(&sp, &normalized, cfg.tau)
}

/// Keeps every annotated pixel; unannotated pixels become benign when their
/// merged region's mean saturation (on the original image) exceeds the
/// tissue threshold, otherwise background.
pub fn estimate_benign_mask(
    image: &RgbImage,
    gleason_mask: &SegmentationMask,
    cfg: &GraphConfig,
    reference: Option<&RgbImage>,
) -> Result<SegmentationMask> {
    let (h, w, _) = image.dim();
    if gleason_mask.dim() != (h, w) {
        return Err(Error::shape(format!(
            "mask {:?} does not match image {h}x{w}",
            gleason_mask.dim()
        )));
    }
    let sp = merged_regions(image, cfg, reference)?;
    let mut sat = vec![0.0; sp.count];
    for ((r, c), &l) in sp.labels.indexed_iter() {
        sat[l] += saturation([image[[r, c, 0]], image[[r, c, 1]], image[[r, c, 2]]]);
    }
    let areas = sp.areas();
    let tissue: Vec<bool> = (0..sp.count)
        .map(|l| sat[l] / areas[l] as f64 > TISSUE_SATURATION)
        .collect();
    let labels = Array2::from_shape_fn((h, w), |(r, c)| match gleason_mask.get(r, c) {
        BACKGROUND if tissue[sp.labels[[r, c]]] => BENIGN,
        v => v,
    });
    SegmentationMask::new(labels)
}

/// Fraction of tissue pixels inside each region.
pub fn region_tissue_fraction(sp: &SuperpixelMap, image: &RgbImage) -> Result<Vec<f64>> {
    check_dims(sp, image)?;
    let mut t = vec![0.0; sp.count];
    for ((r, c), &l) in sp.labels.indexed_iter() {
        t[l] += is_tissue_pixel([image[[r, c, 0]], image[[r, c, 1]], image[[r, c, 2]]]) as u8 as f64;
    }
    let areas = sp.areas();
    Ok(t.iter().zip(areas).map(|(t, a)| t / a as f64).collect())
}
