//! Brute-force references shared by the property suites and the acceptance
//! run.

use std::collections::BTreeSet;

use hvmunet::data::{RgbImage, SegmentationMask, BACKGROUND, BENIGN, G3, G4, G5, IGNORE};
use hvmunet::metrics::{confusion, evaluate, precision_recall_f1_acc, to_f64, weighted_average, ExactMetrics};
use hvmunet::tissue_graph::SuperpixelMap;
use ndarray::{Array2, Array3};
use num::{BigInt, BigRational, Zero};
use rand::Rng;

use super::rng;

pub const VOTES: [u8; 5] = [BACKGROUND, BENIGN, G3, G4, G5];

/// Modal vote with ties to the higher label, by direct counting.
pub fn vote_oracle(votes: &[u8]) -> u8 {
    let mut best: Option<(usize, u8)> = None;
    for &cand in &VOTES {
        let n = votes.iter().filter(|&&v| v == cand).count();
        if n == 0 {
            continue;
        }
        match best {
            Some((bn, _)) if bn > n => {}
            // equal counts: `cand` is scanned in increasing order, so it wins
            _ => best = Some((n, cand)),
        }
    }
    best.map_or(IGNORE, |(_, l)| l)
}

/// Every `size`-window start on the stride grid, plus the flush window.
pub fn window_oracle(dim: usize, size: usize, stride: usize) -> Vec<usize> {
    if dim < size {
        return Vec::new();
    }
    (0..=dim - size).filter(|p| p % stride == 0 || *p == dim - size).collect()
}

fn q(n: u64, d: u64) -> BigRational {
    if d == 0 {
        BigRational::zero()
    } else {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }
}

pub struct Tally {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// Straight per-pixel count for one label, skipping ignored ground truth.
pub fn tally(pred: &Array2<u8>, gt: &Array2<u8>, c: u8) -> Tally {
    let mut t = Tally { tp: 0, fp: 0, fn_: 0, tn: 0 };
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if g == IGNORE {
            continue;
        }
        match (p == c, g == c) {
            (true, true) => t.tp += 1,
            (true, false) => t.fp += 1,
            (false, true) => t.fn_ += 1,
            (false, false) => t.tn += 1,
        }
    }
    t
}

pub struct Oracle {
    pub precision: BigRational,
    pub recall: BigRational,
    pub f1: BigRational,
    pub accuracy: BigRational,
    pub support: u64,
}

pub fn metric_oracle(pred: &Array2<u8>, gt: &Array2<u8>, c: u8) -> Oracle {
    let t = tally(pred, gt, c);
    let precision = q(t.tp, t.tp + t.fp);
    let recall = q(t.tp, t.tp + t.fn_);
    let f1 = if (&precision + &recall).is_zero() {
        BigRational::zero()
    } else {
        BigRational::from_integer(2.into()) * &precision * &recall / (&precision + &recall)
    };
    Oracle {
        precision,
        recall,
        f1,
        accuracy: q(t.tp + t.tn, t.tp + t.tn + t.fp + t.fn_),
        support: t.tp + t.fn_,
    }
}

pub fn random_pair(size: usize, seed: u64, classes: &[u8], ignore_rate: f64) -> (SegmentationMask, SegmentationMask) {
    let mut r = rng(seed);
    let mut draw = |allow_ignore: bool| {
        Array2::from_shape_fn((size, size), |_| {
            if allow_ignore && r.gen_bool(ignore_rate) {
                IGNORE
            } else {
                classes[r.gen_range(0..classes.len())]
            }
        })
    };
    let gt = draw(true);
    let pred = draw(true);
    (SegmentationMask::new(pred).unwrap(), SegmentationMask::new(gt).unwrap())
}

/// Panics unless every exact and reported metric equals the oracle.
pub fn check_against_oracle(pred: &SegmentationMask, gt: &SegmentationMask) {
    let counts = confusion(pred, gt).unwrap();
    let exact = precision_recall_f1_acc(&counts);
    for c in 0..5u8 {
        let o = metric_oracle(pred.labels(), gt.labels(), c);
        let m = &exact[c as usize];
        assert_eq!(m.precision, o.precision, "precision {c}");
        assert_eq!(m.recall, o.recall, "recall {c}");
        assert_eq!(m.f1, o.f1, "f1 {c}");
        assert_eq!(m.dice, o.f1, "dice identity {c}");
        assert_eq!(m.accuracy, o.accuracy, "accuracy {c}");
        assert_eq!(m.support, o.support, "support {c}");
    }

    let tissue: Vec<Oracle> = (1..=4).map(|c| metric_oracle(pred.labels(), gt.labels(), c)).collect();
    let total: u64 = tissue.iter().map(|o| o.support).sum();
    let report = evaluate([(pred, gt)]).unwrap();
    let tissue_exact: Vec<ExactMetrics> = exact[1..].to_vec();
    if total == 0 {
        assert!(weighted_average(&tissue_exact).is_err());
        assert!(report.weighted.is_none());
    } else {
        let wavg = |f: &dyn Fn(&Oracle) -> &BigRational| {
            tissue
                .iter()
                .map(|o| BigRational::from_integer(o.support.into()) * f(o))
                .fold(BigRational::zero(), |a, b| a + b)
                / BigRational::from_integer(total.into())
        };
        let w = weighted_average(&tissue_exact).unwrap();
        assert_eq!(w.precision, wavg(&|o| &o.precision));
        assert_eq!(w.recall, wavg(&|o| &o.recall));
        assert_eq!(w.f1_dice, wavg(&|o| &o.f1));
        let rw = report.weighted.as_ref().unwrap();
        assert_eq!(rw.f1_dice, to_f64(&wavg(&|o| &o.f1)));
    }

    let supervised = gt.labels().iter().filter(|&&g| g != IGNORE).count() as u64;
    let correct = pred
        .labels()
        .iter()
        .zip(gt.labels().iter())
        .filter(|(p, g)| **g != IGNORE && p == g)
        .count() as u64;
    assert_eq!(report.overall_accuracy, to_f64(&q(correct, supervised)));
    assert_eq!(counts.ignore_count, (gt.labels().len() as u64) - supervised);
    for (cr, o) in report.classes.iter().zip(&tissue) {
        assert_eq!(cr.f1_dice, to_f64(&o.f1));
        assert_eq!(cr.precision, to_f64(&o.precision));
        assert_eq!(cr.recall, to_f64(&o.recall));
        assert_eq!(cr.support, o.support);
        for v in [cr.f1_dice, cr.precision, cr.recall, cr.accuracy] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

/// Smooth-ish random image: a few coloured rectangles plus pixel noise.
pub fn random_image(h: usize, w: usize, seed: u64) -> RgbImage {
    let mut r = rng(seed);
    let mut img = Array3::from_elem((h, w, 3), 255u8);
    for _ in 0..r.gen_range(2..7) {
        let (r0, c0) = (r.gen_range(0..h), r.gen_range(0..w));
        let (r1, c1) = (r.gen_range(r0..h) + 1, r.gen_range(c0..w) + 1);
        let col = [r.gen_range(0..=255u8), r.gen_range(0..=255u8), r.gen_range(0..=255u8)];
        for y in r0..r1 {
            for x in c0..c1 {
                for k in 0..3 {
                    img[[y, x, k]] = col[k];
                }
            }
        }
    }
    for v in img.iter_mut() {
        *v = (*v as i32 + r.gen_range(-10..=10)).clamp(0, 255) as u8;
    }
    img
}

/// Every label in range occurs and each label's pixels form exactly one
/// 4-connected component (flood fill).
pub fn assert_partition(sp: &SuperpixelMap) {
    let (h, w) = sp.dim();
    let mut seen = vec![0usize; sp.count];
    for &l in sp.labels.iter() {
        assert!(l < sp.count);
        seen[l] += 1;
    }
    assert!(seen.iter().all(|&n| n > 0));
    let mut visited = Array2::from_elem((h, w), false);
    let mut components = 0;
    for r0 in 0..h {
        for c0 in 0..w {
            if visited[[r0, c0]] {
                continue;
            }
            components += 1;
            let l = sp.labels[[r0, c0]];
            let mut stack = vec![(r0, c0)];
            visited[[r0, c0]] = true;
            while let Some((r, c)) = stack.pop() {
                let mut push = |nr: usize, nc: usize| {
                    if !visited[[nr, nc]] && sp.labels[[nr, nc]] == l {
                        visited[[nr, nc]] = true;
                        stack.push((nr, nc));
                    }
                };
                if r > 0 {
                    push(r - 1, c);
                }
                if r + 1 < h {
                    push(r + 1, c);
                }
                if c > 0 {
                    push(r, c - 1);
                }
                if c + 1 < w {
                    push(r, c + 1);
                }
            }
        }
    }
    assert_eq!(components, sp.count, "some region is split");
    sp.validate().unwrap();
}

/// All unordered label pairs that touch across a horizontal or vertical
/// pixel boundary, by scanning every pixel's four neighbours.
pub fn boundary_pairs(labels: &Array2<usize>) -> BTreeSet<(usize, usize)> {
    let (h, w) = labels.dim();
    let mut out = BTreeSet::new();
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                    continue;
                }
                let a = labels[[r as usize, c as usize]];
                let b = labels[[nr as usize, nc as usize]];
                if a != b {
                    out.insert((a.min(b), a.max(b)));
                }
            }
        }
    }
    out
}
