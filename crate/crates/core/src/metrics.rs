//! Pixel-level confusion counts, per-class precision/recall/F1/accuracy
//! computed in exact rational arithmetic, support-weighted averages and
//! fold summaries.
//!
//! Background takes part in overall accuracy only. Per-class rows and the
//! weighted average cover the four tissue classes. Any `0/0` is taken as 0.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use num::{BigInt, BigRational, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::data::{SegmentationMask, BENIGN, CLASS_NAMES, G5, IGNORE};
use crate::error::{Error, Result};

pub const LABELS: usize = 5;
/// Benign, G3, G4, G5.
pub const TISSUE_CLASSES: std::ops::RangeInclusive<u8> = BENIGN..=G5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    pub fn support(&self) -> u64 {
        self.tp + self.fn_
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    /// One-vs-rest counts for labels 0..=4.
    pub classes: [ClassCounts; LABELS],
    pub ignore_count: u64,
    /// Non-ignored pixels.
    pub total: u64,
    pub correct: u64,
}

impl AddAssign<&ConfusionCounts> for ConfusionCounts {
    fn add_assign(&mut self, o: &ConfusionCounts) {
        for (a, b) in self.classes.iter_mut().zip(&o.classes) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
            a.tn += b.tn;
        }
        self.ignore_count += o.ignore_count;
        self.total += o.total;
        self.correct += o.correct;
    }
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(mut self, o: ConfusionCounts) -> ConfusionCounts {
        self += &o;
        self
    }
}

/// Ignored ground-truth pixels are skipped. A prediction of ignore at a
/// supervised pixel counts as a miss for the true class and a hit for none.
pub fn confusion(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<ConfusionCounts> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut out = ConfusionCounts::default();
    // tally (gt, pred) pairs first; pred index 5 stands for ignore
    let mut pairs = [[0u64; LABELS + 1]; LABELS];
    for (&p, &g) in pred.labels().iter().zip(gt.labels().iter()) {
        if g == IGNORE {
            out.ignore_count += 1;
            continue;
        }
        let pi = if p == IGNORE { LABELS } else { p as usize };
        pairs[g as usize][pi] += 1;
    }
    for g in 0..LABELS {
        for p in 0..=LABELS {
            let n = pairs[g][p];
            out.total += n;
            if g == p {
                out.correct += n;
            }
            for (c, cc) in out.classes.iter_mut().enumerate() {
                match (g == c, p == c) {
                    (true, true) => cc.tp += n,
                    (false, true) => cc.fp += n,
                    (true, false) => cc.fn_ += n,
                    (false, false) => cc.tn += n,
                }
            }
        }
    }
    Ok(out)
}

/// Exact per-class metrics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExactMetrics {
    pub precision: BigRational,
    pub recall: BigRational,
    /// From precision and recall.
    pub f1: BigRational,
    /// `2TP / (2TP + FP + FN)`.
    pub dice: BigRational,
    pub accuracy: BigRational,
    pub support: u64,
}

pub fn ratio(num: u64, den: u64) -> BigRational {
    if den == 0 {
        BigRational::zero()
    } else {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }
}

pub fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().expect("metric ratios are finite")
}

pub fn class_metrics(c: &ClassCounts) -> ExactMetrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let sum = &precision + &recall;
    let f1 = if sum.is_zero() {
        BigRational::zero()
    } else {
        BigRational::from_integer(2.into()) * &precision * &recall / sum
    };
    let dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    assert_eq!(f1, dice, "F1 and Dice disagree");
    ExactMetrics {
        precision,
        recall,
        f1,
        dice,
        accuracy: ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn_),
        support: c.support(),
    }
}

/// Metrics for every label, background first.
pub fn precision_recall_f1_acc(counts: &ConfusionCounts) -> Vec<ExactMetrics> {
    counts.classes.iter().map(class_metrics).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExactWeighted {
    pub precision: BigRational,
    pub recall: BigRational,
    pub f1_dice: BigRational,
}

/// `sum(s_c * m_c) / sum(s_c)` over the given classes.
pub fn weighted_average(per_class: &[ExactMetrics]) -> Result<ExactWeighted> {
    let total: u64 = per_class.iter().map(|m| m.support).sum();
    if total == 0 {
        return Err(Error::NoSupport);
    }
    let w = |f: fn(&ExactMetrics) -> &BigRational| {
        per_class
            .iter()
            .map(|m| BigRational::from_integer(m.support.into()) * f(m))
            .fold(BigRational::zero(), |a, b| a + b)
            / BigRational::from_integer(total.into())
    };
    Ok(ExactWeighted {
        precision: w(|m| &m.precision),
        recall: w(|m| &m.recall),
        f1_dice: w(|m| &m.f1),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub label: u8,
    pub precision: f64,
    pub recall: f64,
    pub f1_dice: f64,
    pub accuracy: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedReport {
    pub precision: f64,
    pub recall: f64,
    pub f1_dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Tissue classes only.
    pub classes: Vec<ClassReport>,
    /// `None` when no tissue pixel is supervised.
    pub weighted: Option<WeightedReport>,
    pub overall_accuracy: f64,
    pub counts: ConfusionCounts,
}

impl MetricsReport {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        let exact = precision_recall_f1_acc(&counts);
        let tissue: Vec<ExactMetrics> = TISSUE_CLASSES.map(|c| exact[c as usize].clone()).collect();
        let classes = TISSUE_CLASSES
            .zip(&tissue)
            .map(|(label, m)| ClassReport {
                name: CLASS_NAMES[label as usize].to_string(),
                label,
                precision: to_f64(&m.precision),
                recall: to_f64(&m.recall),
                f1_dice: to_f64(&m.f1),
                accuracy: to_f64(&m.accuracy),
                support: m.support,
            })
            .collect();
        let weighted = weighted_average(&tissue).ok().map(|w| WeightedReport {
            precision: to_f64(&w.precision),
            recall: to_f64(&w.recall),
            f1_dice: to_f64(&w.f1_dice),
        });
        Self {
            classes,
            weighted,
            overall_accuracy: to_f64(&ratio(counts.correct, counts.total)),
            counts,
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{:<10} {:>8} {:>10} {:>8} {:>9} {:>10}",
            "Class", "DSC(F1)", "Precision", "Recall", "Accuracy", "Support"
        )
        .unwrap();
        for c in &self.classes {
            writeln!(
                s,
                "{:<10} {:>8.4} {:>10.4} {:>8.4} {:>9.4} {:>10}",
                c.name, c.f1_dice, c.precision, c.recall, c.accuracy, c.support
            )
            .unwrap();
        }
        match &self.weighted {
            Some(w) => writeln!(
                s,
                "{:<10} {:>8.4} {:>10.4} {:>8.4}",
                "weighted", w.f1_dice, w.precision, w.recall
            )
            .unwrap(),
            None => writeln!(s, "weighted   (no tissue support)").unwrap(),
        }
        writeln!(s, "overall accuracy {:.4}", self.overall_accuracy).unwrap();
        s
    }
}

/// Micro-averaged report over a stream of `(pred, gt)` pairs.
pub fn evaluate<'a, I>(pairs: I) -> Result<MetricsReport>
where
    I: IntoIterator<Item = (&'a SegmentationMask, &'a SegmentationMask)>,
{
    let mut total = ConfusionCounts::default();
    let mut any = false;
    for (p, g) in pairs {
        total += &confusion(p, g)?;
        any = true;
    }
    if !any {
        return Err(Error::EmptyInput);
    }
    Ok(MetricsReport::from_counts(total))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation across folds; 0 for a single fold.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    MeanStd { mean, std }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub f1_dice: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub folds: Vec<usize>,
    pub std_kind: String,
    pub classes: Vec<SummaryRow>,
    pub weighted: SummaryRow,
}

/// Mean and across-fold standard deviation of per-fold reports. Folds with no
/// tissue support are skipped in the weighted row.
pub fn summarize(folds: &[(usize, MetricsReport)]) -> Result<FoldSummary> {
    if folds.is_empty() {
        return Err(Error::EmptyInput);
    }
    let row = |name: &str, pick: &dyn Fn(&MetricsReport) -> Option<(f64, f64, f64)>| {
        let vals: Vec<(f64, f64, f64)> = folds.iter().filter_map(|(_, r)| pick(r)).collect();
        let col = |i: usize| {
            mean_std(
                &vals
                    .iter()
                    .map(|v| [v.0, v.1, v.2][i])
                    .collect::<Vec<_>>(),
            )
        };
        SummaryRow {
            name: name.to_string(),
            f1_dice: col(0),
            precision: col(1),
            recall: col(2),
        }
    };
    let classes = (0..folds[0].1.classes.len())
        .map(|i| {
            row(&folds[0].1.classes[i].name, &|r: &MetricsReport| {
                let c = &r.classes[i];
                Some((c.f1_dice, c.precision, c.recall))
            })
        })
        .collect();
    let weighted = row("weighted", &|r: &MetricsReport| {
        r.weighted.as_ref().map(|w| (w.f1_dice, w.precision, w.recall))
    });
    Ok(FoldSummary {
        folds: folds.iter().map(|(f, _)| *f).collect(),
        std_kind: "sample standard deviation across folds".into(),
        classes,
        weighted,
    })
}

impl FoldSummary {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let cell = |m: &MeanStd| format!("{:.4} ± {:.4}", m.mean, m.std);
        writeln!(s, "{:<10} {:>17} {:>17} {:>17}", "Class", "DSC(F1)", "Precision", "Recall").unwrap();
        for r in self.classes.iter().chain(std::iter::once(&self.weighted)) {
            writeln!(
                s,
                "{:<10} {:>17} {:>17} {:>17}",
                r.name,
                cell(&r.f1_dice),
                cell(&r.precision),
                cell(&r.recall)
            )
            .unwrap();
        }
        writeln!(s, "folds {:?}; ± is the {}", self.folds, self.std_kind).unwrap();
        s
    }
}
