//! Accuracy, macro precision/recall/F1, multi-seed summaries and the
//! paired t-test.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub n_classes: usize,
    pub per_class: Vec<ClassCounts>,
    pub total: usize,
    pub correct: usize,
}

impl ConfusionCounts {
    pub fn tally(gold: &[usize], pred: &[usize], n_classes: usize) -> Result<Self> {
        if gold.len() != pred.len() {
            return Err(Error::LengthMismatch {
                left: gold.len(),
                right: pred.len(),
            });
        }
        if let Some(&bad) = gold.iter().chain(pred).find(|&&l| l >= n_classes) {
            return Err(Error::OutOfRange(format!(
                "label {bad} outside [0, {n_classes})"
            )));
        }
        let mut per_class = vec![ClassCounts::default(); n_classes];
        let mut correct = 0;
        for (&g, &p) in gold.iter().zip(pred) {
            if g == p {
                per_class[g].tp += 1;
                correct += 1;
            } else {
                per_class[p].fp += 1;
                per_class[g].fn_ += 1;
            }
        }
        let total = gold.len();
        for c in &mut per_class {
            c.tn = total - c.tp - c.fp - c.fn_;
        }
        Ok(Self {
            n_classes,
            per_class,
            total,
            correct,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_p: f64,
    pub macro_r: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricsReport {
    pub fn headline(&self) -> [f64; 4] {
        [self.accuracy, self.macro_p, self.macro_r, self.macro_f1]
    }
}

pub const HEADLINE_NAMES: [&str; 4] = ["accuracy", "macro_p", "macro_r", "macro_f1"];

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Macro scores over all `n_classes`, with 0/0 taken as 0.
pub fn score(gold: &[usize], pred: &[usize], n_classes: usize) -> Result<MetricsReport> {
    let counts = ConfusionCounts::tally(gold, pred, n_classes)?;
    let per_class: Vec<ClassMetrics> = counts
        .per_class
        .iter()
        .map(|c| {
            let precision = ratio(c.tp, c.tp + c.fp);
            let recall = ratio(c.tp, c.tp + c.fn_);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support: c.tp + c.fn_,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if n_classes == 0 {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / n_classes as f64
        }
    };
    Ok(MetricsReport {
        accuracy: ratio(counts.correct, counts.total),
        macro_p: mean(|c| c.precision),
        macro_r: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        per_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Stats("cannot summarize zero values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: var.sqrt(),
            max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        })
    }

    /// `mean±std(max)` in percent.
    pub fn percent(&self) -> String {
        format!(
            "{:.2}±{:.2}({:.2})",
            100.0 * self.mean,
            100.0 * self.std,
            100.0 * self.max
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_runs: usize,
    pub accuracy: Summary,
    pub macro_p: Summary,
    pub macro_r: Summary,
    pub macro_f1: Summary,
}

impl AggregateReport {
    pub fn summaries(&self) -> [Summary; 4] {
        [self.accuracy, self.macro_p, self.macro_r, self.macro_f1]
    }
}

pub fn aggregate(reports: &[MetricsReport]) -> Result<AggregateReport> {
    let column = |i: usize| -> Result<Summary> {
        Summary::of(&reports.iter().map(|r| r.headline()[i]).collect::<Vec<_>>())
    };
    Ok(AggregateReport {
        n_runs: reports.len(),
        accuracy: column(0)?,
        macro_p: column(1)?,
        macro_r: column(2)?,
        macro_f1: column(3)?,
    })
}

/// A text table with one row per labelled aggregate.
pub fn format_table(rows: &[(String, AggregateReport)]) -> String {
    let width = rows
        .iter()
        .map(|(n, _)| n.chars().count())
        .max()
        .unwrap_or(0)
        .max(5);
    let mut out = format!("{:<width$}", "model");
    for h in ["Accuracy", "Precision", "Recall", "F1-score"] {
        let _ = write!(out, "  {h:<20}");
    }
    out.push('\n');
    for (name, agg) in rows {
        let _ = write!(out, "{name:<width$}");
        for s in agg.summaries() {
            let _ = write!(out, "  {:<20}", s.percent());
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Two-sided paired t-test on `a[i] - b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Stats(format!("paired t-test needs n >= 2, got {n}")));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let nf = n as f64;
    let mean = diffs.iter().sum::<f64>() / nf;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (nf - 1.0);
    // differences that are constant up to rounding carry no spread
    let scale = diffs.iter().fold(0.0f64, |m, d| m.max(d.abs())).max(f64::MIN_POSITIVE);
    if var.sqrt() <= 1e-12 * scale || var == 0.0 {
        return Err(Error::DegenerateVariance);
    }
    let t = mean / (var / nf).sqrt();
    let df = n - 1;
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Stats(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest { t, p, df })
}
