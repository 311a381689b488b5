//! Challenge metric suite, computed from a [`ConfusionMatrix`] only.
//!
//! Specificity is the macro average of one-vs-rest `TN / (TN + FP)`. The
//! challenge never published its definition; macro averaging is our reading.
//!
//! Degenerate denominators do not fail: the metric evaluates to 0 and the
//! returned [`MetricValue`] carries `degenerate = true`, so a batch report is
//! always produced. A matrix with no samples is an error for every metric.

use crate::confusion::ConfusionMatrix;
use crate::error::{config, Error, Result};
use crate::types::Task;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    pub degenerate: bool,
    /// Classes left out of a per-class average because their denominator was 0.
    pub skipped_classes: Vec<usize>,
}

impl MetricValue {
    fn ok(value: f64) -> Self {
        Self { value, degenerate: false, skipped_classes: Vec::new() }
    }

    fn degenerate() -> Self {
        Self { value: 0.0, degenerate: true, skipped_classes: Vec::new() }
    }
}

fn require_samples(cm: &ConfusionMatrix, metric: &str) -> Result<f64> {
    match cm.total() {
        0 => Err(Error::UndefinedMetric(format!("{metric} of an empty confusion matrix"))),
        s => Ok(s as f64),
    }
}

/// Micro-averaged F1. For single-label multiclass data this is accuracy.
pub fn micro_f1(cm: &ConfusionMatrix) -> Result<MetricValue> {
    let s = require_samples(cm, "micro-F1")?;
    Ok(MetricValue::ok(cm.trace() as f64 / s))
}

pub fn specificity(cm: &ConfusionMatrix) -> Result<MetricValue> {
    let s = require_samples(cm, "specificity")?;
    let rows = cm.true_counts();
    let cols = cm.predicted_counts();
    let mut skipped = Vec::new();
    let mut per_class = Vec::new();
    for k in 0..cm.num_classes() {
        let tp = cm.get(k, k) as f64;
        let fp = cols[k] as f64 - tp;
        let tn = s - rows[k] as f64 - fp;
        if tn + fp == 0.0 {
            skipped.push(k);
        } else {
            per_class.push(tn / (tn + fp));
        }
    }
    if per_class.is_empty() {
        return Ok(MetricValue { skipped_classes: skipped, ..MetricValue::degenerate() });
    }
    Ok(MetricValue {
        value: per_class.iter().sum::<f64>() / per_class.len() as f64,
        degenerate: false,
        skipped_classes: skipped,
    })
}

/// Gorodkin's Rk, the multiclass Matthews correlation coefficient.
pub fn rk_correlation(cm: &ConfusionMatrix) -> Result<MetricValue> {
    let s = require_samples(cm, "Rk correlation")?;
    let c = cm.trace() as f64;
    let p: Vec<f64> = cm.predicted_counts().into_iter().map(|v| v as f64).collect();
    let t: Vec<f64> = cm.true_counts().into_iter().map(|v| v as f64).collect();
    let pt: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
    let pp: f64 = p.iter().map(|v| v * v).sum();
    let tt: f64 = t.iter().map(|v| v * v).sum();
    let denom = ((s * s - pp) * (s * s - tt)).sqrt();
    if denom == 0.0 {
        return Ok(MetricValue::degenerate());
    }
    Ok(MetricValue::ok(((c * s - pt) / denom).clamp(-1.0, 1.0)))
}

pub fn cohens_kappa(cm: &ConfusionMatrix) -> Result<MetricValue> {
    let s = require_samples(cm, "Cohen's kappa")?;
    let p_o = cm.trace() as f64 / s;
    let p_e: f64 = cm
        .true_counts()
        .iter()
        .zip(cm.predicted_counts())
        .map(|(&r, c)| r as f64 * c as f64)
        .sum::<f64>()
        / (s * s);
    if (1.0 - p_e).abs() < 1e-15 {
        return Ok(MetricValue::degenerate());
    }
    Ok(MetricValue::ok((p_o - p_e) / (1.0 - p_e)))
}

/// Kappa with penalties `(i - j)² / (C - 1)²`; class indices are ranks.
pub fn quadratic_weighted_kappa(cm: &ConfusionMatrix) -> Result<MetricValue> {
    let s = require_samples(cm, "quadratic-weighted kappa")?;
    let n = cm.num_classes();
    if n < 2 {
        return Err(config("quadratic-weighted kappa needs at least 2 classes"));
    }
    let rows = cm.true_counts();
    let cols = cm.predicted_counts();
    let scale = ((n - 1) * (n - 1)) as f64;
    let mut observed = 0.0;
    let mut expected = 0.0;
    for (i, &ri) in rows.iter().enumerate() {
        for (j, &cj) in cols.iter().enumerate() {
            let w = ((i as f64 - j as f64).powi(2)) / scale;
            observed += w * cm.get(i, j) as f64 / s;
            expected += w * (ri as f64 / s) * (cj as f64 / s);
        }
    }
    if expected == 0.0 {
        return Ok(MetricValue::degenerate());
    }
    Ok(MetricValue::ok(1.0 - observed / expected))
}

/// Mean per-class recall over classes that occur in the truth.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<MetricValue> {
    require_samples(cm, "balanced accuracy")?;
    let rows = cm.true_counts();
    let mut skipped = Vec::new();
    let mut recalls = Vec::new();
    for (k, &r) in rows.iter().enumerate() {
        if r == 0 {
            skipped.push(k);
        } else {
            recalls.push(cm.get(k, k) as f64 / r as f64);
        }
    }
    Ok(MetricValue {
        value: recalls.iter().sum::<f64>() / recalls.len() as f64,
        degenerate: false,
        skipped_classes: skipped,
    })
}

/// Full metric report for one task. Components are optional so that a report
/// can also be assembled from published numbers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub task: Option<Task>,
    pub micro_f1: Option<f64>,
    pub specificity: Option<f64>,
    pub rk_correlation: Option<f64>,
    pub cohens_kappa: Option<f64>,
    pub qw_kappa: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub average: Option<f64>,
    /// Names of metrics that hit a degenerate denominator or skipped classes.
    pub flags: Vec<String>,
}

impl MetricReport {
    /// Evaluates all six metrics and the challenge average.
    pub fn evaluate(cm: &ConfusionMatrix, task: Task) -> Result<Self> {
        let mut flags = Vec::new();
        let mut take = |name: &str, m: MetricValue| {
            if m.degenerate {
                flags.push(format!("{name}:degenerate"));
            }
            if !m.skipped_classes.is_empty() {
                let ks: Vec<String> = m.skipped_classes.iter().map(|k| k.to_string()).collect();
                flags.push(format!("{name}:skipped={}", ks.join("/")));
            }
            Some(m.value)
        };
        let mut report = MetricReport {
            task: Some(task),
            micro_f1: take("micro_f1", micro_f1(cm)?),
            specificity: take("specificity", specificity(cm)?),
            rk_correlation: take("rk_correlation", rk_correlation(cm)?),
            cohens_kappa: take("cohens_kappa", cohens_kappa(cm)?),
            qw_kappa: take("qw_kappa", quadratic_weighted_kappa(cm)?),
            balanced_accuracy: take("balanced_accuracy", balanced_accuracy(cm)?),
            average: None,
            flags: Vec::new(),
        };
        report.flags = flags;
        report.average = Some(challenge_average(&report)?);
        Ok(report)
    }

    pub fn is_flagged(&self, metric: &str) -> bool {
        self.flags.iter().any(|f| f.starts_with(&format!("{metric}:")))
    }
}

/// Leaderboard score: T1 averages (F1, Rk, specificity); T2 averages
/// (quadratic-weighted kappa, F1, Rk, specificity).
pub fn challenge_average(report: &MetricReport) -> Result<f64> {
    let task = report.task.ok_or_else(|| config("metric report has no task"))?;
    let need = |name: &str, v: Option<f64>| {
        v.ok_or_else(|| config(format!("challenge average for {task} needs {name}")))
    };
    let mut parts = vec![
        need("micro_f1", report.micro_f1)?,
        need("rk_correlation", report.rk_correlation)?,
        need("specificity", report.specificity)?,
    ];
    if task == Task::T2 {
        parts.push(need("qw_kappa", report.qw_kappa)?);
    }
    Ok(parts.iter().sum::<f64>() / parts.len() as f64)
}
