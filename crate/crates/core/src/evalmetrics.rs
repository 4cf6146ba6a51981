//! Point, coverage and interval metrics on the original scale.
//!
//! Interval and window bounds are closed everywhere.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoding::EncodedTrial;
use crate::error::{structural, Error, Result};
use crate::models::{interval_from_log_gamma, ModelCheckpoint, PredictionInterval};

/// Truths and predictions, aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedOutcomes {
    truth: Vec<f64>,
    pred: Vec<f64>,
    intervals: Option<Vec<PredictionInterval>>,
}

impl PairedOutcomes {
    pub fn new(truth: Vec<f64>, pred: Vec<f64>) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(structural(format!(
                "{} truths but {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        if let Some(t) = truth.iter().find(|t| !(**t >= 0.0) || !t.is_finite()) {
            return Err(Error::Data(format!("truth values must be finite and nonnegative, got {t}")));
        }
        if pred.iter().any(|p| !p.is_finite()) {
            return Err(Error::Data("predictions must be finite".into()));
        }
        Ok(Self {
            truth,
            pred,
            intervals: None,
        })
    }

    pub fn with_intervals(mut self, intervals: Vec<PredictionInterval>) -> Result<Self> {
        if intervals.len() != self.truth.len() {
            return Err(structural("one interval per outcome is required"));
        }
        self.intervals = Some(intervals);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn truth(&self) -> &[f64] {
        &self.truth
    }

    pub fn pred(&self) -> &[f64] {
        &self.pred
    }

    fn abs_errors(&self) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Err(structural("metrics need at least one outcome"));
        }
        Ok(self.truth.iter().zip(&self.pred).map(|(t, p)| (t - p).abs()).collect())
    }
}

/// Median with the two middle values averaged for even counts.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(structural("median of an empty list"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Ok(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

pub fn mae(p: &PairedOutcomes) -> Result<f64> {
    let e = p.abs_errors()?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

pub fn medae(p: &PairedOutcomes) -> Result<f64> {
    median(&p.abs_errors()?)
}

pub fn r2(p: &PairedOutcomes) -> Result<f64> {
    if p.len() < 2 {
        return Err(Error::UndefinedMetric("R² needs at least two outcomes".into()));
    }
    let mean = p.truth.iter().sum::<f64>() / p.len() as f64;
    let ss_tot: f64 = p.truth.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedMetric("R² is undefined when all truths are equal".into()));
    }
    let ss_res: f64 = p.truth.iter().zip(&p.pred).map(|(t, y)| (t - y).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Fraction of outcomes within a window of `window` centred on the
/// prediction, i.e. |truth − prediction| ≤ window/2.
pub fn window_coverage(p: &PairedOutcomes, window: f64) -> Result<f64> {
    if !(window > 0.0) {
        return Err(Error::Usage(format!("window must be positive, got {window}")));
    }
    let e = p.abs_errors()?;
    Ok(e.iter().filter(|&&x| x <= window / 2.0).count() as f64 / e.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalMetrics {
    pub level: f64,
    pub accuracy: f64,
    pub median_width: f64,
}

pub fn interval_metrics(p: &PairedOutcomes) -> Result<IntervalMetrics> {
    let iv = p
        .intervals
        .as_ref()
        .ok_or_else(|| structural("interval metrics need prediction intervals"))?;
    if iv.is_empty() {
        return Err(structural("metrics need at least one outcome"));
    }
    let inside = iv.iter().zip(&p.truth).filter(|(i, t)| i.contains(**t)).count();
    let widths: Vec<f64> = iv.iter().map(|i| i.width()).collect();
    Ok(IntervalMetrics {
        level: iv[0].level,
        accuracy: inside as f64 / iv.len() as f64,
        median_width: median(&widths)?,
    })
}

/// The JSON metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub r2: Option<f64>,
    pub medae: f64,
    pub coverage_6mo: f64,
    pub interval: Option<IntervalMetrics>,
}

/// R² is left out (null) when it is undefined.
pub fn metrics_report(p: &PairedOutcomes) -> Result<MetricsReport> {
    let r2 = match r2(p) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(msg)) => {
            log::warn!("{msg}");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        mae: mae(p)?,
        r2,
        medae: medae(p)?,
        coverage_6mo: window_coverage(p, 6.0)?,
        interval: p.intervals.as_ref().map(|_| interval_metrics(p)).transpose()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub significance: f64,
    pub level: f64,
    pub accuracy: f64,
    pub median_width: f64,
}

/// Significance levels 0.05, 0.10, …, 0.95.
pub fn default_significance_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

/// Interval accuracy and median width of a Gamma-head model at each
/// significance level of `grid`.
pub fn calibration_sweep(
    checkpoint: &ModelCheckpoint,
    inputs: &[EncodedTrial],
    truth: &[f64],
    grid: &[f64],
) -> Result<Vec<CalibrationRow>> {
    let dists = checkpoint.predict_distribution_many(inputs)?;
    let base = PairedOutcomes::new(truth.to_vec(), checkpoint.predict_point_many(inputs)?)?;
    grid.iter()
        .map(|&significance| {
            let intervals = dists
                .iter()
                .map(|d| interval_from_log_gamma(d, significance))
                .collect::<Result<Vec<_>>>()?;
            let m = interval_metrics(&base.clone().with_intervals(intervals)?)?;
            Ok(CalibrationRow {
                significance,
                level: 1.0 - significance,
                accuracy: m.accuracy,
                median_width: m.median_width,
            })
        })
        .collect()
}

pub const CALIBRATION_CSV_HEADER: &str = "significance,level,accuracy,median_width";

pub fn calibration_csv(rows: &[CalibrationRow]) -> String {
    let mut out = String::from(CALIBRATION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.significance, r.level, r.accuracy, r.median_width);
    }
    out
}
