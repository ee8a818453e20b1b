//! Scoring: top-1 error, baseline-normalized mean error (mCE / mDE) and
//! expected calibration error.
//!
//! Errors are fractions in `[0, 1]` everywhere; percentages only appear at
//! the reporting boundary.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::argmax;

pub const DEFAULT_ECE_BINS: usize = 15;

/// AlexNet top-1 errors on the fifteen ImageNet-C test corruptions,
/// severity-averaged (single severity column labelled 0).
pub const ALEXNET_IMAGENET_C_CSV: &str = include_str!("../data/alexnet_imagenet_c_v1.csv");
/// The four ImageNet-C hold-out corruptions, same layout.
pub const ALEXNET_IMAGENET_C_HOLDOUT_CSV: &str = include_str!("../data/alexnet_imagenet_c_holdout_v1.csv");

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Row {
    shift: String,
    severity: u32,
    error: f64,
}

/// A complete `(shift, severity) -> error` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorGrid {
    shifts: Vec<String>,
    severities: Vec<u32>,
    values: BTreeMap<(String, u32), f64>,
}

impl ErrorGrid {
    pub fn from_entries(entries: impl IntoIterator<Item = (String, u32, f64)>) -> Result<Self> {
        let mut shifts = Vec::new();
        let mut severities = Vec::new();
        let mut values = BTreeMap::new();
        for (shift, sev, err) in entries {
            if !(0.0..=1.0).contains(&err) {
                return Err(Error::Malformed(format!("error {err} for {shift}@{sev} outside [0, 1]")));
            }
            if !shifts.contains(&shift) {
                shifts.push(shift.clone());
            }
            if !severities.contains(&sev) {
                severities.push(sev);
            }
            if values.insert((shift.clone(), sev), err).is_some() {
                return Err(Error::Malformed(format!("duplicate entry {shift}@{sev}")));
            }
        }
        if values.is_empty() {
            return Err(Error::Empty("error table"));
        }
        if values.len() != shifts.len() * severities.len() {
            return Err(Error::Malformed(format!(
                "incomplete grid: {} entries for {} shifts x {} severities",
                values.len(),
                shifts.len(),
                severities.len()
            )));
        }
        Ok(Self {
            shifts,
            severities,
            values,
        })
    }

    pub fn shifts(&self) -> &[String] {
        &self.shifts
    }

    pub fn severities(&self) -> &[u32] {
        &self.severities
    }

    pub fn get(&self, shift: &str, severity: u32) -> Option<f64> {
        self.values.get(&(shift.to_string(), severity)).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, u32, f64)> {
        self.shifts.iter().flat_map(move |s| {
            self.severities
                .iter()
                .map(move |&v| (s.as_str(), v, self.values[&(s.clone(), v)]))
        })
    }

    /// Mean over every cell.
    pub fn mean(&self) -> f64 {
        self.values.values().sum::<f64>() / self.values.len() as f64
    }

    fn severity_sum(&self, shift: &str) -> f64 {
        // sorted by severity, independent of insertion order
        self.values
            .range((shift.to_string(), 0)..=(shift.to_string(), u32::MAX))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn read_csv_str(text: &str) -> Result<Self> {
        Self::from_reader(csv::Reader::from_reader(text.as_bytes()))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(csv::Reader::from_path(path)?)
    }

    fn from_reader<R: std::io::Read>(mut r: csv::Reader<R>) -> Result<Self> {
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["shift", "severity", "error"] {
            return Err(Error::Malformed(format!("expected header shift,severity,error, got {headers:?}")));
        }
        let rows = r.deserialize::<Row>().collect::<std::result::Result<Vec<_>, _>>()?;
        Self::from_entries(rows.into_iter().map(|r| (r.shift, r.severity, r.error)))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for (shift, severity, error) in self.entries() {
            w.serialize(Row {
                shift: shift.to_string(),
                severity,
                error,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Model errors per shift and severity.
pub type ErrorTable = ErrorGrid;

/// Baseline errors used as per-shift normalizers; strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizerTable(ErrorGrid);

impl NormalizerTable {
    pub fn new(grid: ErrorGrid) -> Result<Self> {
        if let Some((s, v, e)) = grid.entries().find(|&(_, _, e)| e <= 0.0) {
            return Err(Error::Malformed(format!("normalizer {s}@{v} must be positive, got {e}")));
        }
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &ErrorGrid {
        &self.0
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(ErrorGrid::read_csv(path)?)
    }

    pub fn alexnet_imagenet_c() -> Self {
        Self::new(ErrorGrid::read_csv_str(ALEXNET_IMAGENET_C_CSV).expect("shipped table parses"))
            .expect("shipped table is positive")
    }
}

/// Mean over shifts of `sum_s model(c, s) / sum_s baseline(c, s)`.
///
/// Shifts and severities are matched by name, so row order is irrelevant.
/// With a single severity this is the per-domain ratio average (mDE).
pub fn normalized_mean_error(model: &ErrorTable, base: &NormalizerTable) -> Result<f64> {
    let base = base.grid();
    let mut ms: Vec<&String> = model.shifts.iter().collect();
    let mut bs: Vec<&String> = base.shifts.iter().collect();
    ms.sort();
    bs.sort();
    if ms != bs {
        return Err(Error::GridMismatch(format!("shifts {ms:?} vs {bs:?}")));
    }
    let mut mv = model.severities.clone();
    let mut bv = base.severities.clone();
    mv.sort_unstable();
    bv.sort_unstable();
    if mv != bv {
        return Err(Error::GridMismatch(format!("severities {mv:?} vs {bv:?}")));
    }
    // accumulate in a fixed (sorted) shift order so reordering the input
    // cannot change the floating-point result
    let total: f64 = ms.iter().map(|s| model.severity_sum(s) / base.severity_sum(s)).sum();
    Ok(total / ms.len() as f64)
}

/// Per-sample class probabilities with true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    probs: Array2<f64>,
    labels: Vec<usize>,
}

impl PredictionSet {
    pub fn new(probs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("prediction set"));
        }
        if probs.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                what: "prediction rows",
                expected: labels.len(),
                got: probs.nrows(),
            });
        }
        let k = probs.ncols();
        if let Some(&y) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Malformed(format!("label {y} out of range for {k} classes")));
        }
        for row in probs.rows() {
            let sum: f64 = row.sum();
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > 1e-10 {
                return Err(Error::Malformed(format!("invalid probability row {row}")));
            }
        }
        Ok(Self { probs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn predicted(&self) -> Vec<usize> {
        self.probs.rows().into_iter().map(|r| argmax(r.as_slice().expect("row-major"))).collect()
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.probs.rows().into_iter().map(|r| r.fold(0.0f64, |a, &b| a.max(b))).collect()
    }
}

pub fn top1_error(preds: &PredictionSet) -> f64 {
    let wrong = preds.predicted().iter().zip(preds.labels()).filter(|(p, y)| p != y).count();
    wrong as f64 / preds.len() as f64
}

/// Bin of a confidence in `[0, 1]`: bins are `(lo, hi]`, the first also
/// holds 0.
fn bin_index(conf: f64, bins: usize) -> usize {
    let b = (conf * bins as f64).ceil() as isize - 1;
    b.clamp(0, bins as isize - 1) as usize
}

/// Expected calibration error over equal-width confidence bins.
pub fn ece(preds: &PredictionSet, bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::config("ECE needs at least one bin"));
    }
    let mut count = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    for ((conf, pred), &y) in preds.confidences().into_iter().zip(preds.predicted()).zip(preds.labels()) {
        let b = bin_index(conf, bins);
        count[b] += 1;
        conf_sum[b] += conf;
        if pred == y {
            correct[b] += 1;
        }
    }
    let n = preds.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (correct[b] as f64 / nb - conf_sum[b] / nb).abs()
        })
        .sum())
}
