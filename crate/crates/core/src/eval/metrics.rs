use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use super::EvalError;
use crate::detect::DetectionReport;
use crate::scalar::Scalar;

/// Confusion counts. Unparseable verdicts and failed contracts are kept out
/// of the four cells.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub unparseable: u64,
    pub errored: u64,
}

impl Confusion {
    pub fn record(&mut self, actual_ponzi: bool, predicted: bool) {
        match (actual_ponzi, predicted) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fp += 1,
        }
    }

    pub fn scored(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Rates are `None` when their denominator is empty (no positives or no
/// negatives in the scored set).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics<T> {
    #[serde(flatten)]
    pub counts: Confusion,
    pub tpr: Option<T>,
    pub tnr: Option<T>,
    pub fpr: Option<T>,
    pub fnr: Option<T>,
    pub bac: Option<T>,
}

pub fn balanced_accuracy<T: Scalar>(tpr: T, tnr: T) -> T {
    (tpr + tnr) * T::half()
}

impl<T: Scalar> Metrics<T> {
    pub fn from_counts(counts: Confusion) -> Self {
        let tpr = T::ratio(counts.tp, counts.tp + counts.fn_);
        let tnr = T::ratio(counts.tn, counts.tn + counts.fp);
        Metrics {
            counts,
            tpr,
            tnr,
            fpr: tnr.map(|r| T::one() - r),
            fnr: tpr.map(|r| T::one() - r),
            bac: tpr.zip(tnr).map(|(p, n)| balanced_accuracy(p, n)),
        }
    }
}

fn label_of(manifest: &DatasetManifest, report: &DetectionReport) -> Result<bool, EvalError> {
    manifest
        .get(&report.contract_id)
        .map(|e| e.label.is_ponzi())
        .ok_or_else(|| EvalError::LabelMismatch(report.contract_id.clone()))
}

/// Per-contract metrics over the majority verdict of each report.
pub fn compute_metrics<T: Scalar>(
    manifest: &DatasetManifest,
    reports: &[DetectionReport],
) -> Result<Metrics<T>, EvalError> {
    let mut c = Confusion::default();
    for r in reports {
        let actual = label_of(manifest, r)?;
        if r.error.is_some() && r.runs.is_empty() {
            c.errored += 1;
            continue;
        }
        match r.final_verdict {
            Some(v) => c.record(actual, v),
            None => c.unparseable += 1,
        }
    }
    Ok(Metrics::from_counts(c))
}

/// Metrics counting every run as its own prediction, the reading in which
/// repeated runs are averaged rather than voted.
pub fn compute_run_metrics<T: Scalar>(
    manifest: &DatasetManifest,
    reports: &[DetectionReport],
) -> Result<Metrics<T>, EvalError> {
    let mut c = Confusion::default();
    for r in reports {
        let actual = label_of(manifest, r)?;
        if r.error.is_some() && r.runs.is_empty() {
            c.errored += 1;
        }
        for run in &r.runs {
            match run.verdict {
                Some(v) => c.record(actual, v),
                None => c.unparseable += 1,
            }
        }
    }
    Ok(Metrics::from_counts(c))
}
