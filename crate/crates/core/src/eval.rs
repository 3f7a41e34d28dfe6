//! Pointwise detection metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn confusion(flags: &[bool], labels: &[bool]) -> Result<ConfusionCounts> {
    if flags.len() != labels.len() {
        return Err(Error::Data(format!("{} flags for {} labels", flags.len(), labels.len())));
    }
    let mut c = ConfusionCounts::default();
    for (&f, &l) in flags.iter().zip(labels) {
        match (f, l) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Metrics { precision, recall, f1 }
}

/// Marks every step of a labelled segment as flagged when any step in it is.
pub fn point_adjust(flags: &[bool], labels: &[bool]) -> Result<Vec<bool>> {
    if flags.len() != labels.len() {
        return Err(Error::Data(format!("{} flags for {} labels", flags.len(), labels.len())));
    }
    let mut out = flags.to_vec();
    let mut t = 0;
    while t < labels.len() {
        if !labels[t] {
            t += 1;
            continue;
        }
        let start = t;
        while t < labels.len() && labels[t] {
            t += 1;
        }
        if flags[start..t].iter().any(|&f| f) {
            out[start..t].iter_mut().for_each(|f| *f = true);
        }
    }
    Ok(out)
}

/// The metrics file written by the evaluate command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
    pub n_anomalies: usize,
}
