//! Ingest, cleaning, normalization, chronological splits, sliding windows and
//! synthetic labelled datasets.

mod ingest;
mod normalize;
mod split;
mod synth;
mod windows;

pub use ingest::{load_csv, write_csv, CsvSchema};
pub use normalize::{minmax_apply, minmax_fit, FeatureRange, NormalizationState, RANGE_EPS};
pub use split::{split, SplitRatios};
pub use synth::{synth_generate, ChannelKind, SynthSpec};
pub use windows::{make_windows, WindowBatch, Windows};

use crate::error::{Error, Result};

/// A `T×N` multivariate series stored row-major (one row per timestep).
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    values: Vec<f64>,
    feature_names: Vec<String>,
    labels: Option<Vec<bool>>,
    timestamps: Option<Vec<String>>,
}

impl TimeSeriesDataset {
    pub fn new(
        values: Vec<f64>,
        feature_names: Vec<String>,
        labels: Option<Vec<bool>>,
        timestamps: Option<Vec<String>>,
    ) -> Result<Self> {
        let n = feature_names.len();
        if n == 0 {
            return Err(Error::Data("dataset has no feature columns".into()));
        }
        if !values.len().is_multiple_of(n) {
            return Err(Error::Data(format!(
                "{} values do not fill rows of {n} features",
                values.len()
            )));
        }
        let t = values.len() / n;
        let mut seen = std::collections::HashSet::new();
        for name in &feature_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Data(format!("duplicate feature name {name:?}")));
            }
        }
        if let Some(l) = &labels {
            if l.len() != t {
                return Err(Error::Data(format!("{} labels for {t} rows", l.len())));
            }
        }
        if let Some(ts) = &timestamps {
            if ts.len() != t {
                return Err(Error::Data(format!("{} timestamps for {t} rows", ts.len())));
            }
        }
        Ok(TimeSeriesDataset {
            values,
            feature_names,
            labels,
            timestamps,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.feature_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let n = self.n_features();
        &self.values[t * n..(t + 1) * n]
    }

    pub fn value(&self, t: usize, feature: usize) -> f64 {
        self.values[t * self.n_features() + feature]
    }

    pub fn labels(&self) -> Option<&[bool]> {
        self.labels.as_deref()
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    pub fn column(&self, feature: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.value(t, feature)).collect()
    }

    /// Rows `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> TimeSeriesDataset {
        let n = self.n_features();
        TimeSeriesDataset {
            values: self.values[start * n..end * n].to_vec(),
            feature_names: self.feature_names.clone(),
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
            timestamps: self.timestamps.as_ref().map(|t| t[start..end].to_vec()),
        }
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<TimeSeriesDataset> {
        TimeSeriesDataset::new(
            values,
            self.feature_names.clone(),
            self.labels.clone(),
            self.timestamps.clone(),
        )
    }

    pub fn has_missing(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }
}

/// Fills missing (NaN) cells: fully-missing columns become 0, partially
/// missing cells take the mean of the observed values in their column.
pub fn clean(ds: &TimeSeriesDataset) -> TimeSeriesDataset {
    let (t, n) = (ds.len(), ds.n_features());
    let mut values = ds.values.clone();
    for f in 0..n {
        let observed: Vec<f64> = (0..t)
            .map(|r| values[r * n + f])
            .filter(|v| !v.is_nan())
            .collect();
        let fill = if observed.is_empty() {
            0.0
        } else {
            observed.iter().sum::<f64>() / observed.len() as f64
        };
        for r in 0..t {
            let v = &mut values[r * n + f];
            if v.is_nan() {
                *v = fill;
            }
        }
    }
    TimeSeriesDataset {
        values,
        ..ds.clone()
    }
}
