use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TimeSeriesDataset;
use crate::error::{Error, Result};

/// Denominator floor for constant features.
pub const RANGE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRange {
    pub min: f64,
    pub max: f64,
}

impl FeatureRange {
    fn span(&self) -> f64 {
        self.max - self.min
    }

    pub fn forward(&self, x: f64) -> f64 {
        if self.span() < RANGE_EPS {
            0.0
        } else {
            (x - self.min) / self.span().max(RANGE_EPS)
        }
    }

    pub fn inverse(&self, y: f64) -> f64 {
        if self.span() < RANGE_EPS {
            self.min
        } else {
            self.min + y * self.span()
        }
    }
}

/// Per-feature min/max, serialized as `{feature: {min, max}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormalizationState {
    ranges: BTreeMap<String, FeatureRange>,
}

impl NormalizationState {
    pub fn get(&self, feature: &str) -> Option<&FeatureRange> {
        self.ranges.get(feature)
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    fn ranges_for(&self, ds: &TimeSeriesDataset) -> Result<Vec<FeatureRange>> {
        ds.feature_names()
            .iter()
            .map(|name| {
                self.ranges.get(name).copied().ok_or_else(|| {
                    Error::Data(format!("no normalization range for feature {name:?}"))
                })
            })
            .collect()
    }

    /// Maps normalized values back to the original scale.
    pub fn inverse(&self, ds: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
        let ranges = self.ranges_for(ds)?;
        let n = ranges.len();
        let values = ds
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| ranges[i % n].inverse(v))
            .collect();
        ds.with_values(values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let state: NormalizationState = serde_json::from_str(&text)?;
        if let Some((name, r)) = state.ranges.iter().find(|(_, r)| !(r.max >= r.min)) {
            return Err(Error::Data(format!("feature {name:?} has max {} < min {}", r.max, r.min)));
        }
        Ok(state)
    }
}

/// Fits per-feature min/max. Call on the training split only.
pub fn minmax_fit(train: &TimeSeriesDataset) -> NormalizationState {
    let n = train.n_features();
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for t in 0..train.len() {
        for (f, &v) in train.row(t).iter().enumerate() {
            lo[f] = lo[f].min(v);
            hi[f] = hi[f].max(v);
        }
    }
    let ranges = train
        .feature_names()
        .iter()
        .enumerate()
        .map(|(f, name)| {
            let r = if lo[f].is_finite() {
                FeatureRange { min: lo[f], max: hi[f] }
            } else {
                FeatureRange { min: 0.0, max: 0.0 }
            };
            (name.clone(), r)
        })
        .collect();
    NormalizationState { ranges }
}

/// `(x - min) / max(max - min, ε)`; constant features map to 0.
pub fn minmax_apply(ds: &TimeSeriesDataset, state: &NormalizationState) -> Result<TimeSeriesDataset> {
    let ranges = state.ranges_for(ds)?;
    let n = ranges.len();
    let values = ds
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| ranges[i % n].forward(v))
        .collect();
    ds.with_values(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ds(values: Vec<f64>, n: usize) -> TimeSeriesDataset {
        let names = (0..n).map(|i| format!("f{i}")).collect();
        TimeSeriesDataset::new(values, names, None, None).unwrap()
    }

    #[test]
    fn examples() {
        let train = ds(vec![0.0, 3.0, 10.0, 3.0], 2);
        let st = minmax_fit(&train);
        let out = minmax_apply(&ds(vec![5.0, 3.0, 0.0, 7.0], 2), &st).unwrap();
        // feature 1 is constant in training -> pinned to 0
        assert_eq!(out.values(), &[0.5, 0.0, 0.0, 0.0]);
        let tr = minmax_apply(&train, &st).unwrap();
        assert_eq!(tr.column(0), vec![0.0, 1.0]);
    }

    #[test]
    fn json_shape_and_roundtrip() {
        let st = minmax_fit(&ds(vec![1.0, 2.0, 3.0, 5.0], 2));
        let v = serde_json::to_value(&st).unwrap();
        assert_eq!(v["f0"]["min"], 1.0);
        assert_eq!(v["f1"]["max"], 5.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("norm_state.json");
        st.save(&p).unwrap();
        assert_eq!(NormalizationState::load(&p).unwrap(), st);
    }

    proptest! {
        #[test]
        fn train_maps_into_unit_interval_and_inverts(
            rows in 2usize..20,
            seed in proptest::collection::vec(-1e3f64..1e3, 60),
        ) {
            let values: Vec<f64> = seed.into_iter().take(rows * 3).collect();
            let rows = values.len() / 3;
            prop_assume!(rows >= 1);
            let train = ds(values[..rows * 3].to_vec(), 3);
            let st = minmax_fit(&train);
            let norm = minmax_apply(&train, &st).unwrap();
            prop_assert!(norm.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let back = st.inverse(&norm).unwrap();
            for (a, b) in back.values().iter().zip(train.values()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
