use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Predictions;

/// Floor on per-feature error standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// Default trailing window of [`SlidingWindowNormalizer`].
pub const SLIDING_WINDOW: usize = 100;

/// Row-major `T' × N` signed errors `ŷ − y`.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMatrix {
    pub n_features: usize,
    pub data: Vec<f64>,
    /// Timestep of each row.
    pub target_indices: Vec<usize>,
}

impl ErrorMatrix {
    pub fn new(n_features: usize, data: Vec<f64>, target_indices: Vec<usize>) -> Result<Self> {
        if n_features == 0 || data.len() != n_features * target_indices.len() {
            return Err(Error::dim(
                "ErrorMatrix",
                format!("{} values for {} rows of {n_features}", data.len(), target_indices.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "ErrorMatrix" });
        }
        Ok(ErrorMatrix {
            n_features,
            data,
            target_indices,
        })
    }

    pub fn rows(&self) -> usize {
        self.target_indices.len()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_features..(t + 1) * self.n_features]
    }

    fn with_data(&self, data: Vec<f64>) -> ErrorMatrix {
        ErrorMatrix {
            n_features: self.n_features,
            data,
            target_indices: self.target_indices.clone(),
        }
    }
}

/// `E = ŷ − y`
pub fn compute_errors(p: &Predictions) -> Result<ErrorMatrix> {
    if p.values.len() != p.targets.len() {
        return Err(Error::dim(
            "compute_errors",
            format!("{} predictions, {} targets", p.values.len(), p.targets.len()),
        ));
    }
    ErrorMatrix::new(p.n_features, p.errors(), p.target_indices.clone())
}

fn column_stats(e: &ErrorMatrix, rows: std::ops::Range<usize>) -> (Vec<f64>, Vec<f64>) {
    let n = e.n_features;
    let count = rows.len() as f64;
    let mut mean = vec![0.0; n];
    for t in rows.clone() {
        for (m, v) in mean.iter_mut().zip(e.row(t)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; n];
    for t in rows {
        for ((s, v), m) in var.iter_mut().zip(e.row(t)).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    let std = var.into_iter().map(|s| (s / count).sqrt().max(STD_FLOOR)).collect();
    (mean, std)
}

/// Per-feature `(e − μ) / σ` with validation statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ErrorNormalizer {
    pub fn fit(val: &ErrorMatrix) -> Result<Self> {
        if val.rows() == 0 {
            return Err(Error::Data("no validation errors to fit a normalizer".into()));
        }
        let (mean, std) = column_stats(val, 0..val.rows());
        Ok(ErrorNormalizer { mean, std })
    }

    pub fn apply(&self, e: &ErrorMatrix) -> Result<ErrorMatrix> {
        if e.n_features != self.mean.len() {
            return Err(Error::dim(
                "ErrorNormalizer",
                format!("{} features, fitted on {}", e.n_features, self.mean.len()),
            ));
        }
        let n = e.n_features;
        let data = e
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % n]) / self.std[i % n])
            .collect();
        Ok(e.with_data(data))
    }
}

/// Standardizes each row with the statistics of the preceding `window`
/// rows; rows with fewer than two predecessors use the fallback statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlidingWindowNormalizer {
    pub window: usize,
}

impl Default for SlidingWindowNormalizer {
    fn default() -> Self {
        SlidingWindowNormalizer { window: SLIDING_WINDOW }
    }
}

impl SlidingWindowNormalizer {
    pub fn apply(&self, e: &ErrorMatrix, fallback: &ErrorNormalizer) -> Result<ErrorMatrix> {
        if self.window < 2 {
            return Err(Error::Config("sliding window must span at least 2 steps".into()));
        }
        let base = fallback.apply(e)?;
        let n = e.n_features;
        let mut data = base.data;
        for t in 2..e.rows() {
            let (mean, std) = column_stats(e, t.saturating_sub(self.window)..t);
            for f in 0..n {
                data[t * n + f] = (e.data[t * n + f] - mean[f]) / std[f];
            }
        }
        Ok(e.with_data(data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(n: usize, data: Vec<f64>) -> ErrorMatrix {
        let rows = data.len() / n;
        ErrorMatrix::new(n, data, (0..rows).collect()).unwrap()
    }

    #[test]
    fn perfect_predictions_map_to_minus_mu_over_sigma() {
        let norm = ErrorNormalizer {
            mean: vec![0.5, -1.0],
            std: vec![2.0, 0.5],
        };
        let z = norm.apply(&matrix(2, vec![0.0; 4])).unwrap();
        assert_eq!(z.data, vec![-0.25, 2.0, -0.25, 2.0]);
    }

    #[test]
    fn constant_column_is_floored() {
        let e = matrix(2, vec![1.0, 0.0, 1.0, 1.0, 1.0, -1.0]);
        let norm = ErrorNormalizer::fit(&e).unwrap();
        assert_eq!(norm.std[0], STD_FLOOR);
        assert!(norm.apply(&e).unwrap().data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn standard_errors_are_nearly_unchanged() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..20000).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let e = matrix(2, data);
        let z = ErrorNormalizer::fit(&e).unwrap().apply(&e).unwrap();
        assert!(e.max_abs_diff(&z) < 0.1);
    }

    impl ErrorMatrix {
        fn max_abs_diff(&self, o: &ErrorMatrix) -> f64 {
            self.data.iter().zip(&o.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        }
    }

    #[test]
    fn sliding_window_uses_trailing_rows() {
        let e = matrix(1, vec![0.0, 2.0, 0.0, 2.0, 10.0]);
        let fb = ErrorNormalizer {
            mean: vec![0.0],
            std: vec![1.0],
        };
        let z = SlidingWindowNormalizer { window: 2 }.apply(&e, &fb).unwrap();
        assert_eq!(&z.data[..2], &[0.0, 2.0]);
        // rows 2 and 3 see {0, 2}: mean 1, std 1
        assert_eq!(z.data[2], -1.0);
        assert_eq!(z.data[4], 9.0);
    }

    #[test]
    fn ragged_input_is_rejected() {
        assert!(ErrorMatrix::new(2, vec![1.0; 3], vec![0, 1]).is_err());
        assert!(ErrorMatrix::new(1, vec![f64::NAN], vec![0]).is_err());
    }
}
