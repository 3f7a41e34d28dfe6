use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::errors::ErrorMatrix;
use crate::error::{Error, Result};
use crate::eval::{confusion, metrics};

pub const GMM_VARIANCE_FLOOR: f64 = 1e-6;
pub const EM_TOL: f64 = 1e-6;
pub const EM_MAX_ITER: usize = 200;
pub const EM_MAX_RETRIES: usize = 3;
/// Minimum rows per component.
pub const ROWS_PER_COMPONENT: usize = 10;

/// Diagonal-covariance Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmDetector {
    pub weights: Vec<f64>,
    /// `k × N`, row-major.
    pub means: Vec<f64>,
    /// `k × N` variances, row-major.
    pub variances: Vec<f64>,
    pub n_features: usize,
    /// Mean log-likelihood after each EM iteration of the final fit.
    pub log_likelihood: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum KMode {
    /// Lowest BIC over `1..=k_max`.
    Bic { k_max: usize },
    /// Highest validation F1 over `1..=k_max`. Components are fitted on the
    /// rows labelled normal and thresholded at their maximum score.
    F1 { k_max: usize, labels: Vec<bool> },
}

impl Default for KMode {
    fn default() -> Self {
        KMode::Bic { k_max: 4 }
    }
}

impl GmmDetector {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    /// `log w_j + log N(x; μ_j, Σ_j)` for every component.
    fn component_log_densities(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n_features;
        let c = n as f64 * (std::f64::consts::TAU).ln();
        for (j, o) in out.iter_mut().enumerate() {
            let mu = &self.means[j * n..(j + 1) * n];
            let var = &self.variances[j * n..(j + 1) * n];
            let mut q = 0.0;
            let mut logdet = 0.0;
            for f in 0..n {
                q += (x[f] - mu[f]).powi(2) / var[f];
                logdet += var[f].ln();
            }
            *o = self.weights[j].ln() - 0.5 * (c + logdet + q);
        }
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut buf = vec![0.0; self.k()];
        self.component_log_densities(x, &mut buf);
        log_sum_exp(&buf)
    }

    /// Free parameters: weights, means and variances.
    pub fn n_parameters(&self) -> usize {
        self.k() - 1 + 2 * self.k() * self.n_features
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn column_variance(e: &ErrorMatrix) -> Vec<f64> {
    let n = e.n_features;
    let rows = e.rows() as f64;
    (0..n)
        .map(|f| {
            let m = (0..e.rows()).map(|t| e.row(t)[f]).sum::<f64>() / rows;
            let v = (0..e.rows()).map(|t| (e.row(t)[f] - m).powi(2)).sum::<f64>() / rows;
            v.max(GMM_VARIANCE_FLOOR)
        })
        .collect()
}

enum EmOutcome {
    Converged(GmmDetector),
    Collapsed(usize),
}

fn em(e: &ErrorMatrix, mut det: GmmDetector) -> EmOutcome {
    let (n, k, rows) = (e.n_features, det.k(), e.rows());
    let mut resp = vec![0.0; rows * k];
    let mut buf = vec![0.0; k];
    let mut history = Vec::new();
    for _ in 0..EM_MAX_ITER {
        // E-step
        let mut ll = 0.0;
        for t in 0..rows {
            det.component_log_densities(e.row(t), &mut buf);
            let lse = log_sum_exp(&buf);
            ll += lse;
            for j in 0..k {
                resp[t * k + j] = (buf[j] - lse).exp();
            }
        }
        let ll = ll / rows as f64;
        if let Some(&prev) = history.last() {
            history.push(ll);
            if ll - prev < EM_TOL {
                break;
            }
        } else {
            history.push(ll);
        }
        // M-step
        for j in 0..k {
            let nk: f64 = (0..rows).map(|t| resp[t * k + j]).sum();
            if nk < 1e-8 * rows as f64 || nk < 1e-300 {
                return EmOutcome::Collapsed(j);
            }
            det.weights[j] = nk / rows as f64;
            for f in 0..n {
                let mu = (0..rows).map(|t| resp[t * k + j] * e.row(t)[f]).sum::<f64>() / nk;
                let var = (0..rows)
                    .map(|t| resp[t * k + j] * (e.row(t)[f] - mu).powi(2))
                    .sum::<f64>()
                    / nk;
                det.means[j * n + f] = mu;
                det.variances[j * n + f] = var.max(GMM_VARIANCE_FLOOR);
            }
        }
        let total: f64 = det.weights.iter().sum();
        det.weights.iter_mut().for_each(|w| *w /= total);
    }
    det.log_likelihood = history;
    EmOutcome::Converged(det)
}

/// EM from `k` distinct random rows; collapsed components are re-seeded
/// from a random row, at most [`EM_MAX_RETRIES`] times.
pub fn gmm_fit_k(e: &ErrorMatrix, k: usize, seed: u64) -> Result<GmmDetector> {
    let (n, rows) = (e.n_features, e.rows());
    if k == 0 {
        return Err(Error::Config("GMM needs at least one component".into()));
    }
    if rows < ROWS_PER_COMPONENT * k {
        return Err(Error::Data(format!(
            "GMM with {k} components needs {} rows, got {rows}",
            ROWS_PER_COMPONENT * k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let var = column_variance(e);
    let mut means = Vec::with_capacity(k * n);
    for i in sample(&mut rng, rows, k) {
        means.extend_from_slice(e.row(i));
    }
    let mut det = GmmDetector {
        weights: vec![1.0 / k as f64; k],
        means,
        variances: var.repeat(k),
        n_features: n,
        log_likelihood: Vec::new(),
    };
    for _ in 0..=EM_MAX_RETRIES {
        match em(e, det.clone()) {
            EmOutcome::Converged(d) => return Ok(d),
            EmOutcome::Collapsed(j) => {
                let r = rng.gen_range(0..rows);
                det.means[j * n..(j + 1) * n].copy_from_slice(e.row(r));
                det.variances[j * n..(j + 1) * n].copy_from_slice(&var);
                det.weights = vec![1.0 / k as f64; k];
            }
        }
    }
    Err(Error::Data(format!("GMM with {k} components collapsed after {EM_MAX_RETRIES} re-initializations")))
}

/// `−2·LL + p·ln(T)`
pub fn bic(det: &GmmDetector, e: &ErrorMatrix) -> f64 {
    let ll: f64 = (0..e.rows()).map(|t| det.log_density(e.row(t))).sum();
    -2.0 * ll + det.n_parameters() as f64 * (e.rows() as f64).ln()
}

pub fn gmm_fit(val: &ErrorMatrix, mode: &KMode, seed: u64) -> Result<GmmDetector> {
    match mode {
        KMode::Bic { k_max } => {
            let mut best: Option<(f64, GmmDetector)> = None;
            for k in 1..=(*k_max).max(1) {
                if val.rows() < ROWS_PER_COMPONENT * k && k > 1 {
                    break;
                }
                let det = match gmm_fit_k(val, k, seed) {
                    Ok(d) => d,
                    Err(err) if k == 1 => return Err(err),
                    Err(_) => continue,
                };
                let b = bic(&det, val);
                if best.as_ref().is_none_or(|(bb, _)| b < *bb) {
                    best = Some((b, det));
                }
            }
            best.map(|(_, d)| d).ok_or_else(|| Error::Data("no GMM could be fitted".into()))
        }
        KMode::F1 { k_max, labels } => {
            if labels.len() != val.rows() {
                return Err(Error::Data(format!(
                    "{} validation labels for {} rows",
                    labels.len(),
                    val.rows()
                )));
            }
            if !labels.iter().any(|&l| l) {
                return Err(Error::Data("F1 selection needs anomalous validation rows".into()));
            }
            let keep: Vec<usize> = (0..val.rows()).filter(|&t| !labels[t]).collect();
            let normal = ErrorMatrix::new(
                val.n_features,
                keep.iter().flat_map(|&t| val.row(t).to_vec()).collect(),
                keep.iter().map(|&t| val.target_indices[t]).collect(),
            )?;
            let mut best: Option<(f64, GmmDetector)> = None;
            for k in 1..=(*k_max).max(1) {
                let Ok(det) = gmm_fit_k(&normal, k, seed) else {
                    continue;
                };
                let threshold = gmm_score(&normal, &det)?.into_iter().fold(f64::NEG_INFINITY, f64::max);
                let flags: Vec<bool> = gmm_score(val, &det)?.into_iter().map(|s| s > threshold).collect();
                let f1 = metrics(&confusion(&flags, labels)?).f1;
                if best.as_ref().is_none_or(|(bf, _)| f1 > *bf) {
                    best = Some((f1, det));
                }
            }
            best.map(|(_, d)| d).ok_or_else(|| Error::Data("no GMM could be fitted".into()))
        }
    }
}

/// `−log Σ_k w_k N(ê_t; μ_k, Σ_k)` per row.
pub fn gmm_score(e: &ErrorMatrix, det: &GmmDetector) -> Result<Vec<f64>> {
    if e.n_features != det.n_features {
        return Err(Error::dim(
            "gmm_score",
            format!("{} features, detector fitted on {}", e.n_features, det.n_features),
        ));
    }
    Ok((0..e.rows()).map(|t| -det.log_density(e.row(t))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn matrix(n: usize, data: Vec<f64>) -> ErrorMatrix {
        let rows = data.len() / n;
        ErrorMatrix::new(n, data, (0..rows).collect()).unwrap()
    }

    fn blob(rng: &mut ChaCha8Rng, rows: usize, center: &[f64], sd: f64) -> Vec<f64> {
        (0..rows)
            .flat_map(|_| center.iter().map(|c| c + sd * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn single_gaussian_picks_one_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = matrix(2, blob(&mut rng, 500, &[0.0, 0.0], 0.1));
        let det = gmm_fit(&e, &KMode::Bic { k_max: 4 }, 0).unwrap();
        assert_eq!(det.k(), 1);
    }

    #[test]
    fn two_clusters_are_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut data = blob(&mut rng, 300, &[-5.0, 0.0], 0.3);
        data.extend(blob(&mut rng, 300, &[5.0, 1.0], 0.3));
        let e = matrix(2, data);
        let det = gmm_fit(&e, &KMode::Bic { k_max: 4 }, 0).unwrap();
        assert_eq!(det.k(), 2);
        let mut xs: Vec<f64> = (0..2).map(|j| det.means[j * 2]).collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[0] + 5.0).abs() < 0.1 && (xs[1] - 5.0).abs() < 0.1, "{xs:?}");
        assert!((det.weights.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn log_likelihood_never_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut data = blob(&mut rng, 200, &[0.0, 0.0, 0.0], 1.0);
        data.extend(blob(&mut rng, 100, &[2.0, -1.0, 0.5], 0.5));
        let e = matrix(3, data);
        for k in 1..=4 {
            let det = gmm_fit_k(&e, k, 9).unwrap();
            assert!(det.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{k}");
        }
    }

    #[test]
    fn standard_normal_score_grows_with_distance() {
        let det = GmmDetector {
            weights: vec![1.0],
            means: vec![0.0, 0.0],
            variances: vec![1.0, 1.0],
            n_features: 2,
            log_likelihood: vec![],
        };
        let s = gmm_score(&matrix(2, vec![0.0, 0.0, 5.0, 5.0]), &det).unwrap();
        assert!((s[0] - std::f64::consts::TAU.ln()).abs() < 1e-12);
        assert!((s[1] - s[0] - 25.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_rows_for_k() {
        let e = matrix(1, vec![0.0; 15]);
        assert!(matches!(gmm_fit_k(&e, 2, 0), Err(Error::Data(_))));
    }

    #[test]
    fn f1_mode_uses_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut data = blob(&mut rng, 200, &[0.0, 0.0], 0.2);
        data.extend(blob(&mut rng, 10, &[4.0, 4.0], 0.2));
        let labels: Vec<bool> = (0..210).map(|t| t >= 200).collect();
        let det = gmm_fit(&matrix(2, data), &KMode::F1 { k_max: 2, labels }, 0).unwrap();
        assert!(det.k() >= 1);
        let bad = KMode::F1 {
            k_max: 2,
            labels: vec![false; 3],
        };
        assert!(gmm_fit(&matrix(1, vec![0.0; 30]), &bad, 0).is_err());
    }
}
