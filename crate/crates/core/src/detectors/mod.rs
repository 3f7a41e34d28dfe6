//! Prediction-error anomaly scoring: PCA subspace residuals or GMM negative
//! log-likelihood, thresholded on the validation split.

mod errors;
mod gmm;
mod pca;
mod report;

pub use errors::{compute_errors, ErrorMatrix, ErrorNormalizer, SlidingWindowNormalizer, SLIDING_WINDOW, STD_FLOOR};
pub use gmm::{
    bic, gmm_fit, gmm_fit_k, gmm_score, GmmDetector, KMode, EM_MAX_ITER, EM_MAX_RETRIES, EM_TOL,
    GMM_VARIANCE_FLOOR, ROWS_PER_COMPONENT,
};
pub use pca::{pca_fit, pca_score, PcaDetector, DEFAULT_VARIANCE_TARGET, VARIANCE_FLOOR};
pub use report::{detect, AnomalyReport, ReportSummary};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum ThresholdPolicy {
    #[default]
    Max,
    Quantile { q: f64 },
}

/// Maximum, or the linearly interpolated empirical quantile.
pub fn threshold_select(scores: &[f64], policy: ThresholdPolicy) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Data("no validation scores for a threshold".into()));
    }
    match policy {
        ThresholdPolicy::Max => Ok(scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        ThresholdPolicy::Quantile { q } => {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::Config(format!("quantile must lie in [0, 1], got {q}")));
            }
            let mut s = scores.to_vec();
            s.sort_by(f64::total_cmp);
            let h = (s.len() - 1) as f64 * q;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            Ok(s[lo] + (h - lo as f64) * (s[hi] - s[lo]))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Pca,
    #[default]
    Gmm,
}

impl DetectorKind {
    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Pca => "pca",
            DetectorKind::Gmm => "gmm",
        }
    }
}

impl std::str::FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(DetectorKind::Pca),
            "gmm" => Ok(DetectorKind::Gmm),
            _ => Err(Error::Config(format!("unknown detector {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KSelect {
    #[default]
    Bic,
    F1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    pub variance_target: f64,
    pub k_max: usize,
    pub k_select: KSelect,
    pub threshold: ThresholdPolicy,
    /// Trailing window for re-standardizing errors; off when `None`.
    pub sliding_window: Option<usize>,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            kind: DetectorKind::Gmm,
            variance_target: DEFAULT_VARIANCE_TARGET,
            k_max: 4,
            k_select: KSelect::Bic,
            threshold: ThresholdPolicy::Max,
            sliding_window: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Detector {
    Pca(PcaDetector),
    Gmm(GmmDetector),
}

/// Normalizer, fitted detector and threshold from the validation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedDetector {
    pub normalizer: ErrorNormalizer,
    pub sliding_window: Option<usize>,
    pub detector: Detector,
    pub threshold: f64,
}

impl FittedDetector {
    pub fn fit(val: &ErrorMatrix, cfg: &DetectorConfig, val_labels: Option<&[bool]>) -> Result<Self> {
        let normalizer = ErrorNormalizer::fit(val)?;
        let mut out = FittedDetector {
            normalizer,
            sliding_window: cfg.sliding_window,
            detector: Detector::Pca(PcaDetector {
                n_features: 0,
                basis: Vec::new(),
                components: 0,
                eigenvalues: Vec::new(),
            }),
            threshold: f64::NAN,
        };
        let z = out.normalize(val)?;
        out.detector = match cfg.kind {
            DetectorKind::Pca => Detector::Pca(pca_fit(&z, cfg.variance_target)?),
            DetectorKind::Gmm => {
                let mode = match cfg.k_select {
                    KSelect::Bic => KMode::Bic { k_max: cfg.k_max },
                    KSelect::F1 => KMode::F1 {
                        k_max: cfg.k_max,
                        labels: val_labels
                            .ok_or_else(|| Error::Config("F1 component selection needs validation labels".into()))?
                            .to_vec(),
                    },
                };
                Detector::Gmm(gmm_fit(&z, &mode, cfg.seed)?)
            }
        };
        let (scores, _) = out.score_normalized(&z)?;
        out.threshold = threshold_select(&scores, cfg.threshold)?;
        Ok(out)
    }

    pub fn normalize(&self, e: &ErrorMatrix) -> Result<ErrorMatrix> {
        match self.sliding_window {
            Some(w) => SlidingWindowNormalizer { window: w }.apply(e, &self.normalizer),
            None => self.normalizer.apply(e),
        }
    }

    /// Scores and per-row attribution vectors of normalized errors.
    fn score_normalized(&self, z: &ErrorMatrix) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        match &self.detector {
            Detector::Pca(d) => {
                let scores = pca_score(z, d)?;
                let contrib = (0..z.rows()).map(|t| d.residual(z.row(t))).collect();
                Ok((scores, contrib))
            }
            Detector::Gmm(d) => {
                let scores = gmm_score(z, d)?;
                let contrib = (0..z.rows()).map(|t| z.row(t).to_vec()).collect();
                Ok((scores, contrib))
            }
        }
    }

    pub fn score(&self, e: &ErrorMatrix) -> Result<Vec<f64>> {
        Ok(self.score_normalized(&self.normalize(e)?)?.0)
    }

    pub fn detect(&self, e: &ErrorMatrix) -> Result<AnomalyReport> {
        let z = self.normalize(e)?;
        let (scores, contrib) = self.score_normalized(&z)?;
        detect(&e.target_indices, &scores, self.threshold, &contrib)
    }

    pub fn kind(&self) -> DetectorKind {
        match self.detector {
            Detector::Pca(_) => DetectorKind::Pca,
            Detector::Gmm(_) => DetectorKind::Gmm,
        }
    }
}
