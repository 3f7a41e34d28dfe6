//! Multi-stage input masking for training.
//!
//! A mask entry of 0 hides the input value. Windows are stored oldest step
//! first; temporal weights are indexed by lag, where lag 0 is the most
//! recent step. With `α < 1` older steps are masked more often.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_temperature, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub enabled: bool,
    pub base_ratio: f64,
    pub tau: f64,
    pub alpha_decay: f64,
    /// First epoch of the laplacian stage and, optionally, first epoch with
    /// masking off. `None` means the laplacian stage starts after the first
    /// third of training.
    pub stage_boundaries: Option<Vec<usize>>,
    /// Mask low-importance nodes more instead of high-importance ones.
    pub invert_importance: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            enabled: true,
            base_ratio: 0.1,
            tau: 1.0,
            alpha_decay: 0.95,
            stage_boundaries: None,
            invert_importance: false,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_ratio > 0.0 && self.base_ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio must lie in (0, 1), got {}", self.base_ratio)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("mask tau must be > 0, got {}", self.tau)));
        }
        if !(self.alpha_decay > 0.0 && self.alpha_decay <= 1.0) {
            return Err(Error::Config(format!("mask alpha must lie in (0, 1], got {}", self.alpha_decay)));
        }
        if let Some(b) = &self.stage_boundaries {
            if b.is_empty() || b.len() > 2 || b.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::Config(format!(
                    "stage boundaries must be one or two nondecreasing epochs, got {b:?}"
                )));
            }
        }
        Ok(())
    }

    /// Concrete boundaries for a run of `epochs` epochs.
    pub fn boundaries_for(&self, epochs: usize) -> Vec<usize> {
        self.stage_boundaries
            .clone()
            .unwrap_or_else(|| vec![epochs.div_ceil(3)])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStage {
    Random,
    Laplacian,
    Off,
}

/// A `B × 1 × N × T` 0/1 mask, stored flat in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub batch: usize,
    pub nodes: usize,
    pub steps: usize,
    pub data: Vec<f64>,
}

impl Mask {
    pub fn ones(batch: usize, nodes: usize, steps: usize) -> Self {
        Mask {
            batch,
            nodes,
            steps,
            data: vec![1.0; batch * nodes * steps],
        }
    }

    pub fn masked_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 0.0).count()
    }
}

/// `diag(L)`
pub fn importance_scores(l: &Tensor) -> Result<Vec<f64>> {
    match l.shape() {
        [a, b] if a == b => Ok((0..*a).map(|i| l.at(i, i)).collect()),
        s => Err(Error::dim("importance_scores", format!("{s:?} is not square"))),
    }
}

/// `softmax(s / τ)`, or `softmax(−s / τ)` when `invert` is set.
pub fn mask_probabilities(scores: &[f64], tau: f64, invert: bool) -> Result<Vec<f64>> {
    if invert {
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        softmax_temperature(&neg, tau)
    } else {
        softmax_temperature(scores, tau)
    }
}

/// `w(t) = αᵗ / Σ αᵏ` for lags `t = 0..T`.
pub fn temporal_weights(alpha: f64, steps: usize) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha <= 1.0) || steps == 0 {
        return Err(Error::Parameter(format!("need 0 < alpha <= 1 and T >= 1, got {alpha}, {steps}")));
    }
    let raw: Vec<f64> = (0..steps).map(|t| alpha.powi(t as i32)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Samples a mask for `batch` windows of `probs.len()` nodes and
/// `weights.len()` steps.
///
/// The random stage masks each entry with probability `ratio`. The laplacian
/// stage masks node `n` at lag `t` with probability
/// `clamp(ratio · N·p_n · T·w(T−1−t), 0, 1)`, which averages to `ratio`
/// and leaves the most recent steps least masked.
pub fn sample_mask(
    probs: &[f64],
    weights: &[f64],
    ratio: f64,
    stage: MaskStage,
    batch: usize,
    seed: u64,
) -> Result<Mask> {
    let (n, t) = (probs.len(), weights.len());
    if stage == MaskStage::Off {
        return Ok(Mask::ones(batch, n, t));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Parameter(format!("mask ratio must lie in [0, 1), got {ratio}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = vec![ratio; n * t];
    if stage == MaskStage::Laplacian {
        for node in 0..n {
            for c in 0..t {
                // chronological step c sits at lag T-1-c and takes w(T-1-lag) = w(c)
                p[node * t + c] = (ratio * n as f64 * probs[node] * t as f64 * weights[c]).clamp(0.0, 1.0);
            }
        }
    }
    let mut data = Vec::with_capacity(batch * n * t);
    for _ in 0..batch {
        for &pi in &p {
            let u: f64 = rng.gen();
            data.push(if u < pi { 0.0 } else { 1.0 });
        }
    }
    Ok(Mask {
        batch,
        nodes: n,
        steps: t,
        data,
    })
}

/// `X ∘ M` for `x` shaped `[B, 1, N, T]` or `[B, N, T]`.
pub fn apply_mask(x: &Tensor, m: &Mask) -> Result<Tensor> {
    if x.numel() != m.data.len() || x.shape()[0] != m.batch || x.shape().last() != Some(&m.steps) {
        return Err(Error::dim("apply_mask", format!("input {:?} vs mask {}x{}x{}", x.shape(), m.batch, m.nodes, m.steps)));
    }
    let data = x.data().iter().zip(&m.data).map(|(a, b)| a * b).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Stage for a training epoch; `None` for evaluation.
pub fn stage_for_epoch(epoch: Option<usize>, boundaries: &[usize]) -> MaskStage {
    let Some(e) = epoch else {
        return MaskStage::Off;
    };
    match boundaries {
        [] => MaskStage::Random,
        [lap] => {
            if e < *lap {
                MaskStage::Random
            } else {
                MaskStage::Laplacian
            }
        }
        [lap, off, ..] => {
            if e < *lap {
                MaskStage::Random
            } else if e < *off {
                MaskStage::Laplacian
            } else {
                MaskStage::Off
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scores_and_probabilities() {
        let l = Tensor::matrix(&[&[0.25, -0.25], &[-0.25, 0.25]]);
        assert_eq!(importance_scores(&l).unwrap(), vec![0.25, 0.25]);
        assert_eq!(importance_scores(&Tensor::eye(3)).unwrap(), vec![1.0; 3]);
        let p = mask_probabilities(&[1.0, 0.0], 1.0, false).unwrap();
        assert!((p[0] - 0.731_058_578_630_005).abs() < 1e-12);
        let q = mask_probabilities(&[1.0, 0.0], 1.0, true).unwrap();
        assert!((q[1] - 0.731_058_578_630_005).abs() < 1e-12);
    }

    #[test]
    fn temporal_weight_examples() {
        assert_eq!(temporal_weights(1.0, 4).unwrap(), vec![0.25; 4]);
        let w = temporal_weights(0.5, 3).unwrap();
        for (a, b) in w.iter().zip([4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(temporal_weights(0.9, 1).unwrap(), vec![1.0]);
        assert!(temporal_weights(0.0, 3).is_err());
    }

    #[test]
    fn random_stage_fraction() {
        let m = sample_mask(&[0.5, 0.5], &[0.002; 500], 0.5, MaskStage::Random, 1, 9).unwrap();
        let k = m.masked_count();
        assert!((450..=550).contains(&k), "{k}");
        let none = sample_mask(&[1.0], &[1.0; 50], 0.0, MaskStage::Random, 3, 9).unwrap();
        assert_eq!(none.masked_count(), 0);
    }

    #[test]
    fn laplacian_stage_masks_old_steps_more() {
        let w = temporal_weights(0.8, 10).unwrap();
        let m = sample_mask(&[0.5, 0.5], &w, 0.2, MaskStage::Laplacian, 4000, 1).unwrap();
        let per_step = |c: usize| {
            (0..m.batch * m.nodes)
                .filter(|r| m.data[r * m.steps + c] == 0.0)
                .count()
        };
        assert!(per_step(0) > per_step(9));
    }

    #[test]
    fn reproducible() {
        let a = sample_mask(&[0.2, 0.8], &[0.5, 0.5], 0.3, MaskStage::Laplacian, 8, 4).unwrap();
        let b = sample_mask(&[0.2, 0.8], &[0.5, 0.5], 0.3, MaskStage::Laplacian, 8, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn apply_examples() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut m = Mask::ones(1, 2, 2);
        assert_eq!(apply_mask(&x, &m).unwrap(), x);
        m.data = vec![0.0, 1.0, 1.0, 0.0];
        assert_eq!(apply_mask(&x, &m).unwrap().data(), &[0.0, 2.0, 3.0, 0.0]);
        m.data = vec![0.0; 4];
        assert!(apply_mask(&x, &m).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn schedule() {
        assert_eq!(stage_for_epoch(Some(0), &[10]), MaskStage::Random);
        assert_eq!(stage_for_epoch(Some(10), &[10]), MaskStage::Laplacian);
        assert_eq!(stage_for_epoch(None, &[10]), MaskStage::Off);
        assert_eq!(stage_for_epoch(Some(20), &[10, 20]), MaskStage::Off);
        assert_eq!(MaskConfig::default().boundaries_for(30), vec![10]);
    }
}
