use std::path::{Path, PathBuf};

use hgad_core::dataio::{CsvSchema, SplitRatios, SynthSpec};
use hgad_core::detectors::{DetectorConfig, ThresholdPolicy};
use hgad_core::model::ModelConfig;
use hgad_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    /// Run directory; generated under `runs_dir` when absent.
    pub out: Option<PathBuf>,
    pub runs_dir: Option<PathBuf>,
}

/// Everything a command needs, loaded from JSON and overridden by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the model, detector and synth seeds when set.
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub detector: DetectorConfig,
    pub split: SplitRatios,
    pub schema: CsvSchema,
    pub synth: SynthSpec,
    pub threads: usize,
    pub point_adjust: bool,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            model: ModelConfig::default(),
            detector: DetectorConfig::default(),
            split: SplitRatios::default(),
            schema: CsvSchema::default(),
            synth: SynthSpec::default(),
            threads: 1,
            point_adjust: false,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.model.seed)
    }

    /// Pushes the top-level seed into every component.
    pub fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.model.seed = s;
            self.detector.seed = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.split.lengths(1000)?;
        let d = &self.detector;
        if !(d.variance_target > 0.0 && d.variance_target <= 1.0) {
            return Err(Error::Config(format!(
                "detector variance_target must lie in (0, 1], got {}",
                d.variance_target
            )));
        }
        if d.k_max == 0 {
            return Err(Error::Config("detector k_max must be >= 1".into()));
        }
        if let ThresholdPolicy::Quantile { q } = d.threshold {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::Config(format!("threshold quantile must lie in [0, 1], got {q}")));
            }
        }
        if d.sliding_window.is_some_and(|w| w < 2) {
            return Err(Error::Config("sliding_window must be >= 2".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        Ok(())
    }
}

/// `max` or `q<fraction>`, e.g. `q0.99`.
pub fn parse_threshold(s: &str) -> Result<ThresholdPolicy> {
    if s == "max" {
        return Ok(ThresholdPolicy::Max);
    }
    s.strip_prefix('q')
        .and_then(|q| q.parse::<f64>().ok())
        .filter(|q| (0.0..=1.0).contains(q))
        .map(|q| ThresholdPolicy::Quantile { q })
        .ok_or_else(|| Error::Config(format!("threshold policy must be `max` or `q<0..1>`, got {s:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let e = serde_json::from_str::<RunConfig>(r#"{"modle": {}}"#);
        assert!(e.is_err());
        let e = serde_json::from_str::<RunConfig>(r#"{"model": {"window": 8, "typo": 1}}"#);
        assert!(e.is_err());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 3, "model": {"epochs": 2}}"#).unwrap();
        assert_eq!(c.model.epochs, 2);
        assert_eq!(c.model.window, ModelConfig::default().window);
        assert_eq!(c.seed(), 3);
        c.validate().unwrap();
    }

    #[test]
    fn threshold_flags() {
        assert_eq!(parse_threshold("max").unwrap(), ThresholdPolicy::Max);
        assert_eq!(parse_threshold("q0.99").unwrap(), ThresholdPolicy::Quantile { q: 0.99 });
        assert!(parse_threshold("q2").is_err());
        assert!(parse_threshold("median").is_err());
    }
}
