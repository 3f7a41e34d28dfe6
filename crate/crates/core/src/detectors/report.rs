use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores, decisions and attributions over the scored steps.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyReport {
    pub timesteps: Vec<usize>,
    pub scores: Vec<f64>,
    pub threshold: f64,
    pub flags: Vec<bool>,
    /// Feature index with the largest contribution, for flagged steps.
    pub top_feature: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub detector: String,
    pub threshold: f64,
    pub n_scored: usize,
    pub n_flagged: usize,
    pub first_timestep: Option<usize>,
    pub last_timestep: Option<usize>,
    pub max_score: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Row {
    timestep: usize,
    score: f64,
    threshold: f64,
    flag: u8,
    top_feature: Option<String>,
}

fn argmax_abs(v: &[f64]) -> Option<usize> {
    (0..v.len()).fold(None, |best: Option<usize>, i| match best {
        Some(b) if v[b].abs() >= v[i].abs() => Some(b),
        _ => Some(i),
    })
}

/// Flags `score > threshold`; flagged steps are attributed to the argmax of
/// `|contribution|`.
pub fn detect(
    timesteps: &[usize],
    scores: &[f64],
    threshold: f64,
    contributions: &[Vec<f64>],
) -> Result<AnomalyReport> {
    if scores.len() != timesteps.len() || contributions.len() != scores.len() {
        return Err(Error::dim(
            "detect",
            format!(
                "{} scores, {} timesteps, {} contribution rows",
                scores.len(),
                timesteps.len(),
                contributions.len()
            ),
        ));
    }
    let flags: Vec<bool> = scores.iter().map(|&s| s > threshold).collect();
    let top_feature = flags
        .iter()
        .zip(contributions)
        .map(|(&f, c)| if f { argmax_abs(c) } else { None })
        .collect();
    Ok(AnomalyReport {
        timesteps: timesteps.to_vec(),
        scores: scores.to_vec(),
        threshold,
        flags,
        top_feature,
    })
}

impl AnomalyReport {
    pub fn n_flagged(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn summary(&self, detector: &str) -> ReportSummary {
        ReportSummary {
            detector: detector.to_string(),
            threshold: self.threshold,
            n_scored: self.scores.len(),
            n_flagged: self.n_flagged(),
            first_timestep: self.timesteps.first().copied(),
            last_timestep: self.timesteps.last().copied(),
            max_score: self.scores.iter().copied().reduce(f64::max),
        }
    }

    /// CSV with columns `timestep, score, threshold, flag, top_feature`;
    /// attributions are written as feature names.
    pub fn write_csv(&self, path: impl AsRef<Path>, feature_names: &[String]) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for i in 0..self.scores.len() {
            let top = match self.top_feature[i] {
                Some(f) => Some(
                    feature_names
                        .get(f)
                        .cloned()
                        .ok_or_else(|| Error::Data(format!("feature index {f} has no name")))?,
                ),
                None => None,
            };
            w.serialize(Row {
                timestep: self.timesteps[i],
                score: self.scores[i],
                threshold: self.threshold,
                flag: u8::from(self.flags[i]),
                top_feature: top,
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>, feature_names: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(file);
        let mut out = AnomalyReport {
            timesteps: Vec::new(),
            scores: Vec::new(),
            threshold: f64::NAN,
            flags: Vec::new(),
            top_feature: Vec::new(),
        };
        for row in r.deserialize() {
            let row: Row = row?;
            out.threshold = row.threshold;
            out.timesteps.push(row.timestep);
            out.scores.push(row.score);
            out.flags.push(row.flag != 0);
            out.top_feature.push(match row.top_feature {
                Some(name) => Some(
                    feature_names
                        .iter()
                        .position(|n| *n == name)
                        .ok_or_else(|| Error::Data(format!("unknown feature {name:?} in report")))?,
                ),
                None => None,
            });
        }
        Ok(out)
    }

    pub fn write_summary(&self, path: impl AsRef<Path>, detector: &str) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(&self.summary(detector))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}
