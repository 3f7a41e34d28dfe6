//! Prepared dataset directory: normalized splits plus the normalization state.

use std::path::{Path, PathBuf};

use hgad_core::dataio::{load_csv, write_csv, CsvSchema, NormalizationState, TimeSeriesDataset};
use hgad_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "bundle.json";
pub const NORM_STATE: &str = "norm_state.json";
pub const SPLITS: [&str; 3] = ["train.csv", "val.csv", "test.csv"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub feature_names: Vec<String>,
    pub rows: [usize; 3],
    pub has_labels: bool,
    pub has_timestamps: bool,
    pub source: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Bundle {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub train: TimeSeriesDataset,
    pub val: TimeSeriesDataset,
    pub test: TimeSeriesDataset,
    pub normalization: NormalizationState,
}

impl Bundle {
    pub fn write(
        dir: &Path,
        splits: [&TimeSeriesDataset; 3],
        normalization: &NormalizationState,
        source: Option<String>,
    ) -> Result<Manifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
        for (ds, name) in splits.iter().zip(SPLITS) {
            write_csv(ds, dir.join(name))?;
        }
        normalization.save(dir.join(NORM_STATE))?;
        let manifest = Manifest {
            feature_names: splits[0].feature_names().to_vec(),
            rows: splits.map(TimeSeriesDataset::len),
            has_labels: splits[0].labels().is_some(),
            has_timestamps: splits[0].timestamps().is_some(),
            source,
        };
        let path = dir.join(MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("not a prepared bundle: {}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let schema = CsvSchema {
            label_column: manifest.has_labels.then(|| "label".to_string()),
            require_labels: manifest.has_labels,
            timestamp_column: manifest.has_timestamps.then(|| "timestamp".to_string()),
        };
        let mut parts = Vec::with_capacity(3);
        for (name, &rows) in SPLITS.iter().zip(&manifest.rows) {
            let ds = load_csv(dir.join(name), &schema)?;
            if ds.len() != rows || ds.feature_names() != manifest.feature_names.as_slice() {
                return Err(Error::Data(format!("{name} does not match {MANIFEST}")));
            }
            parts.push(ds);
        }
        let normalization = NormalizationState::load(dir.join(NORM_STATE))?;
        let test = parts.pop().expect("three splits");
        let val = parts.pop().expect("three splits");
        let train = parts.pop().expect("three splits");
        Ok(Bundle {
            dir: dir.to_path_buf(),
            manifest,
            train,
            val,
            test,
            normalization,
        })
    }

    pub fn n_features(&self) -> usize {
        self.manifest.feature_names.len()
    }

    /// Row offsets of the val and test splits in the concatenated series.
    pub fn offsets(&self) -> (usize, usize) {
        let [a, b, _] = self.manifest.rows;
        (a, a + b)
    }

    /// All splits back to back, row-major.
    pub fn values(&self) -> Vec<f64> {
        [&self.train, &self.val, &self.test]
            .iter()
            .flat_map(|d| d.values().iter().copied())
            .collect()
    }

    pub fn labels(&self) -> Option<Vec<bool>> {
        let mut out = Vec::new();
        for d in [&self.train, &self.val, &self.test] {
            out.extend_from_slice(d.labels()?);
        }
        Some(out)
    }
}
