use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TimeSeriesDataset;
use crate::error::{Error, Result};

/// Which CSV columns carry labels and timestamps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    /// Name of the 0/1 label column, if any.
    pub label_column: Option<String>,
    /// Fail when the label column is absent.
    pub require_labels: bool,
    /// Name of a timestamp column kept verbatim, if any.
    pub timestamp_column: Option<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            label_column: Some("label".into()),
            require_labels: false,
            timestamp_column: None,
        }
    }
}

/// Strips path-like prefixes: `\plant\unit\1_AIT_001_PV` → `1_AIT_001_PV`.
pub fn strip_path_prefix(header: &str) -> String {
    header
        .trim()
        .rsplit(['\\', '/'])
        .find(|s| !s.trim().is_empty())
        .unwrap_or("")
        .trim()
        .to_string()
}

/// Loads a row-per-timestep CSV with a header row. Empty cells and `NaN`
/// become missing values (NaN) to be filled by [`super::clean`].
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<TimeSeriesDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| ingest(0, 0, e.to_string()))?
        .iter()
        .map(strip_path_prefix)
        .collect();
    if headers.iter().all(|h| h.is_empty()) {
        return Err(ingest(0, 0, "missing header row".into()));
    }

    let label_idx = schema
        .label_column
        .as_ref()
        .and_then(|name| headers.iter().position(|h| h == name));
    if schema.require_labels && label_idx.is_none() {
        return Err(Error::Config(format!(
            "label column {:?} not found in {}",
            schema.label_column.as_deref().unwrap_or("label"),
            path.display()
        )));
    }
    let ts_idx = match &schema.timestamp_column {
        Some(name) => Some(headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Config(format!("timestamp column {name:?} not found in {}", path.display()))
        })?),
        None => None,
    };
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| Some(c) != label_idx && Some(c) != ts_idx)
        .collect();
    let names: Vec<String> = feature_cols.iter().map(|&c| headers[c].clone()).collect();

    let mut values = Vec::new();
    let mut labels = label_idx.map(|_| Vec::new());
    let mut stamps = ts_idx.map(|_| Vec::new());
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| ingest(row, 0, e.to_string()))?;
        if record.len() != headers.len() {
            return Err(ingest(
                row,
                record.len(),
                format!("expected {} cells, found {}", headers.len(), record.len()),
            ));
        }
        for &c in &feature_cols {
            values.push(parse_cell(&record[c]).ok_or_else(|| {
                ingest(row, c, format!("cannot parse {:?} as a number", &record[c]))
            })?);
        }
        if let (Some(c), Some(l)) = (label_idx, labels.as_mut()) {
            let v = parse_cell(&record[c])
                .filter(|v| !v.is_nan())
                .ok_or_else(|| ingest(row, c, format!("label {:?} is not 0/1", &record[c])))?;
            l.push(v != 0.0);
        }
        if let (Some(c), Some(s)) = (ts_idx, stamps.as_mut()) {
            s.push(record[c].to_string());
        }
    }
    if values.is_empty() {
        return Err(ingest(0, 0, format!("{} has no data rows", path.display())));
    }
    TimeSeriesDataset::new(values, names, labels, stamps)
}

fn parse_cell(cell: &str) -> Option<f64> {
    let s = cell.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("nan") || s.eq_ignore_ascii_case("na") {
        return Some(f64::NAN);
    }
    s.parse::<f64>().ok().filter(|v| !v.is_infinite())
}

fn ingest(row: usize, column: usize, detail: String) -> Error {
    Error::Ingest {
        row,
        column,
        detail,
    }
}

/// Writes the dataset (plus a `label` column when labels are present).
/// Values use Rust's shortest round-trip float formatting.
pub fn write_csv(ds: &TimeSeriesDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = Vec::new();
    if ds.timestamps().is_some() {
        header.push("timestamp");
    }
    header.extend(ds.feature_names().iter().map(String::as_str));
    if ds.labels().is_some() {
        header.push("label");
    }
    w.write_record(&header)?;
    let mut cells: Vec<String> = Vec::with_capacity(header.len());
    for t in 0..ds.len() {
        cells.clear();
        if let Some(ts) = ds.timestamps() {
            cells.push(ts[t].clone());
        }
        cells.extend(ds.row(t).iter().map(|v| format!("{v}")));
        if let Some(l) = ds.labels() {
            cells.push(if l[t] { "1".into() } else { "0".into() });
        }
        w.write_record(&cells)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
