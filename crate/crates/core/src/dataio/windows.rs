use super::TimeSeriesDataset;
use crate::error::{Error, Result};

/// A batch of `(window, target)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    /// `B × N × K`, oldest step first within each window.
    pub inputs: Vec<f64>,
    /// `B × N` values at `end + horizon`.
    pub targets: Vec<f64>,
    /// Last timestep covered by each window.
    pub end_indices: Vec<usize>,
    /// Timestep of each target (`end + horizon`).
    pub target_indices: Vec<usize>,
    pub n_features: usize,
    pub window: usize,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.end_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.end_indices.is_empty()
    }
}

/// Lazily materialized sliding windows (stride 1) over a row-major series.
///
/// Steps before the start of the series are copy-padded with the first row.
#[derive(Clone, Debug)]
pub struct Windows<'a> {
    values: &'a [f64],
    n: usize,
    rows: usize,
    window: usize,
    horizon: usize,
    first_end: usize,
}

/// All windows of `ds`: one per end step `t ∈ [0, T-h)`.
pub fn make_windows(ds: &TimeSeriesDataset, window: usize, horizon: usize) -> Result<Windows<'_>> {
    Windows::new(ds.values(), ds.n_features(), window, horizon, 0)
}

impl<'a> Windows<'a> {
    /// Windows whose targets start at row `first_target`; earlier rows only
    /// serve as history.
    pub fn new(
        values: &'a [f64],
        n: usize,
        window: usize,
        horizon: usize,
        first_target: usize,
    ) -> Result<Self> {
        if window == 0 || horizon == 0 {
            return Err(Error::Config(format!(
                "window ({window}) and horizon ({horizon}) must be >= 1"
            )));
        }
        if n == 0 || !values.len().is_multiple_of(n) {
            return Err(Error::dim("make_windows", format!("{} values, {n} features", values.len())));
        }
        let rows = values.len() / n;
        if rows < horizon + 1 {
            return Err(Error::Config(format!(
                "series of {rows} rows is too short for horizon {horizon}"
            )));
        }
        let first_end = first_target.saturating_sub(horizon);
        Ok(Windows {
            values,
            n,
            rows,
            window,
            horizon,
            first_end,
        })
    }

    pub fn len(&self) -> usize {
        (self.rows - self.horizon).saturating_sub(self.first_end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_features(&self) -> usize {
        self.n
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Materializes the windows at the given positions (`0..len()`).
    pub fn batch(&self, positions: &[usize]) -> WindowBatch {
        let (n, k) = (self.n, self.window);
        let mut inputs = Vec::with_capacity(positions.len() * n * k);
        let mut targets = Vec::with_capacity(positions.len() * n);
        let mut end_indices = Vec::with_capacity(positions.len());
        let mut target_indices = Vec::with_capacity(positions.len());
        for &p in positions {
            let end = self.first_end + p;
            assert!(end + self.horizon < self.rows, "window position {p} out of range");
            for f in 0..n {
                for j in 0..k {
                    let t = (end + j + 1).saturating_sub(k);
                    inputs.push(self.values[t * n + f]);
                }
            }
            let target = end + self.horizon;
            targets.extend_from_slice(&self.values[target * n..(target + 1) * n]);
            end_indices.push(end);
            target_indices.push(target);
        }
        WindowBatch {
            inputs,
            targets,
            end_indices,
            target_indices,
            n_features: n,
            window: k,
        }
    }

    /// Consecutive batches of at most `size` windows, in order.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = WindowBatch> + '_ {
        let size = size.max(1);
        let len = self.len();
        (0..len).step_by(size).map(move |start| {
            let pos: Vec<usize> = (start..(start + size).min(len)).collect();
            self.batch(&pos)
        })
    }
}
