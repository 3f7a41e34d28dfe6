use serde::{Deserialize, Serialize};

use super::TimeSeriesDataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    /// Segment lengths: floor for train and val, remainder to test.
    pub fn lengths(&self, total: usize) -> Result<(usize, usize, usize)> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::Config(format!(
                "split ratios must all be positive, got {:?}",
                r
            )));
        }
        if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios {r:?} do not sum to 1")));
        }
        // the nudge keeps 0.29 * 100 from flooring to 28
        let train = (total as f64 * self.train + 1e-9).floor() as usize;
        let val = (total as f64 * self.val + 1e-9).floor() as usize;
        let test = total.saturating_sub(train + val);
        Ok((train, val, test))
    }
}

/// Contiguous chronological train/val/test slices. Each must hold at least
/// `window + horizon` rows.
pub fn split(
    ds: &TimeSeriesDataset,
    ratios: SplitRatios,
    window: usize,
    horizon: usize,
) -> Result<(TimeSeriesDataset, TimeSeriesDataset, TimeSeriesDataset)> {
    let (a, b, c) = ratios.lengths(ds.len())?;
    let min = window + horizon;
    for (name, len) in [("train", a), ("val", b), ("test", c)] {
        if len < min {
            return Err(Error::Config(format!(
                "{name} split has {len} rows; window {window} + horizon {horizon} needs {min}"
            )));
        }
    }
    Ok((ds.slice(0, a), ds.slice(a, a + b), ds.slice(a + b, a + b + c)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(t: usize) -> TimeSeriesDataset {
        let values = (0..t).map(|i| i as f64).collect();
        TimeSeriesDataset::new(values, vec!["x".into()], None, None).unwrap()
    }

    #[test]
    fn lengths_70_15_15() {
        let (tr, va, te) = split(&ramp(100), SplitRatios::default(), 8, 1).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (70, 15, 15));
        // chronological and contiguous
        assert_eq!(tr.value(69, 0), 69.0);
        assert_eq!(va.value(0, 0), 70.0);
        assert_eq!(te.value(0, 0), 85.0);
    }

    #[test]
    fn degenerate_ratios_rejected() {
        let r = SplitRatios {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        };
        assert!(matches!(split(&ramp(100), r, 2, 1), Err(Error::Config(_))));
        let r = SplitRatios {
            train: 0.5,
            val: 0.5,
            test: 0.5,
        };
        assert!(matches!(split(&ramp(100), r, 2, 1), Err(Error::Config(_))));
    }

    #[test]
    fn short_split_rejected() {
        assert!(matches!(
            split(&ramp(10), SplitRatios::default(), 8, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn floor_nudge() {
        let r = SplitRatios {
            train: 0.29,
            val: 0.36,
            test: 0.35,
        };
        assert_eq!(r.lengths(100).unwrap(), (29, 36, 35));
    }
}
