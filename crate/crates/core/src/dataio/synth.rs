//! Labelled synthetic sensor data.
//!
//! Each channel follows one normal pattern; anomalies are injected as short
//! segments confined to the tail of the series so that the chronologically
//! earlier train/validation portions stay clean.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::TimeSeriesDataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    /// Mean-reverting AR(1) noise around a fixed level.
    Stationary,
    /// Slow sinusoid.
    Periodic,
    /// Fast two-tone oscillation.
    HighFrequency,
    /// Flat baseline with a recurring smooth bump.
    SeasonalSpike,
    /// Piecewise-constant level with ramped transitions.
    StepChange,
}

impl ChannelKind {
    pub const ALL: [ChannelKind; 5] = [
        ChannelKind::Stationary,
        ChannelKind::Periodic,
        ChannelKind::HighFrequency,
        ChannelKind::SeasonalSpike,
        ChannelKind::StepChange,
    ];

    fn name(self) -> &'static str {
        match self {
            ChannelKind::Stationary => "stationary",
            ChannelKind::Periodic => "periodic",
            ChannelKind::HighFrequency => "high_frequency",
            ChannelKind::SeasonalSpike => "seasonal_spike",
            ChannelKind::StepChange => "step_change",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub length: usize,
    pub channels: Vec<ChannelKind>,
    /// Fraction of all timesteps labelled anomalous, in `[0, 0.5)`.
    pub anomaly_rate: f64,
    /// Anomalies are only injected at or after this fraction of the series.
    pub anomaly_start: f64,
    /// Standard deviation of the additive white noise.
    pub noise: f64,
    /// Segment length range (inclusive).
    pub min_segment: usize,
    pub max_segment: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            length: 20_000,
            channels: ChannelKind::ALL.to_vec(),
            anomaly_rate: 0.05,
            anomaly_start: 0.85,
            noise: 0.02,
            min_segment: 10,
            max_segment: 40,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum AnomalyKind {
    /// Alternating-sign spike train.
    SpikeBurst,
    /// Temporary offset of the level.
    LevelShift,
    /// Reading falls to a floor value.
    Dropout,
}

const DROPOUT_FLOOR: f64 = -2.0;

pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<TimeSeriesDataset> {
    if !(0.0..0.5).contains(&spec.anomaly_rate) {
        return Err(Error::Parameter(format!(
            "anomaly rate must lie in [0, 0.5), got {}",
            spec.anomaly_rate
        )));
    }
    if !(0.0..1.0).contains(&spec.anomaly_start) {
        return Err(Error::Parameter(format!(
            "anomaly_start must lie in [0, 1), got {}",
            spec.anomaly_start
        )));
    }
    if spec.channels.is_empty() || spec.length < 2 {
        return Err(Error::Parameter("need at least one channel and two rows".into()));
    }
    if spec.min_segment == 0 || spec.max_segment < spec.min_segment {
        return Err(Error::Parameter(format!(
            "segment range [{}, {}] is empty",
            spec.min_segment, spec.max_segment
        )));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::Parameter(format!("noise must be >= 0, got {}", spec.noise)));
    }

    let t_len = spec.length;
    let n = spec.channels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let columns: Vec<Vec<f64>> = spec
        .channels
        .iter()
        .map(|&kind| channel(kind, t_len, spec.noise, &mut rng))
        .collect();
    let mut values = vec![0.0; t_len * n];
    for (f, col) in columns.iter().enumerate() {
        for (t, v) in col.iter().enumerate() {
            values[t * n + f] = *v;
        }
    }

    let mut labels = vec![false; t_len];
    let target = (spec.anomaly_rate * t_len as f64).round() as usize;
    if target > 0 {
        let region_start = (spec.anomaly_start * t_len as f64).ceil() as usize;
        let region = t_len - region_start;
        if target * 3 > region * 2 {
            return Err(Error::Parameter(format!(
                "{target} anomalous steps do not fit in the last {region} rows"
            )));
        }
        let mut placed = 0;
        let mut attempts = 0;
        while placed < target {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::Parameter("could not place anomaly segments".into()));
            }
            let len = rng
                .gen_range(spec.min_segment..=spec.max_segment)
                .min(target - placed);
            let start = rng.gen_range(region_start..t_len - len + 1);
            // keep one clean step between segments
            let lo = start.saturating_sub(1).max(region_start);
            let hi = (start + len + 1).min(t_len);
            if labels[lo..hi].iter().any(|&l| l) {
                continue;
            }
            let kind = match rng.gen_range(0..3) {
                0 => AnomalyKind::SpikeBurst,
                1 => AnomalyKind::LevelShift,
                _ => AnomalyKind::Dropout,
            };
            let n_affected = if n > 1 { rng.gen_range(1..=2.min(n)) } else { 1 };
            let affected = rand::seq::index::sample(&mut rng, n, n_affected);
            for f in affected.iter() {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let shift = sign * rng.gen_range(0.6..1.0);
                for (i, t) in (start..start + len).enumerate() {
                    let v = &mut values[t * n + f];
                    match kind {
                        AnomalyKind::SpikeBurst => {
                            let alt = if i % 2 == 0 { 1.0 } else { -1.0 };
                            *v += alt * sign * rng.gen_range(0.6..1.0);
                        }
                        AnomalyKind::LevelShift => *v += shift,
                        AnomalyKind::Dropout => *v = DROPOUT_FLOOR,
                    }
                }
            }
            labels[start..start + len].iter_mut().for_each(|l| *l = true);
            placed += len;
        }
    }

    let names = spec
        .channels
        .iter()
        .enumerate()
        .map(|(i, k)| format!("{}_{i}", k.name()))
        .collect();
    TimeSeriesDataset::new(values, names, Some(labels), None)
}

fn channel(kind: ChannelKind, len: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    use std::f64::consts::TAU;
    let mut out = Vec::with_capacity(len);
    match kind {
        ChannelKind::Stationary => {
            let mut s = 0.0;
            for _ in 0..len {
                s = 0.95 * s + 0.05 * rng.sample::<f64, _>(StandardNormal);
                out.push(s);
            }
        }
        ChannelKind::Periodic => {
            let phase = rng.gen_range(0.0..TAU);
            for t in 0..len {
                out.push((TAU * t as f64 / 48.0 + phase).sin());
            }
        }
        ChannelKind::HighFrequency => {
            for t in 0..len {
                let x = t as f64;
                out.push(0.6 * (TAU * x / 5.0).sin() + 0.4 * (TAU * x / 11.0).sin());
            }
        }
        ChannelKind::SeasonalSpike => {
            let offset = rng.gen_range(0..60);
            for t in 0..len {
                let d = ((t + offset) % 60) as f64 - 30.0;
                out.push(1.5 * (-d * d / 18.0).exp());
            }
        }
        ChannelKind::StepChange => {
            let mut level = rng.gen_range(-1.0..1.0);
            let mut t = 0;
            while t < len {
                let hold = rng.gen_range(300..700);
                for _ in 0..hold.min(len - t) {
                    out.push(level);
                }
                t += hold;
                let next = rng.gen_range(-1.0..1.0);
                let ramp = 20;
                for r in 0..ramp {
                    if t >= len {
                        break;
                    }
                    out.push(level + (next - level) * (r + 1) as f64 / ramp as f64);
                    t += 1;
                }
                level = next;
            }
            out.truncate(len);
        }
    }
    if noise > 0.0 {
        for v in &mut out {
            *v += noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(rate: f64, len: usize) -> SynthSpec {
        SynthSpec {
            length: len,
            anomaly_rate: rate,
            ..Default::default()
        }
    }

    #[test]
    fn zero_rate_has_no_labels() {
        let d = synth_generate(&small(0.0, 2000), 1).unwrap();
        assert!(d.labels().unwrap().iter().all(|&l| !l));
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = synth_generate(&small(0.05, 3000), 7).unwrap();
        let b = synth_generate(&small(0.05, 3000), 7).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&small(0.05, 3000), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn anomaly_fraction_in_band() {
        let d = synth_generate(&small(0.05, 10_000), 3).unwrap();
        let count = d.labels().unwrap().iter().filter(|&&l| l).count();
        assert!((400..=600).contains(&count), "{count}");
        // nothing before the anomaly region
        assert!(d.labels().unwrap()[..8500].iter().all(|&l| !l));
    }

    #[test]
    fn rate_out_of_range() {
        assert!(matches!(synth_generate(&small(0.9, 1000), 1), Err(Error::Parameter(_))));
        assert!(matches!(synth_generate(&small(-0.1, 1000), 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn five_channels() {
        let d = synth_generate(&small(0.05, 1000), 1).unwrap();
        assert_eq!(d.n_features(), 5);
        assert!(!d.has_missing());
    }
}
