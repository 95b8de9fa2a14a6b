//! Drive cycles: uniformly sampled current profiles.
//!
//! Positive current discharges the cell. Two generators produce synthetic
//! stand-ins for the standard dynamic-stress and urban-driving load profiles.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Relative tolerance on sample spacing when ingesting a cycle.
pub const TIMING_TOLERANCE: f64 = 1e-6;

/// Length of one dynamic-stress template period in seconds.
pub const DST_PERIOD_S: f64 = 360.0;

/// Net discharged charge per DST period, in ampere-seconds per ampere of peak.
pub const DST_NET_CHARGE_PER_PEAK: f64 = 45.0;

/// (duration s, fraction of peak current) for one 360 s period.
///
/// Step durations follow the 20-step dynamic stress test with power levels
/// reinterpreted as current fractions.
const DST_TEMPLATE: [(f64, f64); 20] = [
    (16.0, 0.0),
    (28.0, 0.125),
    (12.0, 0.25),
    (8.0, -0.125),
    (16.0, 0.0),
    (24.0, 0.125),
    (12.0, 0.25),
    (8.0, -0.125),
    (16.0, 0.0),
    (24.0, 0.125),
    (12.0, 0.25),
    (8.0, -0.125),
    (16.0, 0.0),
    (36.0, 0.125),
    (8.0, 1.0),
    (24.0, 0.625),
    (8.0, -0.25),
    (32.0, 0.25),
    (8.0, -0.5),
    (44.0, 0.0),
];

#[derive(Debug, Clone, PartialEq)]
pub struct DriveCycle {
    pub name: String,
    pub dt_s: f64,
    pub currents: Vec<f64>,
}

impl DriveCycle {
    pub fn new(name: impl Into<String>, dt_s: f64, currents: Vec<f64>) -> Result<Self> {
        if !(dt_s > 0.0) || !dt_s.is_finite() {
            return Err(Error::input(format!("sample period must be positive, got {dt_s}")));
        }
        if currents.is_empty() {
            return Err(Error::input("drive cycle has no samples"));
        }
        Ok(DriveCycle {
            name: name.into(),
            dt_s,
            currents,
        })
    }

    pub fn len(&self) -> usize {
        self.currents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.currents.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.dt_s * self.currents.len() as f64
    }

    pub fn time_at(&self, k: usize) -> f64 {
        k as f64 * self.dt_s
    }

    /// Trapezoidal charge throughput, ampere-seconds.
    pub fn net_charge_as(&self) -> f64 {
        self.currents.windows(2).map(|w| 0.5 * (w[0] + w[1]) * self.dt_s).sum()
    }

    pub fn peak_abs(&self) -> f64 {
        self.currents.iter().fold(0.0, |m, i| m.max(i.abs()))
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("t_s,current_a\n");
        for (k, i) in self.currents.iter().enumerate() {
            out.push_str(&format!("{},{}\n", self.time_at(k), i));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::file(path, e))
    }
}

/// Repeats the dynamic-stress template, scaled so the largest magnitude is
/// `peak_a`. The final period is truncated to fit `duration_s`.
pub fn generate_dst_like(duration_s: f64, peak_a: f64, dt_s: f64) -> Result<DriveCycle> {
    check_positive(&[("duration_s", duration_s), ("peak_a", peak_a), ("dt_s", dt_s)])?;
    let n = (duration_s / dt_s).round() as usize;
    let currents = (0..n)
        .map(|k| peak_a * dst_fraction_at((k as f64 * dt_s).rem_euclid(DST_PERIOD_S)))
        .collect();
    DriveCycle::new("dst", dt_s, currents)
}

fn dst_fraction_at(t_in_period: f64) -> f64 {
    let mut start = 0.0;
    for (duration, fraction) in DST_TEMPLATE {
        if t_in_period < start + duration {
            return fraction;
        }
        start += duration;
    }
    0.0
}

/// Seeded urban-driving surrogate.
///
/// The profile is a chain of acceleration pulses, cruise plateaus, idle gaps
/// and short regenerative (negative) braking spikes, smoothed with a 5-sample
/// moving average and clipped to `±peak_a`.
pub fn generate_fuds_like(duration_s: f64, peak_a: f64, dt_s: f64, seed: u64) -> Result<DriveCycle> {
    check_positive(&[("duration_s", duration_s), ("peak_a", peak_a), ("dt_s", dt_s)])?;
    let n = (duration_s / dt_s).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = Vec::with_capacity(n);
    while raw.len() < n {
        let (level, seconds) = match rng.random_range(0..10) {
            0..=2 => (rng.random_range(0.5..1.0), rng.random_range(4.0..15.0)),
            3..=5 => (rng.random_range(0.15..0.45), rng.random_range(10.0..60.0)),
            6..=7 => (-rng.random_range(0.2..0.6), rng.random_range(3.0..10.0)),
            _ => (0.0, rng.random_range(5.0..25.0)),
        };
        let samples = ((seconds / dt_s).round() as usize).max(1);
        raw.extend(std::iter::repeat(level * peak_a).take(samples));
    }
    raw.truncate(n);

    const HALF: usize = 2;
    let currents = (0..n)
        .map(|k| {
            let lo = k.saturating_sub(HALF);
            let hi = (k + HALF + 1).min(n);
            let mean = raw[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            mean.clamp(-peak_a, peak_a)
        })
        .collect();
    DriveCycle::new("fuds", dt_s, currents)
}

pub fn ingest_cycle_csv(path: impl AsRef<Path>) -> Result<DriveCycle> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let name = path
        .file_stem()
        .map_or_else(|| "cycle".to_string(), |s| s.to_string_lossy().into_owned());
    parse_cycle_csv(&name, &text)
}

/// Parses `t_s,current_a` rows. The period is taken from the first interval
/// and every later interval must match it within [`TIMING_TOLERANCE`].
pub fn parse_cycle_csv(name: &str, text: &str) -> Result<DriveCycle> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(tc), Some(ic)) = (col("t_s"), col("current_a")) else {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected columns t_s,current_a, found `{}`", headers.as_slice()),
        });
    };

    let mut times = Vec::new();
    let mut currents = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let num = |idx: usize| -> Result<f64> {
            let raw = record.get(idx).unwrap_or("");
            raw.parse().map_err(|_| Error::Parse {
                line,
                message: format!("not a number: {raw:?}"),
            })
        };
        times.push(num(tc)?);
        currents.push(num(ic)?);
    }
    if currents.is_empty() {
        return Err(Error::input("drive cycle file has no samples"));
    }

    let dt_s = if times.len() >= 2 { times[1] - times[0] } else { 1.0 };
    if times.len() >= 2 && !(dt_s > 0.0) {
        return Err(Error::Format {
            row: 2,
            message: format!("time does not increase ({} -> {})", times[0], times[1]),
        });
    }
    for k in 2..times.len() {
        let step = times[k] - times[k - 1];
        if (step - dt_s).abs() > TIMING_TOLERANCE * dt_s {
            return Err(Error::Format {
                row: k + 1,
                message: format!("interval {step} differs from sample period {dt_s}"),
            });
        }
    }
    DriveCycle::new(name, dt_s, currents)
}

fn check_positive(args: &[(&str, f64)]) -> Result<()> {
    for (name, v) in args {
        if !(*v > 0.0) || !v.is_finite() {
            return Err(Error::input(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(())
}
