use std::fmt::Write as _;

use crate::estimators::FilterKind;

/// Consecutive samples the error must stay inside the threshold.
pub const CONVERGENCE_DWELL: usize = 60;

pub const METRICS_HEADER: &str =
    "filter,soc_rmse,terminal_error,convergence_time_s,max_overshoot,saturation_count,failed_at";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMetrics {
    pub soc_rmse: f64,
    /// `|error|` at the last emitted sample.
    pub terminal_error: f64,
    pub convergence_time_s: Option<f64>,
    /// Largest excursion past the truth on the side opposite the initial error.
    pub max_overshoot: f64,
    /// Samples with the estimated SoC outside `[0, 1]`.
    pub saturation_count: usize,
    /// Step at which the filter stopped on a numerical failure.
    pub failed_at: Option<usize>,
}

impl RunMetrics {
    /// `errors[k] = estimate - truth` at `times_s[k]`.
    pub fn compute(
        times_s: &[f64],
        errors: &[f64],
        estimates: &[f64],
        threshold: f64,
        failed_at: Option<usize>,
    ) -> Self {
        let n = errors.len();
        if n == 0 {
            return RunMetrics {
                soc_rmse: f64::NAN,
                terminal_error: f64::NAN,
                convergence_time_s: None,
                max_overshoot: 0.0,
                saturation_count: 0,
                failed_at,
            };
        }
        let soc_rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt();
        let sign0 = if errors[0] > 0.0 {
            1.0
        } else if errors[0] < 0.0 {
            -1.0
        } else {
            0.0
        };
        let max_overshoot = errors.iter().map(|e| -sign0 * e).fold(0.0, f64::max);
        RunMetrics {
            soc_rmse,
            terminal_error: errors[n - 1].abs(),
            convergence_time_s: convergence_index(errors, threshold).map(|k| times_s[k]),
            max_overshoot,
            saturation_count: estimates.iter().filter(|s| !(0.0..=1.0).contains(*s)).count(),
            failed_at,
        }
    }

    pub fn csv_row(&self, filter: FilterKind) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            filter,
            self.soc_rmse,
            self.terminal_error,
            opt(self.convergence_time_s.map(|t| t.to_string())),
            self.max_overshoot,
            self.saturation_count,
            opt(self.failed_at.map(|k| k.to_string())),
        )
    }
}

/// First index from which `|error| < threshold` holds for
/// [`CONVERGENCE_DWELL`] consecutive samples.
pub fn convergence_index(errors: &[f64], threshold: f64) -> Option<usize> {
    let mut run = 0;
    for (k, e) in errors.iter().enumerate() {
        if e.abs() < threshold {
            run += 1;
            if run == CONVERGENCE_DWELL {
                return Some(k + 1 - CONVERGENCE_DWELL);
            }
        } else {
            run = 0;
        }
    }
    None
}

pub fn metrics_csv<'a>(rows: impl IntoIterator<Item = (FilterKind, &'a RunMetrics)>) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for (kind, m) in rows {
        let _ = writeln!(out, "{}", m.csv_row(kind));
    }
    out
}
