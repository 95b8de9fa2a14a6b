use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimators::{Estimator, FilterKind, FilterSetup};
use crate::model::{coulomb_count, simulate_with, BatteryState, SimulationLog};
use crate::ocv::OcvCurve;

use super::config::ExperimentConfig;
use super::metrics::{metrics_csv, RunMetrics, CONVERGENCE_DWELL};

pub const TRACE_HEADER: &str = "t_s,soc_true,soc_bar,soc_hat,v1_hat,v2_hat,p_soc,innovation_v";

/// Estimate held before consuming the sample at `t_s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t_s: f64,
    pub soc_true: Option<f64>,
    pub soc_bar: Option<f64>,
    pub soc_hat: f64,
    pub v1_hat: f64,
    pub v2_hat: f64,
    pub p_soc: Option<f64>,
    /// Innovation produced by consuming this sample; absent on the failing step.
    pub innovation_v: Option<f64>,
}

#[derive(Debug)]
pub struct FilterRun {
    pub kind: FilterKind,
    pub rows: Vec<TraceRow>,
    pub failure: Option<Error>,
    pub stream_sha256: String,
}

impl FilterRun {
    pub fn failed_at(&self) -> Option<usize> {
        match &self.failure {
            Some(Error::Numerical { step, .. }) => Some(*step),
            Some(_) => Some(self.rows.len().saturating_sub(1)),
            None => None,
        }
    }

    /// Metrics over the emitted rows; requires truth in every row.
    pub fn metrics(&self, threshold: f64) -> Option<RunMetrics> {
        let errors: Option<Vec<f64>> = self.rows.iter().map(|r| r.soc_true.map(|t| r.soc_hat - t)).collect();
        let errors = errors?;
        let times: Vec<f64> = self.rows.iter().map(|r| r.t_s).collect();
        let est: Vec<f64> = self.rows.iter().map(|r| r.soc_hat).collect();
        Some(RunMetrics::compute(&times, &errors, &est, threshold, self.failed_at()))
    }

    pub fn to_csv_string(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = format!("# stream_sha256={}\n{TRACE_HEADER}\n", self.stream_sha256);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.t_s,
                opt(r.soc_true),
                opt(r.soc_bar),
                r.soc_hat,
                r.v1_hat,
                r.v2_hat,
                opt(r.p_soc),
                opt(r.innovation_v)
            );
        }
        out
    }
}

/// SHA-256 over the `(t, current, voltage)` triples a filter consumes.
pub fn stream_checksum(log: &SimulationLog) -> String {
    let mut h = Sha256::new();
    for r in &log.rows {
        h.update(r.t_s.to_le_bytes());
        h.update(r.current_a.to_le_bytes());
        h.update(r.voltage_v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Runs one filter over the log. A numerical failure ends the run; rows
/// emitted up to and including the failing step are kept.
pub fn run_filter(kind: FilterKind, setup: FilterSetup, initial: BatteryState, log: &SimulationLog) -> FilterRun {
    let stream_sha256 = stream_checksum(log);
    let dt = log.dt_s();
    let mut est = Estimator::new(kind, setup, initial);
    let mut rows = Vec::with_capacity(log.len());
    let mut failure = None;
    for r in &log.rows {
        let s = *est.state();
        let mut row = TraceRow {
            t_s: r.t_s,
            soc_true: r.truth.map(|x| x.soc),
            soc_bar: match kind {
                FilterKind::Xkf | FilterKind::Nlo => s.x_bar.map(|x| x.soc),
                _ => None,
            },
            soc_hat: s.x_hat.soc,
            v1_hat: s.x_hat.v1,
            v2_hat: s.x_hat.v2,
            p_soc: s.p.map(|p| p[(2, 2)]),
            innovation_v: None,
        };
        match est.step(r.current_a, r.voltage_v, dt) {
            Ok(u) => {
                row.innovation_v = Some(u.innovation_v);
                rows.push(row);
            }
            Err(e) => {
                log::warn!("{kind} stopped at t = {} s: {e}", r.t_s);
                rows.push(row);
                failure = Some(e);
                break;
            }
        }
    }
    FilterRun {
        kind,
        rows,
        failure,
        stream_sha256,
    }
}

#[derive(Debug)]
pub struct ExperimentResult {
    /// Plant log with the true current.
    pub truth: SimulationLog,
    /// The stream the filters consumed (current offset by the configured bias).
    pub measured: SimulationLog,
    /// Coulomb count of the measured current from the true initial SoC.
    pub coulomb: Vec<(f64, f64)>,
    pub runs: BTreeMap<FilterKind, (FilterRun, RunMetrics)>,
}

impl ExperimentResult {
    pub fn all_failed(&self) -> bool {
        self.runs.values().all(|(r, _)| r.failure.is_some())
    }

    pub fn any_failed(&self) -> bool {
        self.runs.values().any(|(r, _)| r.failure.is_some())
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(self.runs.iter().map(|(k, (_, m))| (*k, m)))
    }

    pub fn coulomb_csv(&self) -> String {
        let mut out = String::from("t_s,soc_coulomb,soc_true\n");
        for ((t, soc), row) in self.coulomb.iter().zip(&self.truth.rows) {
            let truth = row.truth.map(|x| x.soc.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{t},{soc},{truth}");
        }
        out
    }

    /// Writes `config.txt`, `truth.csv`, `coulomb.csv`, one trace per filter
    /// and `metrics.csv` into `dir`.
    pub fn write(&self, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let put = |name: &str, text: String| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::file(path, e))
        };
        put("config.txt", cfg.to_kv_string())?;
        put("truth.csv", self.truth.to_csv_string())?;
        put("coulomb.csv", self.coulomb_csv())?;
        for (kind, (run, _)) in &self.runs {
            put(&format!("{kind}.trace.csv"), run.to_csv_string())?;
        }
        put("metrics.csv", self.metrics_csv())
    }
}

/// Applies a constant sensor bias to the logged current.
pub fn with_current_bias(log: &SimulationLog, bias_a: f64) -> SimulationLog {
    let mut out = log.clone();
    for r in &mut out.rows {
        r.current_a += bias_a;
    }
    out
}

/// Runs every selected filter over one shared measurement stream.
fn run_filters(
    cfg: &ExperimentConfig,
    params: crate::model::BatteryParams,
    curve: Arc<OcvCurve>,
    measured: &SimulationLog,
) -> BTreeMap<FilterKind, (FilterRun, RunMetrics)> {
    let initial = BatteryState::at_rest(cfg.soc_est0);
    cfg.filters
        .par_iter()
        .map(|&kind| {
            let run = run_filter(kind, cfg.filter_setup(params, curve.clone()), initial, measured);
            let metrics = run.metrics(cfg.threshold).expect("simulated logs carry truth");
            (kind, (run, metrics))
        })
        .collect()
}

/// Simulates the plant once and races the configured filters on it. Writes
/// outputs when `cfg.output_dir` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let resolved = cfg.resolve()?;
    let truth = simulate_with(
        &resolved.params,
        &resolved.curve_true,
        &resolved.cycle,
        BatteryState::at_rest(cfg.soc_true0),
        &cfg.noise,
        cfg.plant_discretization,
    )?;
    let measured = with_current_bias(&truth, cfg.current_bias_a);
    let samples: Vec<(f64, f64)> = measured.rows.iter().map(|r| (r.t_s, r.current_a)).collect();
    let coulomb = coulomb_count(cfg.soc_true0, &samples, resolved.params.capacity_as)?;
    let runs = run_filters(cfg, resolved.params, resolved.curve_filter.clone(), &measured);
    let result = ExperimentResult {
        truth,
        measured,
        coulomb,
        runs,
    };
    if let Some(dir) = &cfg.output_dir {
        result.write(cfg, dir)?;
    }
    Ok(result)
}

#[derive(Debug)]
pub struct TemperatureStudy {
    pub filter: FilterKind,
    pub truth: SimulationLog,
    pub matched: (FilterRun, RunMetrics),
    pub mismatched: (FilterRun, RunMetrics),
    /// True SoC below which the mismatched run's error stays above twice the
    /// matched run's (60-sample moving averages); `None` if that never happens.
    pub divergence_onset_soc: Option<f64>,
}

impl TemperatureStudy {
    /// Mean `|error|` of (matched, mismatched) over samples with true SoC
    /// below `soc`.
    pub fn low_soc_mean_abs_error(&self, soc: f64) -> (f64, f64) {
        let mean = |run: &FilterRun| {
            let errs: Vec<f64> = run
                .rows
                .iter()
                .filter_map(|r| r.soc_true.filter(|t| *t < soc).map(|t| (r.soc_hat - t).abs()))
                .collect();
            errs.iter().sum::<f64>() / errs.len() as f64
        };
        (mean(&self.matched.0), mean(&self.mismatched.0))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let put = |name: &str, text: String| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::file(path, e))
        };
        put("truth.csv", self.truth.to_csv_string())?;
        put(
            &format!("{}.matched.trace.csv", self.filter),
            self.matched.0.to_csv_string(),
        )?;
        put(
            &format!("{}.mismatched.trace.csv", self.filter),
            self.mismatched.0.to_csv_string(),
        )?;
        let mut metrics = String::from("run,");
        metrics.push_str(super::metrics::METRICS_HEADER);
        metrics.push('\n');
        let _ = writeln!(metrics, "matched,{}", self.matched.1.csv_row(self.filter));
        let _ = writeln!(metrics, "mismatched,{}", self.mismatched.1.csv_row(self.filter));
        put("metrics.csv", metrics)?;
        let onset = self.divergence_onset_soc.map(|s| s.to_string()).unwrap_or_default();
        put("divergence.txt", format!("divergence_onset_soc={onset}\n"))
    }
}

/// Simulates on `curve_true` and runs the first configured filter twice:
/// once with `curve_true`, once with `curve_filter`.
pub fn run_temperature_study(
    cfg: &ExperimentConfig,
    curve_true: &OcvCurve,
    curve_filter: &OcvCurve,
) -> Result<TemperatureStudy> {
    let resolved = cfg.resolve()?;
    let filter = cfg.filters[0];
    let truth = simulate_with(
        &resolved.params,
        curve_true,
        &resolved.cycle,
        BatteryState::at_rest(cfg.soc_true0),
        &cfg.noise,
        cfg.plant_discretization,
    )?;
    let measured = with_current_bias(&truth, cfg.current_bias_a);
    let initial = BatteryState::at_rest(cfg.soc_est0);
    let curves = [Arc::new(curve_true.clone()), Arc::new(curve_filter.clone())];
    let mut runs: Vec<(FilterRun, RunMetrics)> = curves
        .par_iter()
        .map(|c| {
            let run = run_filter(filter, cfg.filter_setup(resolved.params, c.clone()), initial, &measured);
            let m = run.metrics(cfg.threshold).expect("simulated logs carry truth");
            (run, m)
        })
        .collect();
    let mismatched = runs.pop().expect("two runs");
    let matched = runs.pop().expect("two runs");
    let divergence_onset_soc = divergence_onset(&matched.0, &mismatched.0);
    let study = TemperatureStudy {
        filter,
        truth,
        matched,
        mismatched,
        divergence_onset_soc,
    };
    if let Some(dir) = &cfg.output_dir {
        study.write(dir)?;
    }
    Ok(study)
}

/// Earliest row after which the trailing 60-sample mean of the mismatched
/// `|error|` stays above twice the matched one; reports the true SoC there.
fn divergence_onset(matched: &FilterRun, mismatched: &FilterRun) -> Option<f64> {
    let n = matched.rows.len().min(mismatched.rows.len());
    let abs_err = |r: &TraceRow| r.soc_true.map(|t| (r.soc_hat - t).abs()).unwrap_or(0.0);
    let smooth = |rows: &[TraceRow]| -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        let mut sum = 0.0;
        for k in 0..n {
            sum += abs_err(&rows[k]);
            if k >= CONVERGENCE_DWELL {
                sum -= abs_err(&rows[k - CONVERGENCE_DWELL]);
            }
            out.push(sum / (k + 1).min(CONVERGENCE_DWELL) as f64);
        }
        out
    };
    let (a, b) = (smooth(&matched.rows), smooth(&mismatched.rows));
    let mut onset = None;
    for k in (0..n).rev() {
        if b[k] > 2.0 * a[k] {
            onset = Some(k);
        } else {
            break;
        }
    }
    onset.and_then(|k| matched.rows[k].soc_true)
}
