//! Offline identification: RMS model error, grid-search parameter fitting
//! and innovation-based covariance matching.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, RowVector3, Vector4};
use rayon::prelude::*;

use crate::cycle::TIMING_TOLERANCE;
use crate::error::{Error, Result};
use crate::estimators::{measurement_jacobian, Estimator, FilterKind, FilterSetup};
use crate::model::{BatteryParams, BatteryState, SimulationLog};
use crate::ocv::OcvCurve;

/// `sqrt(mean((m - e)^2))`.
pub fn rms_error(measured: &[f64], estimated: &[f64]) -> Result<f64> {
    if measured.len() != estimated.len() {
        return Err(Error::input(format!(
            "series lengths differ ({} vs {})",
            measured.len(),
            estimated.len()
        )));
    }
    if measured.is_empty() {
        return Err(Error::input("rms of an empty series"));
    }
    let sse: f64 = measured.iter().zip(estimated).map(|(m, e)| (m - e) * (m - e)).sum();
    Ok((sse / measured.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisScale {
    Linear,
    /// Points evenly spaced in `ln(value)`.
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    /// Odd, so that every refinement keeps the incumbent on the grid.
    pub points: usize,
    pub scale: AxisScale,
}

impl Axis {
    pub fn linear(lo: f64, hi: f64, points: usize) -> Self {
        Axis {
            lo,
            hi,
            points,
            scale: AxisScale::Linear,
        }
    }

    pub fn log(lo: f64, hi: f64, points: usize) -> Self {
        Axis {
            lo,
            hi,
            points,
            scale: AxisScale::Log,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.points == 0 {
            return Err(Error::input(format!("grid axis {name} is empty")));
        }
        if self.points % 2 == 0 {
            return Err(Error::input(format!(
                "grid axis {name} needs an odd point count, got {}",
                self.points
            )));
        }
        if !(self.lo > 0.0 && self.lo <= self.hi && self.hi.is_finite()) {
            return Err(Error::input(format!(
                "grid axis {name} bounds must satisfy 0 < lo <= hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    fn warp(&self, v: f64) -> f64 {
        match self.scale {
            AxisScale::Linear => v,
            AxisScale::Log => v.ln(),
        }
    }

    fn unwarp(&self, u: f64) -> f64 {
        match self.scale {
            AxisScale::Linear => u,
            AxisScale::Log => u.exp(),
        }
    }

    /// Grid points `center + j step`, `|j| <= points/2`, kept inside the bounds.
    fn values(&self, center: f64, step: f64) -> Vec<f64> {
        let (lo, hi) = (self.warp(self.lo), self.warp(self.hi));
        let slack = 1e-12 * (hi - lo).abs().max(1.0);
        let m = (self.points / 2) as i64;
        (-m..=m)
            .map(|j| center + j as f64 * step)
            .filter(|u| *u >= lo - slack && *u <= hi + slack)
            .collect()
    }
}

/// Search box over `(R, tau1, tau2, R1, R2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub r_ohm: Axis,
    pub tau1_s: Axis,
    pub tau2_s: Axis,
    pub r1: Axis,
    pub r2: Axis,
    /// Refinement passes after the coarse pass.
    pub refinements: usize,
    /// Factor by which each refinement shrinks the grid spacing.
    pub shrink: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            r_ohm: Axis::linear(0.01, 0.5, 21),
            tau1_s: Axis::log(10.0, 1e6, 11),
            tau2_s: Axis::log(10.0, 1e6, 11),
            r1: Axis::log(1e-3, 0.2, 11),
            r2: Axis::log(1e-3, 0.2, 11),
            refinements: 2,
            shrink: 10.0,
        }
    }
}

const AXIS_NAMES: [&str; 5] = ["r_ohm", "tau1_s", "tau2_s", "r1", "r2"];

impl GridSpec {
    fn axes(&self) -> [&Axis; 5] {
        [&self.r_ohm, &self.tau1_s, &self.tau2_s, &self.r1, &self.r2]
    }

    pub fn validate(&self) -> Result<()> {
        for (axis, name) in self.axes().into_iter().zip(AXIS_NAMES) {
            axis.validate(name)?;
        }
        if !(self.shrink > 1.0) {
            return Err(Error::input(format!(
                "grid shrink factor must exceed 1, got {}",
                self.shrink
            )));
        }
        Ok(())
    }
}

/// Spacing of one axis in one pass: additive for linear axes, a ratio
/// between neighbours for log axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisStep {
    pub name: &'static str,
    pub scale: AxisScale,
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub capacity_as: f64,
    /// SoC at the first sample; defaults to the log's recorded truth.
    pub initial_soc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub params: BatteryParams,
    pub times_s: Vec<f64>,
    /// Measured minus modelled terminal voltage per sample.
    pub residuals: Vec<f64>,
    /// One entry per pass, in axis order `r_ohm, tau1_s, tau2_s, r1, r2`.
    pub grid_resolution: Vec<[AxisStep; 5]>,
    /// Best RMS found by each pass.
    pub pass_rms: Vec<f64>,
    /// Set when the current never varies, so the RC pairs are unidentifiable.
    pub unidentifiable_rc: bool,
}

impl FitReport {
    pub fn rms_v(&self) -> f64 {
        let sse: f64 = self.residuals.iter().map(|r| r * r).sum();
        (sse / self.residuals.len() as f64).sqrt()
    }

    /// Final-pass spacing of the named axis.
    pub fn final_resolution(&self, name: &str) -> Option<AxisStep> {
        self.grid_resolution.last()?.iter().copied().find(|s| s.name == name)
    }

    /// Parameters followed by fit diagnostics; loadable as a params file.
    pub fn to_kv_string(&self) -> String {
        let mut out = self.params.to_kv_string();
        let _ = writeln!(out, "rms_v={}", self.rms_v());
        let _ = writeln!(out, "samples={}", self.residuals.len());
        let _ = writeln!(out, "unidentifiable_rc={}", self.unidentifiable_rc);
        for (pass, (steps, rms)) in self.grid_resolution.iter().zip(&self.pass_rms).enumerate() {
            let _ = writeln!(out, "pass{pass}_rms_v={rms}");
            for s in steps {
                let kind = match s.scale {
                    AxisScale::Linear => "step",
                    AxisScale::Log => "ratio",
                };
                let _ = writeln!(out, "pass{pass}_{}_{kind}={}", s.name, s.step);
            }
        }
        out
    }

    pub fn residuals_csv(&self) -> String {
        let mut out = String::from("t_s,residual_v\n");
        for (t, r) in self.times_s.iter().zip(&self.residuals) {
            let _ = writeln!(out, "{t},{r}");
        }
        out
    }

    pub fn write(&self, kv_path: impl AsRef<Path>, residuals_path: impl AsRef<Path>) -> Result<()> {
        let kv_path = kv_path.as_ref();
        std::fs::write(kv_path, self.to_kv_string()).map_err(|e| Error::file(kv_path, e))?;
        let rp = residuals_path.as_ref();
        std::fs::write(rp, self.residuals_csv()).map_err(|e| Error::file(rp, e))
    }
}

/// Response of a unit-resistance RC branch to the logged current:
/// `u+ = u (1 - dt/tau) + dt i / tau`, so that `v = R u`.
fn unit_rc_response(currents: &[f64], dt: f64, tau: f64) -> Vec<f64> {
    let mut u = 0.0;
    currents
        .iter()
        .map(|&i| {
            let out = u;
            u = u * (1.0 - dt / tau) + dt * i / tau;
            out
        })
        .collect()
}

/// Euler Coulomb count, matching the plant's own quadrature.
fn coulomb_soc(currents: &[f64], dt: f64, soc0: f64, capacity_as: f64) -> Vec<f64> {
    let mut soc = soc0;
    currents
        .iter()
        .map(|&i| {
            let out = soc;
            soc -= dt * i / capacity_as;
            out
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fits `R, R1, C1, R2, C2` by coarse-to-fine grid search on the RMS of
/// measured minus modelled terminal voltage. The model replays the logged
/// current from rest with Coulomb-counted SoC.
pub fn fit_parameters(log: &SimulationLog, curve: &OcvCurve, grid: &GridSpec, opts: &FitOptions) -> Result<FitReport> {
    grid.validate()?;
    if log.len() < 2 {
        return Err(Error::input("fit needs at least two samples"));
    }
    if !(opts.capacity_as > 0.0) {
        return Err(Error::input("capacity must be positive"));
    }
    let dt = log.dt_s();
    for (k, w) in log.rows.windows(2).enumerate() {
        if ((w[1].t_s - w[0].t_s) - dt).abs() > TIMING_TOLERANCE * dt {
            return Err(Error::Format {
                row: k + 2,
                message: "fit requires a uniform sample period".into(),
            });
        }
    }
    let soc0 = match (opts.initial_soc, log.rows[0].truth) {
        (Some(s), _) => s,
        (None, Some(x)) => x.soc,
        (None, None) => return Err(Error::input("initial SoC is required when the log carries no truth")),
    };

    let currents = log.currents();
    let unidentifiable_rc = currents.iter().all(|&i| (i - currents[0]).abs() <= 1e-12);
    if unidentifiable_rc {
        log::warn!("current is constant throughout the log; RC pairs are not identifiable");
    }
    let soc = coulomb_soc(&currents, dt, soc0, opts.capacity_as);
    // Residual = y + R i + R1 u1 + R2 u2 with y = V - V_oc(soc).
    let y: Vec<f64> = log
        .rows
        .iter()
        .zip(&soc)
        .map(|(r, s)| r.voltage_v - curve.voltage_at(*s))
        .collect();
    let n = y.len() as f64;

    let axes = grid.axes();
    let mut centers: [f64; 5] = std::array::from_fn(|a| 0.5 * (axes[a].warp(axes[a].lo) + axes[a].warp(axes[a].hi)));
    let mut steps: [f64; 5] = std::array::from_fn(|a| {
        let span = axes[a].warp(axes[a].hi) - axes[a].warp(axes[a].lo);
        if axes[a].points > 1 {
            span / (axes[a].points - 1) as f64
        } else {
            0.0
        }
    });

    let (yy, yi, ii) = (dot(&y, &y), dot(&y, &currents), dot(&currents, &currents));
    let mut grid_resolution = Vec::new();
    let mut pass_rms = Vec::new();
    let mut best: Option<([f64; 5], f64)> = None;

    for _pass in 0..=grid.refinements {
        let values: [Vec<f64>; 5] = std::array::from_fn(|a| axes[a].values(centers[a], steps[a]));
        // Each tau value is shared by both branches when the axes coincide;
        // responses are cached per distinct value.
        let taus1: Vec<f64> = values[1].iter().map(|&u| axes[1].unwarp(u)).collect();
        let taus2: Vec<f64> = values[2].iter().map(|&u| axes[2].unwarp(u)).collect();
        let resp1: Vec<Vec<f64>> = taus1.par_iter().map(|&t| unit_rc_response(&currents, dt, t)).collect();
        let resp2: Vec<Vec<f64>> = taus2.par_iter().map(|&t| unit_rc_response(&currents, dt, t)).collect();

        let candidates: Vec<([f64; 5], f64)> = (0..values[1].len() * values[2].len())
            .into_par_iter()
            .map(|idx| {
                let (a, b) = (idx / values[2].len(), idx % values[2].len());
                let (u1, u2) = (&resp1[a], &resp2[b]);
                let gram = Matrix4::new(
                    yy,
                    yi,
                    dot(&y, u1),
                    dot(&y, u2),
                    yi,
                    ii,
                    dot(&currents, u1),
                    dot(&currents, u2),
                    dot(&y, u1),
                    dot(&currents, u1),
                    dot(u1, u1),
                    dot(u1, u2),
                    dot(&y, u2),
                    dot(&currents, u2),
                    dot(u1, u2),
                    dot(u2, u2),
                );
                let mut local: Option<([f64; 5], f64)> = None;
                for &ur in &values[0] {
                    for &u3 in &values[3] {
                        for &u4 in &values[4] {
                            let w = Vector4::new(1.0, axes[0].unwarp(ur), axes[3].unwarp(u3), axes[4].unwarp(u4));
                            let sse = (w.transpose() * gram * w)[0].max(0.0);
                            let cand = ([ur, values[1][a], values[2][b], u3, u4], sse);
                            if local.as_ref().map_or(true, |l| better(&cand, l)) {
                                local = Some(cand);
                            }
                        }
                    }
                }
                local.expect("grid axes are non-empty")
            })
            .collect();
        for cand in candidates {
            if best.as_ref().map_or(true, |b| better(&cand, b)) {
                best = Some(cand);
            }
        }
        let (coords, sse) = best.expect("at least one candidate");
        pass_rms.push((sse / n).sqrt());
        grid_resolution.push(std::array::from_fn(|a| AxisStep {
            name: AXIS_NAMES[a],
            scale: axes[a].scale,
            step: match axes[a].scale {
                AxisScale::Linear => steps[a],
                AxisScale::Log => steps[a].exp(),
            },
        }));
        centers = coords;
        for s in steps.iter_mut() {
            *s /= grid.shrink;
        }
    }

    let c = best.expect("grid produced a candidate").0;
    let v: [f64; 5] = std::array::from_fn(|a| axes[a].unwarp(c[a]));
    let params = BatteryParams::new(v[0], v[3], v[1] / v[3], v[4], v[2] / v[4], opts.capacity_as)?;
    let residuals = model_residuals(&params, curve, log, soc0);
    Ok(FitReport {
        params,
        times_s: log.rows.iter().map(|r| r.t_s).collect(),
        residuals,
        grid_resolution,
        pass_rms,
        unidentifiable_rc,
    })
}

/// Lower objective wins; ties go to smaller `R`, then lexicographic order.
fn better(a: &([f64; 5], f64), b: &([f64; 5], f64)) -> bool {
    a.1.total_cmp(&b.1)
        .then_with(|| {
            a.0.iter()
                .zip(&b.0)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .is_lt()
}

/// Measured minus modelled voltage when replaying the log through `params`
/// from rest with Euler Coulomb counting.
pub fn model_residuals(params: &BatteryParams, curve: &OcvCurve, log: &SimulationLog, soc0: f64) -> Vec<f64> {
    let dt = log.dt_s();
    let mut x = BatteryState::at_rest(soc0);
    log.rows
        .iter()
        .map(|r| {
            let v = crate::model::terminal_voltage(params, curve, &x, r.current_a);
            x = crate::model::propagate(params, &x, r.current_a, dt);
            r.voltage_v - v
        })
        .collect()
}

/// Per-step quantities a Kalman-type filter exposes for covariance matching.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InnovationTrace {
    pub innovations: Vec<f64>,
    pub h: Vec<RowVector3<f64>>,
    /// Prior covariance at each step.
    pub p: Vec<Matrix3<f64>>,
}

/// Runs one linearized filter over `log` and records innovation, H and P.
pub fn innovation_trace(
    kind: FilterKind,
    setup: FilterSetup,
    initial: BatteryState,
    log: &SimulationLog,
) -> Result<InnovationTrace> {
    if matches!(kind, FilterKind::Nlo | FilterKind::Ukf) {
        return Err(Error::input(format!(
            "{kind} has no linearized measurement row to match"
        )));
    }
    let curve = setup.curve.clone();
    let mut est = Estimator::new(kind, setup, initial);
    let dt = log.dt_s();
    let mut trace = InnovationTrace::default();
    for r in &log.rows {
        let s = est.state();
        let at = match kind {
            FilterKind::Ekf => s.x_hat,
            _ => s.x_bar.unwrap_or(s.x_hat),
        };
        trace.h.push(measurement_jacobian(&curve, &at));
        trace.p.push(s.p.expect("kalman-type filter carries a covariance"));
        trace
            .innovations
            .push(est.step(r.current_a, r.voltage_v, dt)?.innovation_v);
    }
    Ok(trace)
}

pub const MIN_MATCH_SAMPLES: usize = 100;
const MATCH_MAX_ITER: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceMatch {
    pub q_cov: Matrix3<f64>,
    pub r_cov: f64,
    /// Scalar applied to the guessed process covariance.
    pub q_scale: f64,
    /// Empirical over predicted innovation variance at the last iterate.
    pub r_ratio: f64,
    pub iterations: usize,
    /// True when `r_ratio` lies in `[0.9, 1.1]`.
    pub converged: bool,
}

/// Rescales the measurement variance until the empirical innovation variance
/// matches `mean(H P Hᵀ) + R`, then rescales `q_guess` by one scalar so its
/// trace matches the state-correction residual `mean(q qᵀ - K S Kᵀ)` with
/// `q = K ν`.
pub fn match_noise_covariances(
    innovations: &[f64],
    h_trace: &[RowVector3<f64>],
    p_trace: &[Matrix3<f64>],
    r_guess: f64,
    q_guess: &Matrix3<f64>,
) -> Result<CovarianceMatch> {
    let n = innovations.len();
    if n < MIN_MATCH_SAMPLES {
        return Err(Error::input(format!(
            "covariance matching needs at least {MIN_MATCH_SAMPLES} innovations, got {n}"
        )));
    }
    if h_trace.len() != n || p_trace.len() != n {
        return Err(Error::input("innovation, H and P traces must have equal length"));
    }
    if !(r_guess > 0.0) || !(q_guess.trace() > 0.0) {
        return Err(Error::input("noise guesses must be positive"));
    }
    let nf = n as f64;
    let empirical = innovations.iter().map(|v| v * v).sum::<f64>() / nf;
    let hph: Vec<f64> = h_trace
        .iter()
        .zip(p_trace)
        .map(|(h, p)| (h * p * h.transpose())[0])
        .collect();
    let mean_hph = hph.iter().sum::<f64>() / nf;

    let mut r = r_guess;
    let mut ratio = empirical / (mean_hph + r);
    let mut iterations = 0;
    while iterations < MATCH_MAX_ITER {
        iterations += 1;
        r *= ratio;
        ratio = empirical / (mean_hph + r);
        if (ratio - 1.0).abs() < 0.01 {
            break;
        }
    }

    let mut excess = 0.0;
    for k in 0..n {
        let s = hph[k] + r;
        let gain = p_trace[k] * h_trace[k].transpose() / s;
        let q = gain * innovations[k];
        excess += (q * q.transpose() - gain * gain.transpose() * s).trace();
    }
    let raw_scale = (q_guess.trace() + excess / nf) / q_guess.trace();
    let q_scale = raw_scale.max(1e-6);
    if raw_scale < 1e-6 {
        log::warn!("process covariance scale {raw_scale:e} floored at 1e-6");
    }
    Ok(CovarianceMatch {
        q_cov: q_guess * q_scale,
        r_cov: r,
        q_scale,
        r_ratio: ratio,
        iterations,
        converged: (0.9..=1.1).contains(&ratio),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cycle::DriveCycle;
    use crate::model::{simulate, NoiseSpec};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn rms_cases() {
        assert_eq!(rms_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            rms_error(&[3.0, 4.0], &[0.0, 0.0]).unwrap(),
            12.5f64.sqrt(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(12.5f64.sqrt(), 3.5355, epsilon = 1e-4);
        assert!(rms_error(&[], &[]).is_err());
        assert!(rms_error(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rms_adds_offset_in_quadrature() {
        let r = [0.3, -0.1, -0.2, 0.4, -0.4];
        let base = rms_error(&r, &[0.0; 5]).unwrap();
        let c = 0.25;
        let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
        let got = rms_error(&shifted, &[0.0; 5]).unwrap();
        assert_abs_diff_eq!(got, (base * base + c * c).sqrt(), epsilon = 1e-15);
    }

    fn pulse_cycle(n: usize) -> DriveCycle {
        let currents = (0..n)
            .map(|k| match (k / 30) % 4 {
                0 => 2.0,
                1 => 0.0,
                2 => -1.0,
                _ => 0.5,
            })
            .collect();
        DriveCycle::new("pulse", 1.0, currents).unwrap()
    }

    #[test]
    fn self_fit_has_numerical_floor_rms() {
        let p = BatteryParams::lfp_reference();
        let c = OcvCurve::lfp_20c();
        let log = simulate(
            &p,
            &c,
            &pulse_cycle(600),
            BatteryState::at_rest(0.7),
            &NoiseSpec::none(),
        )
        .unwrap();
        let res = model_residuals(&p, &c, &log, 0.7);
        assert!(rms_error(&res, &vec![0.0; res.len()]).unwrap() <= 1e-9);
    }

    #[test]
    fn fit_recovers_short_time_constants() {
        // Distinct, fast RC pairs are identifiable from a pulse train.
        let truth = BatteryParams::new(0.1, 0.02, 1000.0, 0.01, 10000.0, 8028.0).unwrap();
        let c = OcvCurve::lfp_20c();
        let log = simulate(
            &truth,
            &c,
            &pulse_cycle(1200),
            BatteryState::at_rest(0.8),
            &NoiseSpec::none(),
        )
        .unwrap();
        let grid = GridSpec {
            r_ohm: Axis::linear(0.02, 0.3, 15),
            tau1_s: Axis::log(5.0, 500.0, 9),
            tau2_s: Axis::log(20.0, 5000.0, 9),
            ..GridSpec::default()
        };
        let opts = FitOptions {
            capacity_as: 8028.0,
            initial_soc: None,
        };
        let fit = fit_parameters(&log, &c, &grid, &opts).unwrap();
        let res = fit.final_resolution("r_ohm").unwrap();
        assert!((fit.params.r_ohm - 0.1).abs() <= res.step, "{:?}", fit.params);
        assert!(fit.pass_rms.windows(2).all(|w| w[1] <= w[0]));
        assert_abs_diff_eq!(
            fit.rms_v(),
            rms_error(&fit.residuals, &vec![0.0; fit.residuals.len()]).unwrap()
        );
        assert!(!fit.unidentifiable_rc);
    }

    #[test]
    fn constant_current_is_flagged() {
        let p = BatteryParams::lfp_reference();
        let c = OcvCurve::lfp_20c();
        let cycle = DriveCycle::new("cc", 1.0, vec![1.0; 300]).unwrap();
        let log = simulate(&p, &c, &cycle, BatteryState::at_rest(0.9), &NoiseSpec::none()).unwrap();
        let grid = GridSpec {
            tau1_s: Axis::log(100.0, 1e5, 3),
            tau2_s: Axis::log(100.0, 1e5, 3),
            r1: Axis::log(1e-3, 0.1, 3),
            r2: Axis::log(1e-3, 0.1, 3),
            refinements: 0,
            ..GridSpec::default()
        };
        let fit = fit_parameters(
            &log,
            &c,
            &grid,
            &FitOptions {
                capacity_as: p.capacity_as,
                initial_soc: None,
            },
        )
        .unwrap();
        assert!(fit.unidentifiable_rc);
        assert!(fit.to_kv_string().contains("unidentifiable_rc=true"));
    }

    #[test]
    fn grid_validation() {
        let bad = GridSpec {
            r_ohm: Axis::linear(0.1, 0.2, 0),
            ..GridSpec::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Input(_))));
        let even = GridSpec {
            r1: Axis::log(0.01, 0.1, 4),
            ..GridSpec::default()
        };
        assert!(even.validate().is_err());
    }

    #[test]
    fn report_round_trips_as_params() {
        let p = BatteryParams::lfp_reference();
        let report = FitReport {
            params: p,
            times_s: vec![0.0, 1.0],
            residuals: vec![3.0, 4.0],
            grid_resolution: vec![],
            pass_rms: vec![],
            unidentifiable_rc: false,
        };
        assert_abs_diff_eq!(report.rms_v(), 12.5f64.sqrt());
        assert_eq!(BatteryParams::from_kv_str(&report.to_kv_string()).unwrap(), p);
        assert_eq!(report.residuals_csv(), "t_s,residual_v\n0,3\n1,4\n");
    }

    fn synthetic_innovations(n: usize, r_true: f64, seed: u64) -> (Vec<f64>, Vec<RowVector3<f64>>, Vec<Matrix3<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = RowVector3::new(-1.0, -1.0, 0.2);
        let p = Matrix3::from_diagonal(&nalgebra::Vector3::new(1e-5, 1e-5, 1e-3));
        let s = (h * p * h.transpose())[0] + r_true;
        let dist = Normal::new(0.0, s.sqrt()).unwrap();
        ((0..n).map(|_| dist.sample(&mut rng)).collect(), vec![h; n], vec![p; n])
    }

    #[test]
    fn matching_is_a_fixed_point_for_consistent_innovations() {
        let r = 0.04f64.powi(2);
        let (nu, h, p) = synthetic_innovations(10_000, r, 3);
        let m = match_noise_covariances(&nu, &h, &p, r, &(Matrix3::identity() * 1e-4)).unwrap();
        assert!(m.converged);
        assert!((m.r_cov / r - 1.0).abs() < 0.1);
        assert!((m.q_scale - 1.0).abs() < 0.1);
    }

    #[test]
    fn matching_recovers_measurement_std() {
        let (nu, h, p) = synthetic_innovations(10_000, 0.04f64.powi(2), 9);
        let m = match_noise_covariances(&nu, &h, &p, 0.01f64.powi(2), &(Matrix3::identity() * 1e-4)).unwrap();
        assert!(m.converged);
        assert_abs_diff_eq!(m.r_cov.sqrt(), 0.04, epsilon = 0.005);
    }

    #[test]
    fn matching_preconditions() {
        let (nu, h, p) = synthetic_innovations(50, 1e-3, 1);
        assert!(matches!(
            match_noise_covariances(&nu, &h, &p, 1e-3, &Matrix3::identity()),
            Err(Error::Input(_))
        ));
        let (nu, h, p) = synthetic_innovations(200, 1e-3, 1);
        assert!(match_noise_covariances(&nu, &h, &p, 0.0, &Matrix3::identity()).is_err());
        assert!(match_noise_covariances(&nu, &h, &p, 1e-3, &Matrix3::zeros()).is_err());
    }
}
