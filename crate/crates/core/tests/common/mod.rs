//! Scenarios and independent oracles shared by the integration tests and the
//! acceptance runner.

#![allow(dead_code)]

use nalgebra::{Matrix3, RowVector3, Vector3};
use xkf_core::harness::CycleSource;
use xkf_core::model::Discretization;
use xkf_core::{BatteryParams, ExperimentConfig, FilterKind, OcvCurve};

/// Textbook discrete Kalman filter on `x+ = F x + G i`, `y = H x + d - R i + noise`,
/// written in the short (non-Joseph) covariance form so it shares no code
/// with the library.
pub struct KfOracle {
    pub f: Matrix3<f64>,
    pub g: Vector3<f64>,
    pub q: Matrix3<f64>,
    pub r: f64,
    pub x: Vector3<f64>,
    pub p: Matrix3<f64>,
}

impl KfOracle {
    pub fn new(
        params: &BatteryParams,
        dt: f64,
        q_cov: &Matrix3<f64>,
        r_cov: f64,
        x0: Vector3<f64>,
        p0: Matrix3<f64>,
    ) -> Self {
        let t1 = params.r1 * params.c1;
        let t2 = params.r2 * params.c2;
        let f = Matrix3::from_diagonal(&Vector3::new(1.0 - dt / t1, 1.0 - dt / t2, 1.0));
        let g = Vector3::new(dt / params.c1, dt / params.c2, -dt / params.capacity_as);
        KfOracle {
            f,
            g,
            q: q_cov * dt,
            r: r_cov / dt,
            x: x0,
            p: p0,
        }
    }

    /// Measurement update with row `h` and the innovation already formed,
    /// followed by the time update.
    pub fn step(&mut self, h: &RowVector3<f64>, innovation: f64, current_a: f64) {
        let s = (h * self.p * h.transpose())[0] + self.r;
        let k = self.p * h.transpose() / s;
        let x_post = self.x + k * innovation;
        let p_post = (Matrix3::identity() - k * h) * self.p;
        self.x = self.f * x_post + self.g * current_a;
        self.p = self.f * p_post * self.f.transpose() + self.q;
    }
}

/// Least-squares decay rate of `|e(t)|`, using samples down to `floor · |e(0)|`.
pub fn decay_rate(times: &[f64], errors: &[f64], floor: f64) -> f64 {
    let e0 = errors[0].abs();
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(errors)
        .take_while(|(_, e)| e.abs() > floor * e0)
        .map(|(t, e)| (*t, e.abs().ln()))
        .collect();
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    -sxy / sxx
}

/// Straight-line OCV, `V_oc = v0 + slope · soc`.
pub fn affine_curve(v0: f64, slope: f64) -> OcvCurve {
    OcvCurve::new(20.0, [(0.0, v0), (0.5, v0 + 0.5 * slope), (1.0, v0 + slope)]).unwrap()
}

/// The canonical comparison run: DST-like load, truth starts full, every
/// filter starts at 60 %, seed 42.
pub fn canonical_dst() -> ExperimentConfig {
    ExperimentConfig {
        name: "dst_seed42".into(),
        ..ExperimentConfig::default()
    }
}

pub fn gain_study(k3: f64) -> ExperimentConfig {
    let mut cfg = canonical_dst();
    cfg.name = format!("gain_k3_{k3}");
    cfg.filters = vec![FilterKind::Nlo, FilterKind::Xkf];
    cfg.gain.k3 = k3;
    cfg
}

pub fn fuds_multi_init(soc_est0: f64) -> ExperimentConfig {
    ExperimentConfig {
        name: format!("fuds_init_{soc_est0}"),
        cycle: CycleSource::Fuds {
            duration_s: 2400.0,
            peak_a: 8.0,
            seed: 1,
        },
        filters: vec![FilterKind::Xkf],
        soc_true0: 0.78,
        soc_est0,
        ..ExperimentConfig::default()
    }
}

/// Discharge from half charge into the low-SoC knee; filter starts on truth.
pub fn temperature_mismatch() -> ExperimentConfig {
    ExperimentConfig {
        name: "temperature".into(),
        cycle: CycleSource::Dst {
            duration_s: 3400.0,
            peak_a: 8.0,
        },
        filters: vec![FilterKind::Xkf],
        soc_true0: 0.5,
        soc_est0: 0.5,
        plant_discretization: Discretization::Euler,
        ..ExperimentConfig::default()
    }
}

/// Repeating 2 A / rest / -1 A charge / 0.5 A pulse train, 30 s per level.
pub fn pulse_currents(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| match (k / 30) % 4 {
            0 => 2.0,
            1 => 0.0,
            2 => -1.0,
            _ => 0.5,
        })
        .collect()
}
