//! State-of-charge estimators sharing one step interface.
//!
//! Every filter consumes one `(current, measured voltage)` sample per step and
//! advances its estimate to the next sample time. The exogenous Kalman filter
//! ([`xkf_step`]) cascades the nonlinear observer ([`nlo_step`]) with a
//! Kalman filter linearized about the observer's estimate ([`lkf_step`]);
//! [`ekf_step`] and [`ukf_step`] are the conventional baselines.

mod kalman;
mod nlo;
mod ukf;
mod xkf;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::model::{self, BatteryParams, BatteryState};
use crate::ocv::OcvCurve;

pub use kalman::{check_covariance, ekf_step, lkf_step, measurement_jacobian, riccati_step, symmetrize};
pub use nlo::{nlo_step, nlo_step_with_innovation};
pub use ukf::{ukf_step, UkfSettings};
pub use xkf::xkf_step;

/// Tolerance below which an eigenvalue of P counts as negative.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Nonlinear-observer injection gain `K = (k1, k2, k3)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObserverGain {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

impl ObserverGain {
    pub fn new(k1: f64, k2: f64, k3: f64) -> Result<Self> {
        if ![k1, k2, k3].iter().all(|k| k.is_finite()) {
            return Err(Error::input("observer gains must be finite"));
        }
        Ok(ObserverGain { k1, k2, k3 })
    }

    /// Gain acting on the SoC channel only.
    pub fn soc_only(k3: f64) -> Self {
        ObserverGain { k1: 0.0, k2: 0.0, k3 }
    }

    /// `k3 > 0` makes the SoC error decay exponentially on any monotone curve.
    pub fn is_stabilizing(&self) -> bool {
        self.k3 > 0.0
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.k1, self.k2, self.k3)
    }
}

impl Default for ObserverGain {
    fn default() -> Self {
        ObserverGain::soc_only(2.0)
    }
}

/// Noise model and initial covariance for the Kalman-type filters.
///
/// `q_cov` and `r_cov` are referenced to a 1 s sample: a step of `dt`
/// seconds uses `Q dt` and `R / dt`, which reduces to the quoted values at
/// the nominal 1 s period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanConfig {
    q_cov: Matrix3<f64>,
    r_cov: f64,
    p0: Matrix3<f64>,
}

impl KalmanConfig {
    pub fn new(q_cov: Matrix3<f64>, r_cov: f64, p0: Matrix3<f64>) -> Result<Self> {
        if !is_symmetric(&q_cov, 1e-12) || min_eigenvalue(&q_cov) < -1e-12 {
            return Err(Error::input(
                "process covariance must be symmetric positive semidefinite",
            ));
        }
        if !(r_cov > 0.0) || !r_cov.is_finite() {
            return Err(Error::input(format!(
                "measurement variance must be positive, got {r_cov}"
            )));
        }
        if !is_symmetric(&p0, 1e-12) || p0.cholesky().is_none() {
            return Err(Error::input("initial covariance must be symmetric positive definite"));
        }
        Ok(KalmanConfig { q_cov, r_cov, p0 })
    }

    /// Diagonal configuration from standard deviations.
    pub fn from_std(q_std: [f64; 3], r_std: f64, p0_diag: [f64; 3]) -> Result<Self> {
        let q = Matrix3::from_diagonal(&Vector3::from(q_std).map(|s| s * s));
        KalmanConfig::new(q, r_std * r_std, Matrix3::from_diagonal(&Vector3::from(p0_diag)))
    }

    /// Process std 0.01 on every state, measurement std 0.04 V, and
    /// `P(0) = diag(1e-2, 1e-2, 0.25)` sized for a ±0.5 SoC initial error.
    pub fn reference() -> Self {
        KalmanConfig::from_std([0.01; 3], 0.04, [1e-2, 1e-2, 0.25]).expect("reference config is valid")
    }

    pub fn q_cov(&self) -> &Matrix3<f64> {
        &self.q_cov
    }

    pub fn r_cov(&self) -> f64 {
        self.r_cov
    }

    pub fn p0(&self) -> &Matrix3<f64> {
        &self.p0
    }

    pub fn with_p0(self, p0: Matrix3<f64>) -> Result<Self> {
        KalmanConfig::new(self.q_cov, self.r_cov, p0)
    }

    pub(crate) fn discrete_noise(&self, dt_s: f64) -> (Matrix3<f64>, f64) {
        (self.q_cov * dt_s, self.r_cov / dt_s)
    }
}

impl Default for KalmanConfig {
    fn default() -> Self {
        KalmanConfig::reference()
    }
}

/// A filter's estimate before it consumes the next sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorState {
    pub x_hat: BatteryState,
    /// Error covariance; absent for the plain observer.
    pub p: Option<Matrix3<f64>>,
    /// Exogenous (observer) estimate used as the linearization point.
    pub x_bar: Option<BatteryState>,
    /// Samples consumed so far.
    pub steps: usize,
}

impl EstimatorState {
    pub fn observer(x_bar: BatteryState) -> Self {
        EstimatorState {
            x_hat: x_bar,
            p: None,
            x_bar: Some(x_bar),
            steps: 0,
        }
    }

    pub fn kalman(x_hat: BatteryState, p: Matrix3<f64>) -> Self {
        EstimatorState {
            x_hat,
            p: Some(p),
            x_bar: None,
            steps: 0,
        }
    }

    pub(crate) fn covariance(&self) -> Result<Matrix3<f64>> {
        self.p
            .ok_or_else(|| Error::input("this step needs a covariance matrix"))
    }
}

/// Result of consuming one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Update {
    pub state: EstimatorState,
    /// Measured minus predicted terminal voltage.
    pub innovation_v: f64,
    /// Kalman (or observer) gain applied to the innovation.
    pub gain: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FilterKind {
    Nlo,
    Lkf,
    Xkf,
    Ekf,
    Ukf,
}

impl FilterKind {
    pub const ALL: [FilterKind; 5] = [
        FilterKind::Nlo,
        FilterKind::Lkf,
        FilterKind::Xkf,
        FilterKind::Ekf,
        FilterKind::Ukf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Nlo => "nlo",
            FilterKind::Lkf => "lkf",
            FilterKind::Xkf => "xkf",
            FilterKind::Ekf => "ekf",
            FilterKind::Ukf => "ukf",
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FilterKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::input(format!("unknown filter {s:?} (expected nlo|lkf|xkf|ekf|ukf)")))
    }
}

/// Everything a filter needs besides its running state.
#[derive(Debug, Clone)]
pub struct FilterSetup {
    pub params: BatteryParams,
    pub curve: Arc<OcvCurve>,
    pub gain: ObserverGain,
    pub kalman: KalmanConfig,
    pub ukf: UkfSettings,
}

impl FilterSetup {
    pub fn new(params: BatteryParams, curve: Arc<OcvCurve>) -> Self {
        FilterSetup {
            params,
            curve,
            gain: ObserverGain::default(),
            kalman: KalmanConfig::default(),
            ukf: UkfSettings::default(),
        }
    }
}

/// A running filter instance. Owns its state; independent instances can be
/// moved across threads.
#[derive(Debug, Clone)]
pub struct Estimator {
    kind: FilterKind,
    setup: FilterSetup,
    state: EstimatorState,
}

impl Estimator {
    /// Starts every estimate channel (observer and Kalman) at `initial`.
    pub fn new(kind: FilterKind, setup: FilterSetup, initial: BatteryState) -> Self {
        let p0 = *setup.kalman.p0();
        let state = match kind {
            FilterKind::Nlo => EstimatorState::observer(initial),
            FilterKind::Ekf | FilterKind::Ukf => EstimatorState::kalman(initial, p0),
            FilterKind::Lkf | FilterKind::Xkf => EstimatorState {
                x_bar: Some(initial),
                ..EstimatorState::kalman(initial, p0)
            },
        };
        Estimator { kind, setup, state }
    }

    pub fn kind(&self) -> FilterKind {
        self.kind
    }

    pub fn setup(&self) -> &FilterSetup {
        &self.setup
    }

    pub fn state(&self) -> &EstimatorState {
        &self.state
    }

    /// Consumes one sample. On error the state is left untouched.
    pub fn step(&mut self, current_a: f64, v_measured: f64, dt_s: f64) -> Result<Update> {
        let s = &self.setup;
        let curve = s.curve.as_ref();
        let update = match self.kind {
            FilterKind::Nlo => {
                let x_bar = self.state.x_bar.unwrap_or(self.state.x_hat);
                let (next, innovation_v) =
                    nlo_step_with_innovation(&s.params, curve, &s.gain, &x_bar, current_a, v_measured, dt_s);
                Update {
                    state: EstimatorState {
                        x_hat: next,
                        p: None,
                        x_bar: Some(next),
                        steps: self.state.steps + 1,
                    },
                    innovation_v,
                    gain: s.gain.to_vector(),
                }
            }
            FilterKind::Lkf => {
                // Standalone LKF: linearized about the open-loop model trajectory.
                let nominal = self.state.x_bar.unwrap_or(self.state.x_hat);
                let mut u = lkf_step(
                    &s.params,
                    curve,
                    &s.kalman,
                    &self.state,
                    &nominal,
                    current_a,
                    v_measured,
                    dt_s,
                )?;
                u.state.x_bar = Some(model::propagate(&s.params, &nominal, current_a, dt_s));
                u
            }
            FilterKind::Xkf => xkf_step(
                &s.params,
                curve,
                &s.gain,
                &s.kalman,
                &self.state,
                current_a,
                v_measured,
                dt_s,
            )?,
            FilterKind::Ekf => ekf_step(&s.params, curve, &s.kalman, &self.state, current_a, v_measured, dt_s)?,
            FilterKind::Ukf => ukf_step(
                &s.params,
                curve,
                &s.kalman,
                &s.ukf,
                &self.state,
                current_a,
                v_measured,
                dt_s,
            )?,
        };
        self.state = update.state;
        Ok(update)
    }
}

pub(crate) fn is_symmetric(m: &Matrix3<f64>, tol: f64) -> bool {
    (m - m.transpose()).amax() <= tol
}

pub(crate) fn min_eigenvalue(m: &Matrix3<f64>) -> f64 {
    symmetrize(m).symmetric_eigenvalues().min()
}
