//! Linearized Kalman filtering on the Euler-discretized cell model.
//!
//! The covariance recursion is the discrete-time counterpart of the Riccati
//! equation `dP/dt = A P + P Aᵀ + Q - P Hᵀ R⁻¹ H P`: a measurement update with
//! `R / dt` followed by a time update with `F = I + A dt` and `Q dt`.

use nalgebra::{Matrix3, RowVector3, Vector3};

use crate::error::{Error, Result};
use crate::model::{self, BatteryParams, BatteryState, Discretization};
use crate::ocv::OcvCurve;

use super::{min_eigenvalue, EstimatorState, KalmanConfig, Update, PSD_TOLERANCE};

/// `H(x) = ∂h/∂x = (-1, -1, dV_oc/dSoC)`.
pub fn measurement_jacobian(curve: &OcvCurve, at: &BatteryState) -> RowVector3<f64> {
    RowVector3::new(-1.0, -1.0, curve.slope_at(at.soc))
}

pub fn symmetrize(p: &Matrix3<f64>) -> Matrix3<f64> {
    (p + p.transpose()) * 0.5
}

/// Fails when `p` has an eigenvalue below `-1e-8`.
pub fn check_covariance(p: &Matrix3<f64>, step: usize) -> Result<()> {
    if !p.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical {
            step,
            message: "covariance has non-finite entries".into(),
        });
    }
    let lambda = min_eigenvalue(p);
    if lambda < -PSD_TOLERANCE {
        return Err(Error::Numerical {
            step,
            message: format!("covariance lost positive semidefiniteness (eigenvalue {lambda:e})"),
        });
    }
    Ok(())
}

/// One covariance cycle: measurement update of the prior `p` with row `h`
/// and variance `r_d`, then propagation through `f` with `q_d`.
///
/// Returns the next prior and the Kalman gain used.
pub fn riccati_step(
    p: &Matrix3<f64>,
    f: &Matrix3<f64>,
    h: &RowVector3<f64>,
    q_d: &Matrix3<f64>,
    r_d: f64,
) -> (Matrix3<f64>, Vector3<f64>) {
    let (p_post, gain) = covariance_update(p, h, r_d);
    (symmetrize(&(f * p_post * f.transpose() + q_d)), gain)
}

fn covariance_update(p: &Matrix3<f64>, h: &RowVector3<f64>, r_d: f64) -> (Matrix3<f64>, Vector3<f64>) {
    let pht = p * h.transpose();
    let s = (h * pht)[0] + r_d;
    let gain = pht / s;
    // Joseph form keeps the update PSD under round-off.
    let ikh = Matrix3::identity() - gain * h;
    let p_post = ikh * p * ikh.transpose() + gain * gain.transpose() * r_d;
    (p_post, gain)
}

/// Shared body of the linearized filters: `predicted_v` is the filter's
/// output prediction at the current prior.
#[allow(clippy::too_many_arguments)]
fn linearized_step(
    params: &BatteryParams,
    cfg: &KalmanConfig,
    est: &EstimatorState,
    h: &RowVector3<f64>,
    predicted_v: f64,
    current_a: f64,
    v_measured: f64,
    dt_s: f64,
) -> Result<Update> {
    check_dt(dt_s, est.steps)?;
    let p = est.covariance()?;
    let (q_d, r_d) = cfg.discrete_noise(dt_s);
    let (f, g) = model::discretize(params, dt_s, Discretization::Euler);

    let innovation = v_measured - predicted_v;
    let (p_next, gain) = riccati_step(&p, &f, h, &q_d, r_d);
    let x_post = est.x_hat.to_vector() + gain * innovation;
    let x_next = f * x_post + g * current_a;

    let steps = est.steps + 1;
    check_covariance(&p_next, steps)?;
    Ok(Update {
        state: EstimatorState {
            x_hat: BatteryState::from_vector(&x_next),
            p: Some(p_next),
            x_bar: est.x_bar,
            steps,
        },
        innovation_v: innovation,
        gain,
    })
}

/// Kalman step linearized about the exogenous estimate `x_bar`.
///
/// The innovation is `V - h(x̄) - H(x̄)(x̂ - x̄) + R i`; neither the gain nor
/// the covariance depend on `x̂`.
#[allow(clippy::too_many_arguments)]
pub fn lkf_step(
    params: &BatteryParams,
    curve: &OcvCurve,
    cfg: &KalmanConfig,
    est: &EstimatorState,
    x_bar: &BatteryState,
    current_a: f64,
    v_measured: f64,
    dt_s: f64,
) -> Result<Update> {
    let h = measurement_jacobian(curve, x_bar);
    let deviation = est.x_hat.to_vector() - x_bar.to_vector();
    let predicted = model::open_circuit_part(curve, x_bar) + (h * deviation)[0] - params.r_ohm * current_a;
    linearized_step(params, cfg, est, &h, predicted, current_a, v_measured, dt_s)
}

/// Extended Kalman step: identical to [`lkf_step`] with the linearization
/// point taken at the filter's own estimate.
pub fn ekf_step(
    params: &BatteryParams,
    curve: &OcvCurve,
    cfg: &KalmanConfig,
    est: &EstimatorState,
    current_a: f64,
    v_measured: f64,
    dt_s: f64,
) -> Result<Update> {
    let h = measurement_jacobian(curve, &est.x_hat);
    let predicted = model::terminal_voltage(params, curve, &est.x_hat, current_a);
    linearized_step(params, cfg, est, &h, predicted, current_a, v_measured, dt_s)
}

pub(crate) fn check_dt(dt_s: f64, step: usize) -> Result<()> {
    if dt_s > 0.0 && dt_s.is_finite() {
        Ok(())
    } else {
        Err(Error::Input(format!(
            "time step must be positive at step {step}, got {dt_s}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn setup() -> (BatteryParams, OcvCurve, KalmanConfig) {
        (
            BatteryParams::lfp_reference(),
            OcvCurve::lfp_20c(),
            KalmanConfig::reference(),
        )
    }

    #[test]
    fn scalar_riccati_reaches_closed_form() {
        // A = 0, H = 1 on the SoC channel: steady state of the continuous
        // equation is sqrt(Q R). The discrete recursion approaches it as dt -> 0.
        let (q, r) = (1e-4, 1.6e-3);
        let dt = 1e-3;
        let h = RowVector3::new(0.0, 0.0, 1.0);
        let q_d = Matrix3::from_diagonal(&Vector3::new(0.0, 0.0, q * dt));
        let mut p = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.25));
        for _ in 0..40_000 {
            p = riccati_step(&p, &Matrix3::identity(), &h, &q_d, r / dt).0;
        }
        let expected = (q * r).sqrt();
        assert_relative_eq!(expected, 4.0e-4, max_relative = 1e-12);
        assert_relative_eq!(p[(2, 2)], expected, max_relative = 1e-3);
    }

    #[test]
    fn zero_innovation_is_prediction_only() {
        let (p, c, cfg) = setup();
        let x = BatteryState::new(0.004, 0.002, 0.63);
        let est = EstimatorState::kalman(x, *cfg.p0());
        let v = model::terminal_voltage(&p, &c, &x, 1.2);
        let u = lkf_step(&p, &c, &cfg, &est, &x, 1.2, v, 1.0).unwrap();
        assert_eq!(u.innovation_v, 0.0);
        assert_eq!(u.state.x_hat, model::propagate(&p, &x, 1.2, 1.0));
    }

    #[test]
    fn ekf_equals_lkf_at_shared_linearization_point() {
        let (p, c, cfg) = setup();
        let x = BatteryState::new(0.01, 0.0, 0.42);
        let est = EstimatorState::kalman(x, *cfg.p0());
        let a = lkf_step(&p, &c, &cfg, &est, &x, 0.8, 3.1, 1.0).unwrap();
        let b = ekf_step(&p, &c, &cfg, &est, 0.8, 3.1, 1.0).unwrap();
        assert_eq!(a.state.p, b.state.p);
        assert_relative_eq!(a.state.x_hat.soc, b.state.x_hat.soc, max_relative = 1e-14);
        assert_eq!(a.gain, b.gain);
    }

    #[test]
    fn gain_is_independent_of_x_hat() {
        let (p, c, cfg) = setup();
        let x_bar = BatteryState::new(0.0, 0.0, 0.7);
        let est = EstimatorState::kalman(BatteryState::at_rest(0.3), *cfg.p0());
        let perturbed = EstimatorState {
            x_hat: BatteryState::new(0.3, -0.2, 0.9),
            ..est
        };
        let a = lkf_step(&p, &c, &cfg, &est, &x_bar, 1.0, 3.2, 1.0).unwrap();
        let b = lkf_step(&p, &c, &cfg, &perturbed, &x_bar, 1.0, 3.2, 1.0).unwrap();
        assert_eq!(a.gain, b.gain);
        assert_eq!(a.state.p, b.state.p);
    }

    #[test]
    fn covariance_stays_symmetric() {
        let (p, c, cfg) = setup();
        let mut est = EstimatorState::kalman(BatteryState::at_rest(0.6), *cfg.p0());
        for k in 0..500 {
            let u = ekf_step(&p, &c, &cfg, &est, (k % 7) as f64 - 2.0, 3.25, 1.0).unwrap();
            let cov = u.state.p.unwrap();
            assert!((cov - cov.transpose()).amax() <= 1e-10);
            assert!(min_eigenvalue(&cov) >= -PSD_TOLERANCE);
            est = u.state;
        }
    }

    #[test]
    fn indefinite_covariance_is_reported_with_step() {
        let mut bad = Matrix3::identity();
        bad[(2, 2)] = -1.0;
        let err = check_covariance(&bad, 17).unwrap_err();
        assert!(matches!(err, Error::Numerical { step: 17, .. }));
    }

    #[test]
    fn missing_covariance_is_an_input_error() {
        let (p, c, cfg) = setup();
        let est = EstimatorState::observer(BatteryState::at_rest(0.5));
        assert!(matches!(
            ekf_step(&p, &c, &cfg, &est, 0.0, 3.3, 1.0),
            Err(Error::Input(_))
        ));
    }
}
