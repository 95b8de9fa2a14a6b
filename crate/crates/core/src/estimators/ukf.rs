use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::model::{self, BatteryParams, BatteryState, Discretization};
use crate::ocv::OcvCurve;

use super::kalman::check_dt;
use super::{check_covariance, symmetrize, EstimatorState, KalmanConfig, Update};

const STATE_DIM: usize = 3;
const SIGMA_POINTS: usize = 2 * STATE_DIM + 1;
const JITTER: f64 = 1e-12;

/// Scaled unscented-transform parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UkfSettings {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    /// Retry a failed Cholesky factorization once with `1e-12 I` added.
    pub jitter_retry: bool,
}

impl Default for UkfSettings {
    fn default() -> Self {
        UkfSettings {
            alpha: 1e-3,
            beta: 2.0,
            kappa: 0.0,
            jitter_retry: true,
        }
    }
}

impl UkfSettings {
    pub fn lambda(&self, n: usize) -> f64 {
        self.alpha * self.alpha * (n as f64 + self.kappa) - n as f64
    }

    /// Mean and covariance weights for the `2n + 1` sigma points.
    pub fn weights(&self, n: usize) -> (Vec<f64>, Vec<f64>) {
        let lambda = self.lambda(n);
        let scale = n as f64 + lambda;
        let mut wm = vec![0.5 / scale; 2 * n + 1];
        wm[0] = lambda / scale;
        let mut wc = wm.clone();
        wc[0] += 1.0 - self.alpha * self.alpha + self.beta;
        (wm, wc)
    }
}

fn sigma_points(
    x: &Vector3<f64>,
    p: &Matrix3<f64>,
    scale: f64,
    settings: &UkfSettings,
    step: usize,
) -> Result<[Vector3<f64>; SIGMA_POINTS]> {
    let scaled = p * scale;
    let chol = match scaled.cholesky() {
        Some(c) => c,
        None if settings.jitter_retry => {
            log::warn!("ukf step {step}: covariance not positive definite, retrying with jitter {JITTER:e}");
            (scaled + Matrix3::identity() * JITTER)
                .cholesky()
                .ok_or_else(|| Error::Numerical {
                    step,
                    message: "cholesky factorization failed after jitter".into(),
                })?
        }
        None => {
            return Err(Error::Numerical {
                step,
                message: "cholesky factorization failed".into(),
            })
        }
    };
    let l = chol.l();
    let mut pts = [*x; SIGMA_POINTS];
    for j in 0..STATE_DIM {
        let col = l.column(j).into_owned();
        pts[1 + j] = x + col;
        pts[1 + STATE_DIM + j] = x - col;
    }
    Ok(pts)
}

/// Unscented Kalman step: measurement update through sigma points, then the
/// (linear) time update.
#[allow(clippy::too_many_arguments)]
pub fn ukf_step(
    params: &BatteryParams,
    curve: &OcvCurve,
    cfg: &KalmanConfig,
    settings: &UkfSettings,
    est: &EstimatorState,
    current_a: f64,
    v_measured: f64,
    dt_s: f64,
) -> Result<Update> {
    check_dt(dt_s, est.steps)?;
    let p = est.covariance()?;
    let (q_d, r_d) = cfg.discrete_noise(dt_s);
    let (wm, wc) = settings.weights(STATE_DIM);
    let scale = STATE_DIM as f64 + settings.lambda(STATE_DIM);

    let x = est.x_hat.to_vector();
    let pts = sigma_points(&x, &p, scale, settings, est.steps)?;
    let y: Vec<f64> = pts
        .iter()
        .map(|s| model::terminal_voltage(params, curve, &BatteryState::from_vector(s), current_a))
        .collect();
    // Sum deviations from the central point: the weights are large and of
    // mixed sign, so summing raw outputs loses precision.
    let y_hat = y[0] + (1..SIGMA_POINTS).map(|i| wm[i] * (y[i] - y[0])).sum::<f64>();
    let mut s = r_d;
    let mut pxy = Vector3::zeros();
    for i in 0..SIGMA_POINTS {
        let dy = y[i] - y_hat;
        s += wc[i] * dy * dy;
        pxy += (pts[i] - x) * (wc[i] * dy);
    }
    if !(s > 0.0) {
        return Err(Error::Numerical {
            step: est.steps + 1,
            message: format!("innovation variance is not positive ({s:e})"),
        });
    }
    let gain = pxy / s;
    let innovation = v_measured - y_hat;
    let x_post = x + gain * innovation;
    let p_post = symmetrize(&(p - gain * gain.transpose() * s));

    // The state dynamics are linear, so propagating sigma points would
    // reproduce these moments exactly.
    let (f, g) = model::discretize(params, dt_s, Discretization::Euler);
    let x_next = f * x_post + g * current_a;
    let p_next = symmetrize(&(f * p_post * f.transpose() + q_d));

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
