use crate::error::Result;
use crate::model::BatteryParams;
use crate::ocv::OcvCurve;

use super::{lkf_step, nlo_step, EstimatorState, KalmanConfig, ObserverGain, Update};

/// One step of the observer/Kalman cascade.
///
/// The Kalman filter is linearized at the observer estimate for the current
/// sample time; the observer then advances on its own, so its trajectory
/// never depends on `x̂` or `P`.
#[allow(clippy::too_many_arguments)]
pub fn xkf_step(
    params: &BatteryParams,
    curve: &OcvCurve,
    gain: &ObserverGain,
    cfg: &KalmanConfig,
    est: &EstimatorState,
    current_a: f64,
    v_measured: f64,
    dt_s: f64,
) -> Result<Update> {
    let x_bar = est.x_bar.unwrap_or(est.x_hat);
    let mut update = lkf_step(params, curve, cfg, est, &x_bar, current_a, v_measured, dt_s)?;
    update.state.x_bar = Some(nlo_step(params, curve, gain, &x_bar, current_a, v_measured, dt_s));
    Ok(update)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{self, BatteryState};

    #[test]
    fn exact_start_stays_on_truth_without_noise() {
        let p = BatteryParams::lfp_reference();
        let c = OcvCurve::lfp_20c();
        let cfg = KalmanConfig::reference();
        let mut truth = BatteryState::at_rest(0.8);
        let mut est = EstimatorState {
            x_bar: Some(truth),
            ..EstimatorState::kalman(truth, *cfg.p0())
        };
        for k in 0..200 {
            let i = if k % 20 < 10 { 2.0 } else { -1.0 };
            let v = model::terminal_voltage(&p, &c, &truth, i);
            est = xkf_step(&p, &c, &ObserverGain::default(), &cfg, &est, i, v, 1.0)
                .unwrap()
                .state;
            truth = model::propagate(&p, &truth, i, 1.0);
            assert!((est.x_hat.soc - truth.soc).abs() < 1e-12);
            assert!((est.x_bar.unwrap().soc - truth.soc).abs() < 1e-12);
        }
    }

    #[test]
    fn observer_trajectory_ignores_kalman_state() {
        let p = BatteryParams::lfp_reference();
        let c = OcvCurve::lfp_20c();
        let cfg = KalmanConfig::reference();
        let x_bar = BatteryState::at_rest(0.55);
        let a = EstimatorState {
            x_bar: Some(x_bar),
            ..EstimatorState::kalman(BatteryState::at_rest(0.2), *cfg.p0())
        };
        let b = EstimatorState {
            x_hat: BatteryState::new(0.1, 0.1, 0.9),
            p: Some(*cfg.p0() * 3.0),
            ..a
        };
        let g = ObserverGain::default();
        let ua = xkf_step(&p, &c, &g, &cfg, &a, 1.5, 3.28, 1.0).unwrap();
        let ub = xkf_step(&p, &c, &g, &cfg, &b, 1.5, 3.28, 1.0).unwrap();
        assert_eq!(ua.state.x_bar, ub.state.x_bar);
    }

    #[test]
    fn zero_observer_gain_keeps_open_loop_linearization() {
        let p = BatteryParams::lfp_reference();
        let c = OcvCurve::lfp_20c();
        let cfg = KalmanConfig::reference();
        let start = BatteryState::at_rest(0.5);
        let mut est = EstimatorState {
            x_bar: Some(start),
            ..EstimatorState::kalman(start, *cfg.p0())
        };
        let mut open_loop = start;
        for _ in 0..50 {
            est = xkf_step(&p, &c, &ObserverGain::soc_only(0.0), &cfg, &est, 1.0, 3.0, 1.0)
                .unwrap()
                .state;
            open_loop = model::propagate(&p, &open_loop, 1.0, 1.0);
        }
        assert_eq!(est.x_bar, Some(open_loop));
    }
}
