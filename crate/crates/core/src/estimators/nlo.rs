use crate::model::{self, BatteryParams, BatteryState};
use crate::ocv::OcvCurve;

use super::ObserverGain;

/// One Euler step of the nonlinear observer
///
/// ```text
/// x̄+ = x̄ + dt (A x̄ + B i + K (V - V̄)),   V̄ = V_oc(soc̄) - v̄1 - v̄2 - R i
/// ```
pub fn nlo_step(
    params: &BatteryParams,
    curve: &OcvCurve,
    gain: &ObserverGain,
    x_bar: &BatteryState,
    current_a: f64,
    v_measured: f64,
    dt_s: f64,
) -> BatteryState {
    nlo_step_with_innovation(params, curve, gain, x_bar, current_a, v_measured, dt_s).0
}

/// [`nlo_step`] that also returns the output injection term `V - V̄`.
pub fn nlo_step_with_innovation(
    params: &BatteryParams,
    curve: &OcvCurve,
    gain: &ObserverGain,
    x_bar: &BatteryState,
    current_a: f64,
    v_measured: f64,
    dt_s: f64,
) -> (BatteryState, f64) {
    let innovation = v_measured - model::terminal_voltage(params, curve, x_bar, current_a);
    let mut next = model::propagate(params, x_bar, current_a, dt_s);
    next.v1 += dt_s * gain.k1 * innovation;
    next.v2 += dt_s * gain.k2 * innovation;
    next.soc += dt_s * gain.k3 * innovation;
    (next, innovation)
}
