//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use xkf_core::cycle::generate_dst_like;
use xkf_core::model::simulate;
use xkf_core::{BatteryParams, BatteryState, FilterSetup, NoiseSpec, OcvCurve, SimulationLog};

pub fn reference_setup() -> FilterSetup {
    FilterSetup::new(BatteryParams::lfp_reference(), Arc::new(OcvCurve::lfp_20c()))
}

/// DST-like load from full charge with 0.1 mV sensor noise.
pub fn dst_log(duration_s: f64) -> SimulationLog {
    let setup = reference_setup();
    let cycle = generate_dst_like(duration_s, 8.0, 1.0).expect("valid generator arguments");
    simulate(
        &setup.params,
        &setup.curve,
        &cycle,
        BatteryState::at_rest(1.0),
        &NoiseSpec::uniform(0.0, 1e-4, 42),
    )
    .expect("simulation of a generated cycle")
}
