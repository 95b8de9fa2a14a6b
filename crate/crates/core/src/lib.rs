//! State-of-charge estimation for a LiFePO4 cell.
//!
//! The cell is a 2-RC equivalent circuit ([`model`]) with a tabulated
//! open-circuit voltage ([`ocv`]). [`estimators`] holds the nonlinear
//! observer, the exogenous Kalman filter built on it, and EKF/UKF baselines.
//! [`identification`] fits model parameters and noise levels from logs, and
//! [`harness`] runs and scores filter comparisons on synthetic drive cycles
//! ([`cycle`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cycle;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod identification;
mod kv;
pub mod model;
pub mod ocv;

pub use cycle::DriveCycle;
pub use error::{Error, Result};
pub use estimators::{Estimator, EstimatorState, FilterKind, FilterSetup, KalmanConfig, ObserverGain};
pub use harness::{ExperimentConfig, RunMetrics};
pub use identification::FitReport;
pub use model::{BatteryParams, BatteryState, NoiseSpec, SimulationLog};
pub use ocv::OcvCurve;
