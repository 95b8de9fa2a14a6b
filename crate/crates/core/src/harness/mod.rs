//! Experiment engine: simulate a plant once, run several filters over the
//! identical measurement stream, and score them against the truth.

mod config;
mod experiment;
mod metrics;

pub use config::{CurveSource, CycleSource, ExperimentConfig, ParamsSource, Resolved};
pub use experiment::{
    run_experiment, run_filter, run_temperature_study, stream_checksum, with_current_bias, ExperimentResult, FilterRun,
    TemperatureStudy, TraceRow, TRACE_HEADER,
};
pub use metrics::{convergence_index, metrics_csv, RunMetrics, CONVERGENCE_DWELL, METRICS_HEADER};
