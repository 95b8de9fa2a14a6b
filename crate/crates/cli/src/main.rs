use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use xkf_core::cycle::{generate_dst_like, generate_fuds_like, ingest_cycle_csv};
use xkf_core::estimators::UkfSettings;
use xkf_core::harness::{run_experiment, run_filter, run_temperature_study, CurveSource, ParamsSource, METRICS_HEADER};
use xkf_core::identification::{fit_parameters, Axis, FitOptions, GridSpec};
use xkf_core::model::{load_log, simulate_with, Discretization};
use xkf_core::{
    BatteryState, DriveCycle, Error, ExperimentConfig, FilterKind, FilterSetup, KalmanConfig, NoiseSpec, ObserverGain,
};

const EXIT_INPUT: u8 = 1;
const EXIT_ALL_FAILED: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "xkf", version, about = "State-of-charge estimation for LiFePO4 cells")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the cell over a drive cycle and write the measurement log.
    Simulate(SimulateArgs),
    /// Run one filter over a measurement log.
    Estimate(EstimateArgs),
    /// Run the filters of a config file over one shared simulation.
    Compare(StudyArgs),
    /// Matched vs mismatched OCV curve study (`ocv` drives the plant, `ocv_filter` the filter).
    Tempstudy(StudyArgs),
    /// Fit R, R1, C1, R2, C2 to a measurement log.
    Fit(FitArgs),
    /// Write a synthetic drive cycle.
    GenCycle(GenCycleArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// `reference` or a key=value parameter file.
    #[arg(long, default_value = "reference")]
    params: String,
    /// `lfp20c`, `lfp40c` or an OCV CSV.
    #[arg(long, default_value = "lfp20c")]
    ocv: String,
}

impl ModelArgs {
    fn load(&self) -> anyhow::Result<(xkf_core::BatteryParams, xkf_core::OcvCurve)> {
        let params = ParamsSource::parse(&self.params, Path::new("")).load()?;
        let curve = CurveSource::parse(&self.ocv, Path::new("")).load()?;
        Ok((params, curve))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Generator {
    Dst,
    Fuds,
}

#[derive(Args)]
struct GeneratorArgs {
    #[arg(long, default_value_t = 3600.0)]
    duration: f64,
    /// Largest current magnitude, amperes.
    #[arg(long, default_value_t = 8.0)]
    peak: f64,
    #[arg(long, default_value_t = 1.0)]
    dt: f64,
    /// Seed of the urban profile.
    #[arg(long, default_value_t = 1)]
    cycle_seed: u64,
}

impl GeneratorArgs {
    fn generate(&self, kind: Generator) -> xkf_core::Result<DriveCycle> {
        match kind {
            Generator::Dst => generate_dst_like(self.duration, self.peak, self.dt),
            Generator::Fuds => generate_fuds_like(self.duration, self.peak, self.dt, self.cycle_seed),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Scheme {
    Euler,
    Exact,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Drive cycle CSV (`t_s,current_a`); overrides --generator.
    #[arg(long)]
    cycle: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "dst")]
    generator: Generator,
    #[command(flatten)]
    gen: GeneratorArgs,
    /// Initial state of charge.
    #[arg(long, default_value_t = 1.0)]
    soc0: f64,
    /// Process noise std on every state per step.
    #[arg(long, default_value_t = 0.0)]
    process_std: f64,
    /// Voltage sensor noise std, volts.
    #[arg(long, default_value_t = 1e-4)]
    measurement_std: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value = "euler")]
    discretization: Scheme,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    /// Measurement log CSV (`t_s,current_a,voltage_v[,soc_true,v1_true,v2_true]`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "xkf")]
    filter: FilterKind,
    #[command(flatten)]
    model: ModelArgs,
    /// Initial SoC estimate.
    #[arg(long, default_value_t = 0.6)]
    soc0: f64,
    #[arg(long, default_value_t = 0.0)]
    k1: f64,
    #[arg(long, default_value_t = 0.0)]
    k2: f64,
    #[arg(long, default_value_t = 2.0)]
    k3: f64,
    /// Process noise std; one value for all states or three comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "0.01")]
    q_std: Vec<f64>,
    #[arg(long, default_value_t = 0.04)]
    r_std: f64,
    /// Diagonal of the initial covariance, three comma-separated values.
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.01,0.25")]
    p0: Vec<f64>,
    #[arg(long, default_value_t = 1e-3)]
    ukf_alpha: f64,
    /// Convergence threshold for the metrics, SoC fraction.
    #[arg(long, default_value_t = 0.02)]
    threshold: f64,
    /// Trace CSV.
    #[arg(long, short)]
    out: PathBuf,
    /// Metrics CSV; needs truth columns in the log.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    /// Experiment config (key=value).
    config: PathBuf,
    /// Output directory; defaults to the config's `output_dir`, then `./<name>`.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    /// `lfp20c`, `lfp40c` or an OCV CSV.
    #[arg(long, default_value = "lfp20c")]
    ocv: String,
    /// Cell capacity, ampere-seconds.
    #[arg(long, default_value_t = 8028.0)]
    capacity_as: f64,
    /// SoC at the first sample; defaults to the log's truth column.
    #[arg(long)]
    initial_soc: Option<f64>,
    #[arg(long, default_value_t = 2)]
    refinements: usize,
    /// Points on the R axis of the coarse grid.
    #[arg(long, default_value_t = 21)]
    r_points: usize,
    /// Points on each time-constant and RC-resistance axis of the coarse grid.
    #[arg(long, default_value_t = 11)]
    rc_points: usize,
    /// Fitted parameters (key=value).
    #[arg(long, short)]
    out: PathBuf,
    /// Residuals CSV (`t_s,residual_v`).
    #[arg(long)]
    residuals: Option<PathBuf>,
}

#[derive(Args)]
struct GenCycleArgs {
    #[arg(value_enum)]
    kind: Generator,
    #[command(flatten)]
    gen: GeneratorArgs,
    #[arg(long, short)]
    out: PathBuf,
}

fn simulate_cmd(a: &SimulateArgs) -> anyhow::Result<u8> {
    let (params, curve) = a.model.load()?;
    let cycle = match &a.cycle {
        Some(p) => ingest_cycle_csv(p)?,
        None => a.gen.generate(a.generator)?,
    };
    let noise = NoiseSpec::uniform(a.process_std, a.measurement_std, a.seed);
    let scheme = match a.discretization {
        Scheme::Euler => Discretization::Euler,
        Scheme::Exact => Discretization::Exact,
    };
    let log = simulate_with(&params, &curve, &cycle, BatteryState::at_rest(a.soc0), &noise, scheme)?;
    log.write_csv(&a.out)?;
    info!("wrote {} samples to {}", log.len(), a.out.display());
    Ok(0)
}

fn estimate_cmd(a: &EstimateArgs) -> anyhow::Result<u8> {
    let (params, curve) = a.model.load()?;
    let q_std: [f64; 3] = match a.q_std.as_slice() {
        [q] => [*q; 3],
        [q1, q2, q3] => [*q1, *q2, *q3],
        _ => bail!("--q-std takes one or three values"),
    };
    let Ok(p0) = <[f64; 3]>::try_from(a.p0.as_slice()) else {
        bail!("--p0 takes three values");
    };
    let setup = FilterSetup {
        gain: ObserverGain::new(a.k1, a.k2, a.k3)?,
        kalman: KalmanConfig::from_std(q_std, a.r_std, p0)?,
        ukf: UkfSettings {
            alpha: a.ukf_alpha,
            ..UkfSettings::default()
        },
        ..FilterSetup::new(params, Arc::new(curve))
    };
    let log = load_log(&a.data)?;
    let run = run_filter(a.filter, setup, BatteryState::at_rest(a.soc0), &log);
    std::fs::write(&a.out, run.to_csv_string()).with_context(|| format!("writing {}", a.out.display()))?;

    match run.metrics(a.threshold) {
        Some(m) => {
            let table = format!("{METRICS_HEADER}\n{}\n", m.csv_row(a.filter));
            print!("{table}");
            if let Some(path) = &a.metrics {
                std::fs::write(path, table).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        None if a.metrics.is_some() => bail!("the log has no truth columns; metrics need them"),
        None => {}
    }
    if let Some(e) = &run.failure {
        eprintln!("{}: {e}", a.filter);
        return Ok(EXIT_ALL_FAILED);
    }
    Ok(0)
}

fn output_dir(cfg: &ExperimentConfig, out: &Option<PathBuf>) -> PathBuf {
    out.clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(&cfg.name))
}

fn compare_cmd(a: &StudyArgs) -> anyhow::Result<u8> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let res = run_experiment(&cfg)?;
    let dir = output_dir(&cfg, &a.out);
    res.write(&cfg, &dir)?;
    print!("{}", res.metrics_csv());
    for (kind, (run, _)) in &res.runs {
        if let Some(e) = &run.failure {
            eprintln!("{kind}: {e}");
        }
    }
    info!("outputs in {}", dir.display());
    Ok(if res.all_failed() {
        EXIT_ALL_FAILED
    } else if res.any_failed() {
        EXIT_PARTIAL
    } else {
        0
    })
}

fn tempstudy_cmd(a: &StudyArgs) -> anyhow::Result<u8> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let Some(filter_src) = &cfg.ocv_filter else {
        bail!("tempstudy needs `ocv_filter` in the config (the curve the filter assumes)");
    };
    let st = run_temperature_study(&cfg, &cfg.ocv.load()?, &filter_src.load()?)?;
    let dir = output_dir(&cfg, &a.out);
    st.write(&dir)?;
    let (matched, mismatched) = st.low_soc_mean_abs_error(0.2);
    println!("filter={}", st.filter);
    println!("mean_abs_error_below_soc_0.2_matched={matched}");
    println!("mean_abs_error_below_soc_0.2_mismatched={mismatched}");
    match st.divergence_onset_soc {
        Some(s) => println!("divergence_onset_soc={s}"),
        None => println!("divergence_onset_soc="),
    }
    let failed = [&st.matched.0, &st.mismatched.0]
        .iter()
        .filter(|r| r.failure.is_some())
        .count();
    Ok(match failed {
        0 => 0,
        2 => EXIT_ALL_FAILED,
        _ => EXIT_PARTIAL,
    })
}

fn fit_cmd(a: &FitArgs) -> anyhow::Result<u8> {
    let curve = CurveSource::parse(&a.ocv, Path::new("")).load()?;
    let log = load_log(&a.data)?;
    let d = GridSpec::default();
    let grid = GridSpec {
        r_ohm: Axis::linear(d.r_ohm.lo, d.r_ohm.hi, a.r_points),
        tau1_s: Axis::log(d.tau1_s.lo, d.tau1_s.hi, a.rc_points),
        tau2_s: Axis::log(d.tau2_s.lo, d.tau2_s.hi, a.rc_points),
        r1: Axis::log(d.r1.lo, d.r1.hi, a.rc_points),
        r2: Axis::log(d.r2.lo, d.r2.hi, a.rc_points),
        refinements: a.refinements,
        ..d
    };
    let opts = FitOptions {
        capacity_as: a.capacity_as,
        initial_soc: a.initial_soc,
    };
    let report = fit_parameters(&log, &curve, &grid, &opts)?;
    match &a.residuals {
        Some(r) => report.write(&a.out, r)?,
        None => {
            std::fs::write(&a.out, report.to_kv_string()).with_context(|| format!("writing {}", a.out.display()))?
        }
    }
    print!("{}", report.to_kv_string());
    if report.unidentifiable_rc {
        eprintln!("warning: the current never changes; RC pairs are not identifiable from this log");
    }
    Ok(0)
}

fn gen_cycle_cmd(a: &GenCycleArgs) -> anyhow::Result<u8> {
    let cycle = a.gen.generate(a.kind)?;
    cycle.write_csv(&a.out)?;
    info!("wrote {} samples to {}", cycle.len(), a.out.display());
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => simulate_cmd(a),
        Command::Estimate(a) => estimate_cmd(a),
        Command::Compare(a) => compare_cmd(a),
        Command::Tempstudy(a) => tempstudy_cmd(a),
        Command::Fit(a) => fit_cmd(a),
        Command::GenCycle(a) => gen_cycle_cmd(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            // A numerical failure outside a filter run still means nothing usable came out.
            let numerical = matches!(e.downcast_ref::<Error>(), Some(Error::Numerical { .. }));
            ExitCode::from(if numerical { EXIT_ALL_FAILED } else { EXIT_INPUT })
        }
    }
}
