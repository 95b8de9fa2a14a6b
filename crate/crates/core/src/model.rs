//! 2-RC equivalent-circuit cell model.
//!
//! State `x = (v1, v2, soc)` evolves as `dx/dt = A x + B i` with
//!
//! ```text
//! A = diag(-1/(R1 C1), -1/(R2 C2), 0)      B = (1/C1, 1/C2, -1/Qc)
//! ```
//!
//! and the terminal voltage is `V = V_oc(soc) - v1 - v2 - R i`. Positive
//! current discharges the cell.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cycle::DriveCycle;
use crate::error::{Error, Result};
use crate::ocv::OcvCurve;

pub const SECONDS_PER_HOUR: f64 = 3600.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatteryParams {
    /// Ohmic resistance R, ohms.
    pub r_ohm: f64,
    pub r1: f64,
    pub c1: f64,
    pub r2: f64,
    pub c2: f64,
    /// Nominal capacity Qc in ampere-seconds.
    pub capacity_as: f64,
}

impl BatteryParams {
    pub fn new(r_ohm: f64, r1: f64, c1: f64, r2: f64, c2: f64, capacity_as: f64) -> Result<Self> {
        let p = BatteryParams {
            r_ohm,
            r1,
            c1,
            r2,
            c2,
            capacity_as,
        };
        p.validate()?;
        Ok(p)
    }

    /// Identified LiFePO4 parameters: R = 0.18 Ω, two identical RC pairs of
    /// 0.035 Ω / 1e6 F, 2.23 Ah capacity.
    pub fn lfp_reference() -> Self {
        BatteryParams {
            r_ohm: 0.18,
            r1: 0.035,
            c1: 1e6,
            r2: 0.035,
            c2: 1e6,
            capacity_as: 2.23 * SECONDS_PER_HOUR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::input(format!(
                    "battery parameter {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn tau1(&self) -> f64 {
        self.r1 * self.c1
    }

    pub fn tau2(&self) -> f64 {
        self.r2 * self.c2
    }

    pub fn capacity_ah(&self) -> f64 {
        self.capacity_as / SECONDS_PER_HOUR
    }

    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("r_ohm", self.r_ohm),
            ("r1", self.r1),
            ("c1", self.c1),
            ("r2", self.r2),
            ("c2", self.c2),
            ("capacity_as", self.capacity_as),
        ]
    }

    /// Parses the flat `key=value` format (`capacity_ah` in ampere-hours).
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let map = crate::kv::parse(text)?;
        let get = |key: &str| -> Result<f64> {
            let (line, raw) = map
                .get(key)
                .ok_or_else(|| Error::input(format!("params file is missing `{key}`")))?;
            raw.parse().map_err(|_| Error::Parse {
                line: *line,
                message: format!("`{key}` is not a number: {raw:?}"),
            })
        };
        BatteryParams::new(
            get("r_ohm")?,
            get("r1")?,
            get("c1")?,
            get("r2")?,
            get("c2")?,
            get("capacity_ah")? * SECONDS_PER_HOUR,
        )
    }

    pub fn to_kv_string(&self) -> String {
        format!(
            "r_ohm={}\nr1={}\nc1={}\nr2={}\nc2={}\ncapacity_ah={}\n",
            self.r_ohm,
            self.r1,
            self.c1,
            self.r2,
            self.c2,
            self.capacity_ah()
        )
    }
}

pub fn load_params(path: impl AsRef<Path>) -> Result<BatteryParams> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    BatteryParams::from_kv_str(&text)
}

/// Cell state `(v1, v2, soc)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatteryState {
    pub v1: f64,
    pub v2: f64,
    pub soc: f64,
}

impl BatteryState {
    pub fn new(v1: f64, v2: f64, soc: f64) -> Self {
        BatteryState { v1, v2, soc }
    }

    /// Relaxed cell (no polarization) at the given SoC.
    pub fn at_rest(soc: f64) -> Self {
        BatteryState { v1: 0.0, v2: 0.0, soc }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.v1, self.v2, self.soc)
    }

    pub fn from_vector(x: &Vector3<f64>) -> Self {
        BatteryState {
            v1: x[0],
            v2: x[1],
            soc: x[2],
        }
    }
}

/// Discrete-time noise injected by [`simulate`], applied once per sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Standard deviations for (v1 [V], v2 [V], soc [fraction]).
    pub process_std: [f64; 3],
    pub measurement_std: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec {
            process_std: [0.0; 3],
            measurement_std: 0.0,
            seed: 0,
        }
    }

    /// One process standard deviation for every state, one for the voltage sensor.
    pub fn uniform(process_std: f64, measurement_std: f64, seed: u64) -> Self {
        NoiseSpec {
            process_std: [process_std; 3],
            measurement_std,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.process_std.iter().chain(std::iter::once(&self.measurement_std));
        if all.clone().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::input(
                "noise standard deviations must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// Continuous-time system matrices `(A, B)`.
pub fn system_matrices(params: &BatteryParams) -> (Matrix3<f64>, Vector3<f64>) {
    let a = Matrix3::from_diagonal(&Vector3::new(-1.0 / params.tau1(), -1.0 / params.tau2(), 0.0));
    let b = Vector3::new(1.0 / params.c1, 1.0 / params.c2, -1.0 / params.capacity_as);
    (a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Discretization {
    /// `F = I + A dt`, `G = B dt`.
    #[default]
    Euler,
    /// Zero-order-hold solution, exact for piecewise-constant current.
    Exact,
}

/// Discrete transition `x+ = F x + G i` over one step of `dt_s`.
pub fn discretize(params: &BatteryParams, dt_s: f64, method: Discretization) -> (Matrix3<f64>, Vector3<f64>) {
    match method {
        Discretization::Euler => {
            let (a, b) = system_matrices(params);
            (Matrix3::identity() + a * dt_s, b * dt_s)
        }
        Discretization::Exact => {
            let d1 = (-dt_s / params.tau1()).exp();
            let d2 = (-dt_s / params.tau2()).exp();
            let f = Matrix3::from_diagonal(&Vector3::new(d1, d2, 1.0));
            let g = Vector3::new(
                params.r1 * (1.0 - d1),
                params.r2 * (1.0 - d2),
                -dt_s / params.capacity_as,
            );
            (f, g)
        }
    }
}

/// Noise-free output `h(x) = V_oc(soc) - v1 - v2`.
pub fn open_circuit_part(curve: &OcvCurve, state: &BatteryState) -> f64 {
    curve.voltage_at(state.soc) - state.v1 - state.v2
}

pub fn terminal_voltage(params: &BatteryParams, curve: &OcvCurve, state: &BatteryState, current_a: f64) -> f64 {
    open_circuit_part(curve, state) - params.r_ohm * current_a
}

/// Unclamped Euler step of the model, as used inside the estimators.
pub fn propagate(params: &BatteryParams, state: &BatteryState, current_a: f64, dt_s: f64) -> BatteryState {
    BatteryState {
        v1: state.v1 + dt_s * (-state.v1 / params.tau1() + current_a / params.c1),
        v2: state.v2 + dt_s * (-state.v2 / params.tau2() + current_a / params.c2),
        soc: state.soc - dt_s * current_a / params.capacity_as,
    }
}

/// One plant step: Euler update with SoC held inside `[0, 1]`.
pub fn step_euler(params: &BatteryParams, state: &BatteryState, current_a: f64, dt_s: f64) -> Result<BatteryState> {
    step_plant(params, state, current_a, dt_s, Discretization::Euler)
}

pub fn step_plant(
    params: &BatteryParams,
    state: &BatteryState,
    current_a: f64,
    dt_s: f64,
    method: Discretization,
) -> Result<BatteryState> {
    if !(dt_s > 0.0) || !dt_s.is_finite() {
        return Err(Error::input(format!("time step must be positive, got {dt_s}")));
    }
    let mut next = match method {
        Discretization::Euler => propagate(params, state, current_a, dt_s),
        Discretization::Exact => {
            let (f, g) = discretize(params, dt_s, method);
            BatteryState::from_vector(&(f * state.to_vector() + g * current_a))
        }
    };
    next.soc = next.soc.clamp(0.0, 1.0);
    Ok(next)
}

/// Trapezoidal Coulomb counting. The result is deliberately not clamped.
pub fn coulomb_count(initial_soc: f64, samples: &[(f64, f64)], capacity_as: f64) -> Result<Vec<(f64, f64)>> {
    if !(capacity_as > 0.0) {
        return Err(Error::input("capacity must be positive"));
    }
    let mut out = Vec::with_capacity(samples.len());
    let Some(&(t0, _)) = samples.first() else {
        return Ok(out);
    };
    out.push((t0, initial_soc));
    let mut charge = 0.0;
    for (k, w) in samples.windows(2).enumerate() {
        let ((ta, ia), (tb, ib)) = (w[0], w[1]);
        if !(tb > ta) {
            return Err(Error::Format {
                row: k + 2,
                message: format!("timestamp {tb} does not follow {ta}"),
            });
        }
        charge += 0.5 * (ia + ib) * (tb - ta);
        out.push((tb, initial_soc - charge / capacity_as));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub t_s: f64,
    pub current_a: f64,
    pub voltage_v: f64,
    /// Plant truth, absent for field recordings.
    pub truth: Option<BatteryState>,
}

/// Time-aligned measurements, optionally with the generating state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimulationLog {
    pub rows: Vec<LogRow>,
}

const LOG_HEADER: &str = "t_s,current_a,voltage_v,soc_true,v1_true,v2_true";

impl SimulationLog {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Sample period, taken from the first interval (1 s for a single row).
    pub fn dt_s(&self) -> f64 {
        match self.rows.as_slice() {
            [a, b, ..] => b.t_s - a.t_s,
            _ => 1.0,
        }
    }

    pub fn currents(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.current_a).collect()
    }

    pub fn voltages(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.voltage_v).collect()
    }

    pub fn has_truth(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.truth.is_some())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::with_capacity(64 * self.rows.len() + LOG_HEADER.len());
        out.push_str(LOG_HEADER);
        out.push('\n');
        for r in &self.rows {
            match r.truth {
                Some(x) => out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.t_s, r.current_a, r.voltage_v, x.soc, x.v1, x.v2
                )),
                None => out.push_str(&format!("{},{},{},,,\n", r.t_s, r.current_a, r.voltage_v)),
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::file(path, e))
    }

    /// Reads a log. Only `t_s,current_a,voltage_v` are required; truth columns
    /// are picked up when present and non-empty.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let (Some(tc), Some(ic), Some(vc)) = (col("t_s"), col("current_a"), col("voltage_v")) else {
            return Err(Error::Parse {
                line: 1,
                message: format!(
                    "expected at least t_s,current_a,voltage_v, found `{}`",
                    headers.as_slice()
                ),
            });
        };
        let truth_cols = (col("soc_true"), col("v1_true"), col("v2_true"));

        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            let num = |idx: usize| -> Result<Option<f64>> {
                match record.get(idx).unwrap_or("") {
                    "" => Ok(None),
                    raw => raw.parse().map(Some).map_err(|_| Error::Parse {
                        line,
                        message: format!("not a number: {raw:?}"),
                    }),
                }
            };
            let req = |idx: usize| -> Result<f64> {
                num(idx)?.ok_or_else(|| Error::Parse {
                    line,
                    message: "missing required value".into(),
                })
            };
            let truth = match truth_cols {
                (Some(s), Some(a), Some(b)) => match (num(s)?, num(a)?, num(b)?) {
                    (Some(soc), Some(v1), Some(v2)) => Some(BatteryState { v1, v2, soc }),
                    _ => None,
                },
                _ => None,
            };
            rows.push(LogRow {
                t_s: req(tc)?,
                current_a: req(ic)?,
                voltage_v: req(vc)?,
                truth,
            });
        }
        Ok(SimulationLog { rows })
    }
}

pub fn load_log(path: impl AsRef<Path>) -> Result<SimulationLog> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    SimulationLog::from_csv_str(&text)
}

/// Runs the plant over `cycle` and records noisy terminal voltage.
///
/// Row `k` holds the state at `t_k` and the voltage measured from it; the
/// state then advances with current `i_k`, receives process noise and has its
/// SoC clamped. The random stream is owned by the call and seeded from
/// `noise.seed`.
pub fn simulate(
    params: &BatteryParams,
    curve: &OcvCurve,
    cycle: &DriveCycle,
    initial: BatteryState,
    noise: &NoiseSpec,
) -> Result<SimulationLog> {
    simulate_with(params, curve, cycle, initial, noise, Discretization::Euler)
}

pub fn simulate_with(
    params: &BatteryParams,
    curve: &OcvCurve,
    cycle: &DriveCycle,
    initial: BatteryState,
    noise: &NoiseSpec,
    method: Discretization,
) -> Result<SimulationLog> {
    params.validate()?;
    noise.validate()?;
    if cycle.is_empty() {
        return Err(Error::input("drive cycle has no samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };

    let mut state = initial;
    state.soc = state.soc.clamp(0.0, 1.0);
    let mut rows = Vec::with_capacity(cycle.len());
    for (k, &current_a) in cycle.currents.iter().enumerate() {
        let v_true = terminal_voltage(params, curve, &state, current_a);
        rows.push(LogRow {
            t_s: cycle.time_at(k),
            current_a,
            voltage_v: v_true + noise.measurement_std * gauss(),
            truth: Some(state),
        });
        let mut next = step_plant(params, &state, current_a, cycle.dt_s, method)?;
        next.v1 += noise.process_std[0] * gauss();
        next.v2 += noise.process_std[1] * gauss();
        next.soc = (next.soc + noise.process_std[2] * gauss()).clamp(0.0, 1.0);
        state = next;
    }
    Ok(SimulationLog { rows })
}
