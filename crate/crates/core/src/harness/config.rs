use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::cycle::{generate_dst_like, generate_fuds_like, ingest_cycle_csv, DriveCycle};
use crate::error::{Error, Result};
use crate::estimators::{FilterKind, FilterSetup, KalmanConfig, ObserverGain, UkfSettings};
use crate::model::{load_params, BatteryParams, Discretization, NoiseSpec};
use crate::ocv::{load_ocv_csv, OcvCurve};

#[derive(Debug, Clone, PartialEq)]
pub enum ParamsSource {
    Reference,
    File(PathBuf),
}

impl ParamsSource {
    /// `reference` selects the built-in parameter set; anything else is a
    /// path relative to `base`.
    pub fn parse(raw: &str, base: &Path) -> Self {
        match raw {
            "reference" => ParamsSource::Reference,
            path => ParamsSource::File(base.join(path)),
        }
    }

    pub fn load(&self) -> Result<BatteryParams> {
        match self {
            ParamsSource::Reference => Ok(BatteryParams::lfp_reference()),
            ParamsSource::File(p) => load_params(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CurveSource {
    Lfp20,
    Lfp40,
    File(PathBuf),
}

impl CurveSource {
    pub fn load(&self) -> Result<OcvCurve> {
        match self {
            CurveSource::Lfp20 => Ok(OcvCurve::lfp_20c()),
            CurveSource::Lfp40 => Ok(OcvCurve::lfp_40c()),
            CurveSource::File(p) => load_ocv_csv(p),
        }
    }

    /// `lfp20c` and `lfp40c` select the built-in tables; anything else is a
    /// path relative to `base`.
    pub fn parse(raw: &str, base: &Path) -> Self {
        match raw {
            "lfp20c" => CurveSource::Lfp20,
            "lfp40c" => CurveSource::Lfp40,
            path => CurveSource::File(base.join(path)),
        }
    }

    fn describe(&self) -> String {
        match self {
            CurveSource::Lfp20 => "lfp20c".into(),
            CurveSource::Lfp40 => "lfp40c".into(),
            CurveSource::File(p) => p.display().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CycleSource {
    Dst { duration_s: f64, peak_a: f64 },
    Fuds { duration_s: f64, peak_a: f64, seed: u64 },
    File(PathBuf),
}

/// One comparison run: plant, load profile, noise and the filters to race.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub params: ParamsSource,
    /// Curve the plant is simulated on.
    pub ocv: CurveSource,
    /// Curve the filters use; `None` means the plant curve.
    pub ocv_filter: Option<CurveSource>,
    pub cycle: CycleSource,
    pub dt_s: f64,
    pub filters: Vec<FilterKind>,
    pub soc_true0: f64,
    pub soc_est0: f64,
    pub gain: ObserverGain,
    pub kalman: KalmanConfig,
    pub ukf: UkfSettings,
    pub noise: NoiseSpec,
    /// Constant offset added to the current the filters see, amperes.
    pub current_bias_a: f64,
    pub threshold: f64,
    pub plant_discretization: Discretization,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            params: ParamsSource::Reference,
            ocv: CurveSource::Lfp20,
            ocv_filter: None,
            cycle: CycleSource::Dst {
                duration_s: 3600.0,
                peak_a: 8.0,
            },
            dt_s: 1.0,
            filters: FilterKind::ALL.to_vec(),
            soc_true0: 1.0,
            soc_est0: 0.6,
            gain: ObserverGain::default(),
            kalman: KalmanConfig::default(),
            ukf: UkfSettings::default(),
            noise: NoiseSpec {
                process_std: [0.0; 3],
                measurement_std: 1e-4,
                seed: 42,
            },
            current_bias_a: 0.0,
            threshold: 0.02,
            plant_discretization: Discretization::Euler,
            output_dir: None,
        }
    }
}

/// Loaded inputs of an experiment.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub params: BatteryParams,
    pub curve_true: Arc<OcvCurve>,
    pub curve_filter: Arc<OcvCurve>,
    pub cycle: DriveCycle,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filters.is_empty() {
            return Err(Error::input("select at least one filter"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Range {
                what: "threshold",
                value: self.threshold,
                lo: 0.0,
                hi: 1.0,
            });
        }
        if !(0.0..=1.0).contains(&self.soc_true0) {
            return Err(Error::Range {
                what: "soc_true0",
                value: self.soc_true0,
                lo: 0.0,
                hi: 1.0,
            });
        }
        if !self.soc_est0.is_finite() || !self.current_bias_a.is_finite() {
            return Err(Error::input("initial estimate and current bias must be finite"));
        }
        if !(self.ukf.alpha > 0.0) || !self.ukf.beta.is_finite() || !(self.ukf.kappa + 3.0 > 0.0) {
            return Err(Error::input("ukf needs alpha > 0, finite beta and kappa > -3"));
        }
        if !(self.dt_s > 0.0) {
            return Err(Error::input(format!("dt_s must be positive, got {}", self.dt_s)));
        }
        self.noise.validate()
    }

    pub fn resolve(&self) -> Result<Resolved> {
        self.validate()?;
        let params = self.params.load()?;
        let curve_true = Arc::new(self.ocv.load()?);
        let curve_filter = match &self.ocv_filter {
            Some(src) if *src != self.ocv => Arc::new(src.load()?),
            _ => curve_true.clone(),
        };
        let cycle = match &self.cycle {
            CycleSource::Dst { duration_s, peak_a } => generate_dst_like(*duration_s, *peak_a, self.dt_s)?,
            CycleSource::Fuds {
                duration_s,
                peak_a,
                seed,
            } => generate_fuds_like(*duration_s, *peak_a, self.dt_s, *seed)?,
            CycleSource::File(p) => ingest_cycle_csv(p)?,
        };
        Ok(Resolved {
            params,
            curve_true,
            curve_filter,
            cycle,
        })
    }

    pub fn filter_setup(&self, params: BatteryParams, curve: Arc<OcvCurve>) -> FilterSetup {
        FilterSetup {
            gain: self.gain,
            kalman: self.kalman,
            ukf: self.ukf,
            ..FilterSetup::new(params, curve)
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        ExperimentConfig::from_kv_str(&text, base)
    }

    /// Parses `key=value` lines; relative paths are resolved against `base`.
    /// Unspecified keys keep their defaults.
    pub fn from_kv_str(text: &str, base: &Path) -> Result<Self> {
        let map = crate::kv::parse(text)?;
        let mut cfg = ExperimentConfig::default();
        let num = |key: &str| -> Result<Option<f64>> {
            map.get(key)
                .map(|(line, raw)| {
                    raw.parse::<f64>().map_err(|_| Error::Parse {
                        line: *line,
                        message: format!("`{key}` is not a number: {raw:?}"),
                    })
                })
                .transpose()
        };
        let list = |key: &str| -> Result<Option<Vec<f64>>> {
            map.get(key)
                .map(|(line, raw)| {
                    raw.split(',')
                        .map(|s| {
                            s.trim().parse::<f64>().map_err(|_| Error::Parse {
                                line: *line,
                                message: format!("`{key}` expects numbers, got {raw:?}"),
                            })
                        })
                        .collect()
                })
                .transpose()
        };
        let triple = |key: &str| -> Result<Option<[f64; 3]>> {
            match list(key)? {
                None => Ok(None),
                Some(v) if v.len() == 1 => Ok(Some([v[0]; 3])),
                Some(v) if v.len() == 3 => Ok(Some([v[0], v[1], v[2]])),
                Some(_) => Err(Error::Parse {
                    line: map[key].0,
                    message: format!("`{key}` expects one or three values"),
                }),
            }
        };
        let seed = |key: &str| -> Result<Option<u64>> {
            map.get(key)
                .map(|(line, raw)| {
                    raw.parse::<u64>().map_err(|_| Error::Parse {
                        line: *line,
                        message: format!("`{key}` is not an unsigned integer: {raw:?}"),
                    })
                })
                .transpose()
        };

        if let Some((_, v)) = map.get("name") {
            cfg.name = v.clone();
        }
        if let Some((_, v)) = map.get("params") {
            cfg.params = ParamsSource::parse(v, base);
        }
        if let Some((_, v)) = map.get("ocv") {
            cfg.ocv = CurveSource::parse(v, base);
        }
        if let Some((_, v)) = map.get("ocv_filter") {
            cfg.ocv_filter = Some(CurveSource::parse(v, base));
        }
        cfg.dt_s = num("dt_s")?.unwrap_or(cfg.dt_s);
        let duration_s = num("duration_s")?.unwrap_or(3600.0);
        let peak_a = num("peak_a")?.unwrap_or(8.0);
        if let Some((_, v)) = map.get("cycle") {
            cfg.cycle = match v.as_str() {
                "dst" => CycleSource::Dst { duration_s, peak_a },
                "fuds" => CycleSource::Fuds {
                    duration_s,
                    peak_a,
                    seed: seed("cycle_seed")?.unwrap_or(1),
                },
                path => CycleSource::File(base.join(path)),
            };
        } else {
            cfg.cycle = CycleSource::Dst { duration_s, peak_a };
        }
        if let Some((line, v)) = map.get("filters") {
            cfg.filters = v
                .split(',')
                .map(|s| s.parse::<FilterKind>())
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::Parse {
                    line: *line,
                    message: e.to_string(),
                })?;
            cfg.filters.sort();
            cfg.filters.dedup();
        }
        cfg.soc_true0 = num("soc_true0")?.unwrap_or(cfg.soc_true0);
        cfg.soc_est0 = num("soc_est0")?.unwrap_or(cfg.soc_est0);
        cfg.gain = ObserverGain::new(
            num("k1")?.unwrap_or(0.0),
            num("k2")?.unwrap_or(0.0),
            num("k3")?.unwrap_or(cfg.gain.k3),
        )?;
        let q_std = triple("q_std")?.unwrap_or([0.01; 3]);
        let r_std = num("r_std")?.unwrap_or(0.04);
        let p0 = triple("p0")?.unwrap_or([1e-2, 1e-2, 0.25]);
        cfg.kalman = KalmanConfig::from_std(q_std, r_std, p0)?;
        cfg.ukf.alpha = num("ukf_alpha")?.unwrap_or(cfg.ukf.alpha);
        cfg.ukf.beta = num("ukf_beta")?.unwrap_or(cfg.ukf.beta);
        cfg.ukf.kappa = num("ukf_kappa")?.unwrap_or(cfg.ukf.kappa);
        cfg.noise = NoiseSpec {
            process_std: triple("process_std")?.unwrap_or(cfg.noise.process_std),
            measurement_std: num("measurement_std")?.unwrap_or(cfg.noise.measurement_std),
            seed: seed("seed")?.unwrap_or(cfg.noise.seed),
        };
        cfg.current_bias_a = num("current_bias_a")?.unwrap_or(0.0);
        cfg.threshold = num("threshold")?.unwrap_or(cfg.threshold);
        if let Some((line, v)) = map.get("discretization") {
            cfg.plant_discretization = match v.as_str() {
                "euler" => Discretization::Euler,
                "exact" => Discretization::Exact,
                other => {
                    return Err(Error::Parse {
                        line: *line,
                        message: format!("unknown discretization {other:?} (expected euler|exact)"),
                    })
                }
            };
        }
        if let Some((_, v)) = map.get("output_dir") {
            cfg.output_dir = Some(base.join(v));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fully resolved configuration in the same `key=value` format.
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "name={}", self.name);
        let _ = writeln!(
            out,
            "params={}",
            match &self.params {
                ParamsSource::Reference => "reference".to_string(),
                ParamsSource::File(p) => p.display().to_string(),
            }
        );
        let _ = writeln!(out, "ocv={}", self.ocv.describe());
        if let Some(f) = &self.ocv_filter {
            let _ = writeln!(out, "ocv_filter={}", f.describe());
        }
        match &self.cycle {
            CycleSource::Dst { duration_s, peak_a } => {
                let _ = writeln!(out, "cycle=dst\nduration_s={duration_s}\npeak_a={peak_a}");
            }
            CycleSource::Fuds {
                duration_s,
                peak_a,
                seed,
            } => {
                let _ = writeln!(
                    out,
                    "cycle=fuds\nduration_s={duration_s}\npeak_a={peak_a}\ncycle_seed={seed}"
                );
            }
            CycleSource::File(p) => {
                let _ = writeln!(out, "cycle={}", p.display());
            }
        }
        let _ = writeln!(out, "dt_s={}", self.dt_s);
        let names: Vec<&str> = self.filters.iter().map(|f| f.name()).collect();
        let _ = writeln!(out, "filters={}", names.join(","));
        let _ = writeln!(out, "soc_true0={}\nsoc_est0={}", self.soc_true0, self.soc_est0);
        let _ = writeln!(out, "k1={}\nk2={}\nk3={}", self.gain.k1, self.gain.k2, self.gain.k3);
        let q = self.kalman.q_cov();
        let p0 = self.kalman.p0();
        let _ = writeln!(
            out,
            "q_std={},{},{}",
            q[(0, 0)].sqrt(),
            q[(1, 1)].sqrt(),
            q[(2, 2)].sqrt()
        );
        let _ = writeln!(out, "r_std={}", self.kalman.r_cov().sqrt());
        let _ = writeln!(out, "p0={},{},{}", p0[(0, 0)], p0[(1, 1)], p0[(2, 2)]);
        let _ = writeln!(
            out,
            "ukf_alpha={}\nukf_beta={}\nukf_kappa={}",
            self.ukf.alpha, self.ukf.beta, self.ukf.kappa
        );
        let ps = self.noise.process_std;
        let _ = writeln!(out, "process_std={},{},{}", ps[0], ps[1], ps[2]);
        let _ = writeln!(out, "measurement_std={}", self.noise.measurement_std);
        let _ = writeln!(out, "seed={}", self.noise.seed);
        let _ = writeln!(out, "current_bias_a={}", self.current_bias_a);
        let _ = writeln!(out, "threshold={}", self.threshold);
        let _ = writeln!(
            out,
            "discretization={}",
            match self.plant_discretization {
                Discretization::Euler => "euler",
                Discretization::Exact => "exact",
            }
        );
        if let Some(d) = &self.output_dir {
            let _ = writeln!(out, "output_dir={}", d.display());
        }
        out
    }
}
