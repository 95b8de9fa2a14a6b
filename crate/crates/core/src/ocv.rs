//! Open-circuit-voltage lookup tables.
//!
//! An [`OcvCurve`] maps state of charge (a fraction in `[0, 1]`) to the
//! equilibrium cell voltage. Lookup is piecewise linear so the interpolant is
//! monotone whenever the knots are, and the derivative used by the filters is
//! always strictly positive on a validated curve.
//!
//! Curves are stored one per ambient temperature. The CSV layout is
//!
//! ```text
//! # temperature_c=20
//! soc,voltage_v
//! 0,2.0
//! 0.5,3.3
//! 1,3.6
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Temperature assumed when a file carries no `# temperature_c=` line.
pub const DEFAULT_TEMPERATURE_C: f64 = 20.0;

const MAX_FD_STEP: f64 = 1e-4;
const HEADER: [&str; 2] = ["soc", "voltage_v"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Knot {
    pub soc: f64,
    pub voltage: f64,
}

impl From<(f64, f64)> for Knot {
    fn from((soc, voltage): (f64, f64)) -> Self {
        Knot { soc, voltage }
    }
}

/// Monotone SoC → OCV table for one ambient temperature.
///
/// Invariants (checked by [`OcvCurve::new`]): at least three knots, SoC
/// strictly increasing from exactly 0 to exactly 1, voltage strictly
/// increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct OcvCurve {
    temperature_c: f64,
    knots: Vec<Knot>,
}

impl OcvCurve {
    pub fn new<K: Into<Knot>>(temperature_c: f64, knots: impl IntoIterator<Item = K>) -> Result<Self> {
        let knots: Vec<Knot> = knots.into_iter().map(Into::into).collect();
        validate(&knots)?;
        Ok(OcvCurve { temperature_c, knots })
    }

    pub fn temperature_c(&self) -> f64 {
        self.temperature_c
    }

    pub fn knots(&self) -> &[Knot] {
        &self.knots
    }

    pub fn min_voltage(&self) -> f64 {
        self.knots[0].voltage
    }

    pub fn max_voltage(&self) -> f64 {
        self.knots[self.knots.len() - 1].voltage
    }

    /// Largest segment slope, the Lipschitz constant of [`voltage_at`](Self::voltage_at).
    pub fn max_slope(&self) -> f64 {
        self.knots
            .windows(2)
            .map(|w| segment_slope(w[0], w[1]))
            .fold(0.0, f64::max)
    }

    /// Interpolated open-circuit voltage. SoC outside `[0, 1]` is clamped.
    pub fn voltage_at(&self, soc: f64) -> f64 {
        let s = soc.clamp(0.0, 1.0);
        let i = self.segment_index(s);
        let (a, b) = (self.knots[i], self.knots[i + 1]);
        let w = (s - a.soc) / (b.soc - a.soc);
        a.voltage + w * (b.voltage - a.voltage)
    }

    /// dV_oc/dSoC of the interpolant.
    ///
    /// Inside a segment this is the segment slope. At an interior knot it is
    /// the central difference of the interpolant with step
    /// `min(1e-4, half the narrower adjacent segment)`, i.e. the mean of the
    /// two adjacent slopes. At the end knots, and beyond them, the one-sided
    /// end-segment slope is returned so the result never vanishes.
    pub fn slope_at(&self, soc: f64) -> f64 {
        let n = self.knots.len();
        if soc <= 0.0 {
            return segment_slope(self.knots[0], self.knots[1]);
        }
        if soc >= 1.0 {
            return segment_slope(self.knots[n - 2], self.knots[n - 1]);
        }
        match self.knots.binary_search_by(|k| k.soc.total_cmp(&soc)) {
            Ok(j) => {
                let left = self.knots[j].soc - self.knots[j - 1].soc;
                let right = self.knots[j + 1].soc - self.knots[j].soc;
                let h = MAX_FD_STEP.min(0.5 * left.min(right));
                (self.voltage_at(soc + h) - self.voltage_at(soc - h)) / (2.0 * h)
            }
            Err(i) => segment_slope(self.knots[i - 1], self.knots[i]),
        }
    }

    /// Index of the segment `[knots[i], knots[i+1]]` containing `soc` (already clamped).
    fn segment_index(&self, soc: f64) -> usize {
        let upper = self.knots.partition_point(|k| k.soc <= soc);
        upper.clamp(1, self.knots.len() - 1) - 1
    }

    /// Parses the CSV layout described in the module docs.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut temperature_c = DEFAULT_TEMPERATURE_C;
        for (i, line) in text.lines().enumerate() {
            let Some(comment) = line.trim().strip_prefix('#') else {
                continue;
            };
            if let Some(value) = comment.trim().strip_prefix("temperature_c=") {
                temperature_c = value.trim().parse().map_err(|_| Error::Parse {
                    line: i + 1,
                    message: format!("bad temperature {value:?}"),
                })?;
            }
        }

        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        if headers.iter().ne(HEADER) {
            return Err(Error::Parse {
                line: headers.position().map_or(1, |p| p.line() as usize),
                message: format!("expected header `soc,voltage_v`, found `{}`", headers.as_slice()),
            });
        }

        let mut knots = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            let field = |idx: usize| -> Result<f64> {
                let raw = record.get(idx).unwrap_or("");
                raw.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("column {} is not a number: {raw:?}", HEADER[idx]),
                })
            };
            knots.push(Knot {
                soc: field(0)?,
                voltage: field(1)?,
            });
        }
        OcvCurve::new(temperature_c, knots)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# temperature_c={}", self.temperature_c);
        let _ = writeln!(out, "soc,voltage_v");
        for k in &self.knots {
            let _ = writeln!(out, "{},{}", k.soc, k.voltage);
        }
        out
    }

    /// Surrogate LiFePO4 table at 20 °C: a sharp knee below 5 % SoC, a flat
    /// plateau around 3.3 V, and a mild rise toward full charge.
    pub fn lfp_20c() -> Self {
        OcvCurve::new(20.0, LFP_20C.iter().copied()).expect("builtin 20 °C curve is valid")
    }

    /// Surrogate LiFePO4 table at 40 °C. Identical to [`lfp_20c`](Self::lfp_20c)
    /// above 35 % SoC; the low-SoC knee sits higher.
    pub fn lfp_40c() -> Self {
        OcvCurve::new(40.0, LFP_40C.iter().copied()).expect("builtin 40 °C curve is valid")
    }
}

pub fn load_ocv_csv(path: impl AsRef<Path>) -> Result<OcvCurve> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    OcvCurve::from_csv_str(&text)
}

pub fn save_ocv_csv(curve: &OcvCurve, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, curve.to_csv_string()).map_err(|e| Error::file(path, e))
}

fn segment_slope(a: Knot, b: Knot) -> f64 {
    (b.voltage - a.voltage) / (b.soc - a.soc)
}

fn validate(knots: &[Knot]) -> Result<()> {
    for (index, k) in knots.iter().enumerate() {
        if !k.soc.is_finite() || !k.voltage.is_finite() {
            return Err(Error::Validation {
                index,
                message: "non-finite value".into(),
            });
        }
        if !(0.0..=1.0).contains(&k.soc) {
            return Err(Error::Range {
                what: "soc",
                value: k.soc,
                lo: 0.0,
                hi: 1.0,
            });
        }
        if index > 0 {
            let prev = knots[index - 1];
            if k.soc <= prev.soc {
                return Err(Error::Validation {
                    index,
                    message: format!("soc {} does not increase past {}", k.soc, prev.soc),
                });
            }
            if k.voltage <= prev.voltage {
                return Err(Error::Validation {
                    index,
                    message: format!("voltage {} does not increase past {}", k.voltage, prev.voltage),
                });
            }
        }
    }
    if knots.len() < 3 {
        return Err(Error::Validation {
            index: knots.len().saturating_sub(1),
            message: format!("need at least 3 knots, got {}", knots.len()),
        });
    }
    if knots[0].soc != 0.0 {
        return Err(Error::Validation {
            index: 0,
            message: "first knot must sit at soc 0".into(),
        });
    }
    let last = knots.len() - 1;
    if knots[last].soc != 1.0 {
        return Err(Error::Validation {
            index: last,
            message: "last knot must sit at soc 1".into(),
        });
    }
    Ok(())
}

const LFP_20C: [(f64, f64); 21] = [
    (0.00, 2.600),
    (0.05, 3.115),
    (0.10, 3.160),
    (0.15, 3.205),
    (0.20, 3.235),
    (0.25, 3.256),
    (0.30, 3.271),
    (0.35, 3.282),
    (0.40, 3.291),
    (0.45, 3.298),
    (0.50, 3.304),
    (0.55, 3.310),
    (0.60, 3.316),
    (0.65, 3.323),
    (0.70, 3.331),
    (0.75, 3.340),
    (0.80, 3.350),
    (0.85, 3.362),
    (0.90, 3.378),
    (0.95, 3.398),
    (1.00, 3.423),
];

const LFP_40C: [(f64, f64); 21] = [
    (0.00, 2.900),
    (0.05, 3.175),
    (0.10, 3.215),
    (0.15, 3.240),
    (0.20, 3.258),
    (0.25, 3.266),
    (0.30, 3.276),
    (0.35, 3.282),
    (0.40, 3.291),
    (0.45, 3.298),
    (0.50, 3.304),
    (0.55, 3.310),
    (0.60, 3.316),
    (0.65, 3.323),
    (0.70, 3.331),
    (0.75, 3.340),
    (0.80, 3.350),
    (0.85, 3.362),
    (0.90, 3.378),
    (0.95, 3.398),
    (1.00, 3.423),
];

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn three_knot() -> OcvCurve {
        OcvCurve::new(20.0, [(0.0, 2.0), (0.5, 3.3), (1.0, 3.6)]).unwrap()
    }

    #[test]
    fn loads_minimal_table_with_default_temperature() {
        let c = OcvCurve::from_csv_str("soc,voltage_v\n0.0,2.0\n0.5,3.3\n1.0,3.6\n").unwrap();
        assert_eq!(c.knots().len(), 3);
        assert_eq!(c.temperature_c(), 20.0);
        assert_eq!(c.knots()[1], Knot { soc: 0.5, voltage: 3.3 });
    }

    #[test]
    fn reads_temperature_metadata() {
        let c = OcvCurve::from_csv_str("# temperature_c=40.5\nsoc,voltage_v\n0,2\n0.5,3.3\n1,3.6\n").unwrap();
        assert_eq!(c.temperature_c(), 40.5);
    }

    #[test]
    fn out_of_order_knot_is_named() {
        let err = OcvCurve::from_csv_str("soc,voltage_v\n0.0,2.0\n0.5,3.3\n0.4,3.4\n").unwrap_err();
        assert!(matches!(err, Error::Validation { index: 2, .. }), "{err}");
    }

    #[test]
    fn non_monotone_voltage_rejected() {
        let err = OcvCurve::new(20.0, [(0.0, 2.0), (0.5, 3.3), (0.7, 3.3), (1.0, 3.6)]).unwrap_err();
        assert!(matches!(err, Error::Validation { index: 2, .. }));
    }

    #[test]
    fn soc_out_of_range_rejected() {
        let err = OcvCurve::from_csv_str("soc,voltage_v\n0,2\n0.5,3.3\n1.2,3.6\n").unwrap_err();
        assert!(matches!(err, Error::Range { what: "soc", .. }));
    }

    #[test]
    fn malformed_row_reports_line() {
        let err = OcvCurve::from_csv_str("soc,voltage_v\n0,2\n0.5,abc\n1,3.6\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn too_few_knots() {
        assert!(OcvCurve::new(20.0, [(0.0, 2.0), (1.0, 3.6)]).is_err());
    }

    #[test]
    fn interpolation_and_clamping() {
        let c = three_knot();
        assert_abs_diff_eq!(c.voltage_at(0.25), 2.65, epsilon = 1e-12);
        assert_eq!(c.voltage_at(0.5), 3.3);
        assert_eq!(c.voltage_at(1.2), 3.6);
        assert_eq!(c.voltage_at(-0.3), 2.0);
    }

    #[test]
    fn slopes_on_segments_and_knots() {
        let c = three_knot();
        assert_abs_diff_eq!(c.slope_at(0.25), 2.6, epsilon = 1e-12);
        assert_abs_diff_eq!(c.slope_at(0.75), 0.6, epsilon = 1e-12);
        // Central difference across the knot equals the mean of adjacent slopes.
        assert_abs_diff_eq!(c.slope_at(0.5), (2.6 + 0.6) / 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(c.slope_at(0.0), 2.6, epsilon = 1e-12);
        assert_abs_diff_eq!(c.slope_at(1.0), 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(c.slope_at(1.3), 0.6, epsilon = 1e-12);
    }

    #[test]
    fn builtin_curves_have_lfp_shape() {
        for c in [OcvCurve::lfp_20c(), OcvCurve::lfp_40c()] {
            assert_eq!(c.knots().len(), 21);
            let flat = c.slope_at(0.5);
            assert!(flat < 0.2, "plateau slope {flat}");
            assert!(c.slope_at(0.02) > 10.0 * flat);
            assert!(c.slope_at(0.97) > 3.0 * flat);
            assert!((c.voltage_at(0.5) - 3.3).abs() < 0.01);
            // Above 5 % the default observer (k3 = 2, dt = 1 s) stays inside
            // the explicit-Euler stability bound k3 * slope * dt < 2.
            let upper = c.knots().windows(2).filter(|w| w[0].soc >= 0.05);
            assert!(upper.map(|w| segment_slope(w[0], w[1])).all(|s| 2.0 * s < 2.0));
        }
    }

    #[test]
    fn temperature_curves_differ_only_at_low_soc() {
        let (c20, c40) = (OcvCurve::lfp_20c(), OcvCurve::lfp_40c());
        for i in 0..=1000 {
            let s = f64::from(i) / 1000.0;
            let d = c40.voltage_at(s) - c20.voltage_at(s);
            if s >= 0.35 {
                assert_eq!(d, 0.0);
            } else if s <= 0.2 {
                assert!(d > 0.0);
            }
        }
    }

    fn arb_curve() -> impl Strategy<Value = OcvCurve> {
        (prop::collection::vec((0.01f64..1.0, 0.001f64..0.5), 1..12), 1.5f64..3.0).prop_map(|(steps, v0)| {
            let total: f64 = steps.iter().map(|s| s.0).sum::<f64>() + 0.01;
            let mut soc = 0.0;
            let mut v = v0;
            let mut knots = vec![(0.0, v0)];
            for (w, dv) in &steps {
                soc += w / total;
                v += dv;
                knots.push((soc, v));
            }
            knots.push((1.0, v + 0.01));
            OcvCurve::new(25.0, knots).unwrap()
        })
    }

    proptest! {
        #[test]
        fn voltage_bounded_and_slope_positive(c in arb_curve(), s in 0.0f64..=1.0) {
            let v = c.voltage_at(s);
            prop_assert!(v >= c.min_voltage() && v <= c.max_voltage());
            prop_assert!(c.slope_at(s) > 0.0);
        }

        #[test]
        fn voltage_is_lipschitz(c in arb_curve(), s in 0.0f64..0.99, eps in 1e-9f64..1e-2) {
            let d = (c.voltage_at(s + eps) - c.voltage_at(s)).abs();
            prop_assert!(d <= c.max_slope() * eps * (1.0 + 1e-9) + 1e-12);
        }

        #[test]
        fn csv_round_trip_is_bit_exact(c in arb_curve()) {
            let back = OcvCurve::from_csv_str(&c.to_csv_string()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
