//! Grid services: measurement sets, bound schedules, dual state and
//! violation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::MeasurementId;

pub const VOLTAGE_LOWER: f64 = 0.95;
pub const VOLTAGE_UPPER: f64 = 1.03;
pub const VPP_BAND_W: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceKind {
    Voltage,
    Vpp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BoundValue {
    Range { lower: f64, upper: f64 },
    SetPoint { set_point: f64, band: f64 },
}

impl BoundValue {
    pub fn interval(&self) -> (f64, f64) {
        match *self {
            BoundValue::Range { lower, upper } => (lower, upper),
            BoundValue::SetPoint { set_point, band } => (set_point - band, set_point + band),
        }
    }
}

/// One step of a piecewise-constant bound schedule. Without `measurement`
/// the step applies to every measurement of the service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEntry {
    pub time_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measurement: Option<MeasurementId>,
    #[serde(flatten)]
    pub value: BoundValue,
}

impl BoundEntry {
    pub fn range(time_s: f64, lower: f64, upper: f64) -> Self {
        Self { time_s, measurement: None, value: BoundValue::Range { lower, upper } }
    }

    pub fn set_point(time_s: f64, measurement: Option<MeasurementId>, set_point: f64, band: f64) -> Self {
        Self { time_s, measurement, value: BoundValue::SetPoint { set_point, band } }
    }
}

/// Bounds are in measurement units: per-unit volts, or watts for VPP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridService {
    pub id: String,
    pub kind: ServiceKind,
    pub measurements: Vec<MeasurementId>,
    pub bounds: Vec<BoundEntry>,
    /// Initial dual step size, per-unit.
    pub beta0: f64,
    /// Falls back to the per-kind default of the algorithm parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_down: Option<f64>,
    /// Internal unit of a VPP measurement, watts. Defaults to the base power.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_w: Option<f64>,
    /// Set from the owning scenario.
    #[serde(skip, default = "default_horizon")]
    pub horizon_s: f64,
}

fn default_horizon() -> f64 {
    f64::INFINITY
}

impl GridService {
    pub fn voltage(id: &str, measurements: Vec<MeasurementId>, beta0: f64, gamma_down: Option<f64>) -> Self {
        Self {
            id: id.into(),
            kind: ServiceKind::Voltage,
            measurements,
            bounds: vec![BoundEntry::range(0.0, VOLTAGE_LOWER, VOLTAGE_UPPER)],
            beta0,
            gamma_down,
            unit_w: None,
            horizon_s: f64::INFINITY,
        }
    }

    /// Measurement units per per-unit value.
    pub fn unit_scale(&self, base_power_w: f64) -> f64 {
        match self.kind {
            ServiceKind::Voltage => 1.0,
            ServiceKind::Vpp => self.unit_w.unwrap_or(base_power_w),
        }
    }

    /// Factor from base-power sensitivities to this service's internal unit.
    pub fn sensitivity_scale(&self, base_power_w: f64) -> f64 {
        match self.kind {
            ServiceKind::Voltage => 1.0,
            ServiceKind::Vpp => base_power_w / self.unit_scale(base_power_w),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(format!("service {}: {m}", self.id)));
        if self.measurements.is_empty() {
            return bad("no measurements".into());
        }
        for m in &self.measurements {
            let ok = matches!(
                (self.kind, m),
                (ServiceKind::Voltage, MeasurementId::Voltage(_)) | (ServiceKind::Vpp, MeasurementId::Power(_))
            );
            if !ok {
                return bad(format!("measurement {m} does not fit a {:?} service", self.kind));
            }
        }
        if !(self.beta0 > 0.0 && self.beta0.is_finite()) {
            return bad(format!("beta0 must be > 0, got {}", self.beta0));
        }
        if let Some(u) = self.unit_w {
            if self.kind != ServiceKind::Vpp || !(u > 0.0 && u.is_finite()) {
                return bad(format!("unit_w must be > 0 and set on VPP services only, got {u}"));
            }
        }
        if let Some(g) = self.gamma_down {
            if !(g > 0.0 && g < 1.0) {
                return bad(format!("gamma_down must lie in (0, 1), got {g}"));
            }
        }
        for e in &self.bounds {
            if let Some(m) = &e.measurement {
                if !self.measurements.contains(m) {
                    return bad(format!("bound entry names unknown measurement {m}"));
                }
            }
            if let BoundValue::SetPoint { band, .. } = e.value {
                if band < 0.0 {
                    return bad("negative band".into());
                }
            }
            let (lo, hi) = e.value.interval();
            if !(lo <= hi) {
                return bad(format!("lower bound {lo} exceeds upper bound {hi} at t = {}", e.time_s));
            }
        }
        if self.bounds.windows(2).any(|w| w[1].time_s < w[0].time_s) {
            return bad("bound schedule is not time-ordered".into());
        }
        // every measurement must be bounded from t = 0
        self.bounds_at(0.0).map(|_| ())
    }

    /// Per-measurement `(lower, upper)` in force at `t`.
    pub fn bounds_at(&self, t: f64) -> Result<Vec<(f64, f64)>> {
        if !(t >= 0.0 && t <= self.horizon_s) {
            return Err(Error::OutOfHorizon { t, horizon: self.horizon_s });
        }
        self.measurements
            .iter()
            .map(|m| {
                self.bounds
                    .iter()
                    .filter(|e| e.time_s <= t && e.measurement.is_none_or(|x| x == *m))
                    .last()
                    .map(|e| e.value.interval())
                    .ok_or_else(|| Error::Config(format!("service {}: no bound for {m} at t = {t}", self.id)))
            })
            .collect()
    }

    /// Times at which any bound changes, excluding t = 0.
    pub fn change_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.bounds.iter().map(|e| e.time_s).filter(|&t| t > 0.0).collect();
        t.dedup();
        t
    }
}

/// Lower/upper constraint duals for one service.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DualState {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Duals one step earlier, once a step has been committed.
    pub previous: Option<(Vec<f64>, Vec<f64>)>,
}

impl DualState {
    pub fn zeros(n: usize) -> Self {
        Self { lower: vec![0.0; n], upper: vec![0.0; n], previous: None }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.lower.iter().chain(&self.upper).all(|&d| d >= 0.0)
    }
}

/// Time series of one service's measurements with the bounds in force.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceSeries<'a> {
    pub times: &'a [f64],
    pub values: &'a [Vec<f64>],
    pub bounds: &'a [Vec<(f64, f64)>],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ViolationMetrics {
    /// Largest bound exceedance over time and measurements.
    pub max_violation: f64,
    /// Sum over measurements of the time integral of exceedance
    /// (left rectangles).
    pub integral_violation: f64,
    /// Number of bound crossings, counted per measurement.
    pub oscillation_count: u64,
}

fn exceedance(g: f64, (lo, hi): (f64, f64)) -> f64 {
    (lo - g).max(g - hi).max(0.0)
}

/// -1 below, 0 inside, +1 above.
fn band_side(g: f64, (lo, hi): (f64, f64)) -> i8 {
    if g > hi {
        1
    } else if g < lo {
        -1
    } else {
        0
    }
}

pub fn violation_metrics(series: &ServiceSeries<'_>) -> ViolationMetrics {
    let n = series.times.len();
    let mut m = ViolationMetrics::default();
    if n == 0 {
        return m;
    }
    let width = series.values[0].len();
    for k in 0..n {
        for j in 0..width {
            let e = exceedance(series.values[k][j], series.bounds[k][j]);
            m.max_violation = m.max_violation.max(e);
            if k + 1 < n {
                m.integral_violation += e * (series.times[k + 1] - series.times[k]);
            }
            if k > 0 {
                let a = band_side(series.values[k - 1][j], series.bounds[k - 1][j]);
                let b = band_side(series.values[k][j], series.bounds[k][j]);
                m.oscillation_count += (a - b).unsigned_abs() as u64;
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::BusId;

    fn vpp() -> GridService {
        GridService {
            id: "vpp".into(),
            kind: ServiceKind::Vpp,
            measurements: vec![MeasurementId::Power(BusId(0))],
            bounds: vec![
                BoundEntry::set_point(0.0, None, 1.02e6, VPP_BAND_W),
                BoundEntry::set_point(1800.0, None, 1.28e6, VPP_BAND_W),
            ],
            beta0: 1.0,
            gamma_down: Some(0.5),
            unit_w: None,
            horizon_s: 3600.0,
        }
    }

    #[test]
    fn voltage_bounds_are_constant() {
        let s = GridService::voltage("v", vec![MeasurementId::Voltage(BusId(1))], 100.0, None);
        assert_eq!(s.bounds_at(0.0).unwrap(), vec![(0.95, 1.03)]);
        assert_eq!(s.bounds_at(12345.0).unwrap(), vec![(0.95, 1.03)]);
    }

    #[test]
    fn vpp_band_and_step() {
        let s = vpp();
        s.validate().unwrap();
        let b = s.bounds_at(0.0).unwrap()[0];
        assert!((b.0 - 1.01e6).abs() < 1e-6 && (b.1 - 1.03e6).abs() < 1e-6);
        assert_eq!(s.bounds_at(1799.999).unwrap()[0], (1.01e6, 1.03e6));
        assert_eq!(s.bounds_at(1800.0).unwrap()[0], (1.27e6, 1.29e6));
        assert!(matches!(s.bounds_at(3600.5), Err(Error::OutOfHorizon { .. })));
        assert!(matches!(s.bounds_at(-1.0), Err(Error::OutOfHorizon { .. })));
    }

    #[test]
    fn per_measurement_steps_override_shared_ones() {
        let mut s = vpp();
        s.measurements.push(MeasurementId::Power(BusId(5)));
        s.bounds.push(BoundEntry::set_point(2000.0, Some(MeasurementId::Power(BusId(5))), 0.5e6, 1e4));
        let b = s.bounds_at(2500.0).unwrap();
        assert_eq!(b[0], (1.27e6, 1.29e6));
        assert_eq!(b[1], (0.49e6, 0.51e6));
    }

    #[test]
    fn validation_catches_bad_fields() {
        let mut s = vpp();
        s.gamma_down = Some(1.0);
        assert!(s.validate().is_err());
        let mut s = vpp();
        s.bounds = vec![BoundEntry::range(0.0, 2.0, 1.0)];
        assert!(s.validate().is_err());
        let mut s = vpp();
        s.measurements = vec![MeasurementId::Voltage(BusId(1))];
        assert!(s.validate().is_err());
    }

    #[test]
    fn bound_entries_round_trip_through_toml() {
        #[derive(Serialize, Deserialize)]
        struct Wrap {
            bounds: Vec<BoundEntry>,
        }
        let w = Wrap { bounds: vpp().bounds };
        let text = toml::to_string(&w).unwrap();
        let back: Wrap = toml::from_str(&text).unwrap();
        assert_eq!(back.bounds, w.bounds);
        let parsed: Wrap = toml::from_str("[[bounds]]\ntime_s = 0.0\nlower = 0.9\nupper = 1.1\n").unwrap();
        assert_eq!(parsed.bounds[0].value.interval(), (0.9, 1.1));
    }

    fn metrics_of(values: &[f64], bound: (f64, f64), dt: f64) -> ViolationMetrics {
        let times: Vec<f64> = (0..values.len()).map(|k| k as f64 * dt).collect();
        let vals: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
        let bounds = vec![vec![bound]; values.len()];
        violation_metrics(&ServiceSeries { times: &times, values: &vals, bounds: &bounds })
    }

    #[test]
    fn metrics_inside_bounds_are_zero() {
        let m = metrics_of(&[1.0, 1.01, 0.99, 1.0], (0.95, 1.03), 2.0);
        assert_eq!(m, ViolationMetrics::default());
    }

    #[test]
    fn metrics_constant_exceedance_rectangle() {
        let m = metrics_of(&[1.04; 11], (0.95, 1.03), 1.0);
        assert!((m.max_violation - 0.01).abs() < 1e-12);
        assert!((m.integral_violation - 0.1).abs() < 1e-12);
        assert_eq!(m.oscillation_count, 0);
    }

    #[test]
    fn metrics_sawtooth_counts_crossings() {
        // inside, out, in, out, in: the upper bound is crossed four times
        let m = metrics_of(&[1.0, 1.05, 1.0, 1.05, 1.0], (0.95, 1.03), 1.0);
        assert_eq!(m.oscillation_count, 4);
        assert!((m.max_violation - 0.02).abs() < 1e-12);
        // a jump straight from below to above crosses both bounds
        let m = metrics_of(&[0.9, 1.1], (0.95, 1.03), 1.0);
        assert_eq!(m.oscillation_count, 2);
    }
}
