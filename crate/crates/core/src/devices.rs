//! Curtailable PV and battery models.
//!
//! Every function here is unit-agnostic as long as power, inverter rating,
//! power limits and capacity (power-unit hours) share one power unit. The
//! public examples use watts; the controller calls the same code with
//! per-unit quantities obtained through [`DerDevice::scaled`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PV_COST_P: f64 = 0.2;
pub const PV_COST_Q: f64 = 0.002;
pub const BATTERY_COST_WEIGHT: f64 = 0.01;
pub const DEFAULT_SOC_PREF: f64 = 60.0;
pub const DEFAULT_SOC_MIN: f64 = 10.0;
pub const DEFAULT_SOC_MAX: f64 = 90.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PvParams {
    /// Inverter apparent-power rating.
    pub inv_rating: f64,
    /// Available active power at the current time.
    pub p_avail: f64,
}

impl PvParams {
    pub fn cost_p(&self) -> f64 {
        PV_COST_P / self.inv_rating
    }

    pub fn cost_q(&self) -> f64 {
        PV_COST_Q / self.inv_rating
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.inv_rating > 0.0 && self.inv_rating.is_finite()) {
            return Err(Error::Parameter(format!("inverter rating must be > 0, got {}", self.inv_rating)));
        }
        if !(self.p_avail >= 0.0 && self.p_avail.is_finite()) {
            return Err(Error::Parameter(format!("available PV power must be >= 0, got {}", self.p_avail)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryParams {
    /// Energy capacity in power-unit hours (Wh when powers are in W).
    pub capacity: f64,
    /// Maximum discharge (positive injection).
    pub p_discharge_max: f64,
    /// Maximum charge, given as a positive number.
    pub p_charge_max: f64,
    pub soc_pref: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub cost_weight: f64,
    /// Hours between control decisions.
    pub dt_hours: f64,
}

impl BatteryParams {
    pub fn new(capacity: f64, p_discharge_max: f64, p_charge_max: f64, dt_hours: f64) -> Self {
        Self {
            capacity,
            p_discharge_max,
            p_charge_max,
            soc_pref: DEFAULT_SOC_PREF,
            soc_min: DEFAULT_SOC_MIN,
            soc_max: DEFAULT_SOC_MAX,
            cost_weight: BATTERY_COST_WEIGHT,
            dt_hours,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.capacity > 0.0
            && self.capacity.is_finite()
            && self.p_discharge_max >= 0.0
            && self.p_discharge_max.is_finite()
            && self.p_charge_max >= 0.0
            && self.p_charge_max.is_finite()
            && self.dt_hours > 0.0
            && (0.0..=100.0).contains(&self.soc_min)
            && (0.0..=100.0).contains(&self.soc_max)
            && self.soc_min <= self.soc_max
            && (0.0..=100.0).contains(&self.soc_pref)
            && self.cost_weight >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid battery parameters: {self:?}")))
        }
    }

    /// Active-power limits `(P_min, P_max)` given the present SOC.
    pub fn power_limits(&self, soc: f64) -> (f64, f64) {
        let per_percent = self.capacity / 100.0 / self.dt_hours;
        let p_max = self.p_discharge_max.min((soc - self.soc_min).max(0.0) * per_percent);
        let p_min = -self.p_charge_max.min((self.soc_max - soc).max(0.0) * per_percent);
        (p_min, p_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DerDevice {
    Pv(PvParams),
    Battery(BatteryParams),
}

/// Present set point of one DER.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceState {
    pub p: f64,
    pub q: f64,
    /// Percent; unused for PV.
    pub soc: f64,
}

impl DeviceState {
    pub fn new(p: f64, q: f64) -> Self {
        Self { p, q, soc: 0.0 }
    }

    pub fn with_soc(p: f64, soc: f64) -> Self {
        Self { p, q: 0.0, soc }
    }
}

impl DerDevice {
    pub fn validate(&self) -> Result<()> {
        match self {
            DerDevice::Pv(p) => p.validate(),
            DerDevice::Battery(b) => b.validate(),
        }
    }

    /// Whether the device has a reactive-power degree of freedom.
    pub fn has_q(&self) -> bool {
        matches!(self, DerDevice::Pv(_))
    }

    /// Same device with every power quantity multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        match self {
            DerDevice::Pv(p) => DerDevice::Pv(PvParams { inv_rating: p.inv_rating * factor, p_avail: p.p_avail * factor }),
            DerDevice::Battery(b) => DerDevice::Battery(BatteryParams {
                capacity: b.capacity * factor,
                p_discharge_max: b.p_discharge_max * factor,
                p_charge_max: b.p_charge_max * factor,
                ..b.clone()
            }),
        }
    }

    pub fn cost(&self, state: &DeviceState) -> f64 {
        match self {
            DerDevice::Pv(pv) => pv.cost_p() * (state.p - pv.p_avail).powi(2) + pv.cost_q() * state.q * state.q,
            DerDevice::Battery(b) => b.cost_weight * battery_soc_gap(b, state).powi(2),
        }
    }

    /// Cost gradient `(dF/dP, dF/dQ)`.
    pub fn cost_gradient(&self, state: &DeviceState) -> (f64, f64) {
        match self {
            DerDevice::Pv(pv) => (2.0 * pv.cost_p() * (state.p - pv.p_avail), 2.0 * pv.cost_q() * state.q),
            DerDevice::Battery(b) => {
                let dgap_dp = -b.dt_hours / b.capacity;
                (2.0 * b.cost_weight * battery_soc_gap(b, state) * dgap_dp, 0.0)
            }
        }
    }

    /// Projection onto the device's present feasible set.
    pub fn project(&self, p: f64, q: f64, state: &DeviceState) -> Result<(f64, f64)> {
        match self {
            DerDevice::Pv(pv) => project_pv(p, q, pv),
            DerDevice::Battery(b) => Ok((project_battery(p, b, state), 0.0)),
        }
    }

    pub fn is_feasible(&self, p: f64, q: f64, state: &DeviceState, tol: f64) -> bool {
        match self {
            DerDevice::Pv(pv) => {
                p >= -tol && p <= pv.p_avail + tol && (p * p + q * q).sqrt() <= pv.inv_rating * (1.0 + tol)
            }
            DerDevice::Battery(b) => {
                let (lo, hi) = b.power_limits(state.soc);
                q == 0.0 && p >= lo - tol && p <= hi + tol
            }
        }
    }
}

/// `SOC/100 - P dt / CAP - SOC_pref/100`: the SOC fraction after one
/// interval at `P`, relative to the preferred level.
fn battery_soc_gap(b: &BatteryParams, state: &DeviceState) -> f64 {
    state.soc / 100.0 - state.p * b.dt_hours / b.capacity - b.soc_pref / 100.0
}

/// Euclidean projection onto `{0 <= P <= P_av} ∩ {P² + Q² <= INV²}`.
///
/// Candidates: the box clamp, the radial projection onto the disk, and the two
/// corners where the disk meets `P = P_av` or `P = 0`. The nearest feasible
/// candidate is the projection.
pub fn project_pv(p: f64, q: f64, params: &PvParams) -> Result<(f64, f64)> {
    params.validate()?;
    let inv = params.inv_rating;
    let p_hi = params.p_avail;
    let pc = p.clamp(0.0, p_hi);
    if pc * pc + q * q <= inv * inv {
        return Ok((pc, q));
    }
    let feasible = |a: f64, b: f64| {
        let slack = 1e-12 * inv;
        a >= -slack && a <= p_hi + slack && a.hypot(b) <= inv + slack
    };
    let mut best: Option<(f64, f64, f64)> = None;
    let mut consider = |a: f64, b: f64| {
        if feasible(a, b) {
            let d = (a - p).powi(2) + (b - q).powi(2);
            if best.is_none_or(|(_, _, bd)| d < bd) {
                best = Some((a, b, d));
            }
        }
    };
    let r = p.hypot(q);
    if r > 0.0 {
        consider(p * inv / r, q * inv / r);
    }
    let sign = if q >= 0.0 { 1.0 } else { -1.0 };
    let p_corner = p_hi.min(inv);
    consider(p_corner, sign * (inv * inv - p_corner * p_corner).max(0.0).sqrt());
    consider(0.0, sign * inv);
    let (a, b, _) = best.expect("the corner on P = 0 is always feasible");
    Ok((a, b))
}

/// Clamp `P` to the SOC-dependent limits. Batteries carry no reactive power.
pub fn project_battery(p: f64, params: &BatteryParams, state: &DeviceState) -> f64 {
    let (lo, hi) = params.power_limits(state.soc);
    p.clamp(lo, hi)
}

/// SOC after holding `p_implemented` for one interval; discharge lowers SOC.
pub fn step_soc(state: &DeviceState, params: &BatteryParams, p_implemented: f64) -> f64 {
    let soc = state.soc - 100.0 * p_implemented * params.dt_hours / params.capacity;
    soc.clamp(params.soc_min, params.soc_max)
}
