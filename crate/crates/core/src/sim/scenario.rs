use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::control::AlgorithmParams;
use crate::devices::{BatteryParams, DerDevice, PvParams, DEFAULT_SOC_MAX, DEFAULT_SOC_MIN, DEFAULT_SOC_PREF, BATTERY_COST_WEIGHT};
use crate::error::{Error, Result};
use crate::network::{BusId, MeasurementId, NetworkConfig};
use crate::profiles::{Profile, ProfileSpec};
use crate::services::{GridService, ServiceKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Adaptive,
    Manual,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Adaptive => "adaptive",
            Mode::Manual => "manual",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Mode::Adaptive),
            "manual" => Ok(Mode::Manual),
            _ => Err(Error::Config(format!("unknown mode {s:?}, expected adaptive or manual"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DeviceKind {
    Pv {
        inv_rating_w: f64,
        /// Profile giving available power as a fraction of the rating.
        /// Absent means full rating.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        availability: Option<String>,
    },
    Battery {
        capacity_wh: f64,
        p_discharge_max_w: f64,
        p_charge_max_w: f64,
        #[serde(default = "default_soc")]
        initial_soc: f64,
        #[serde(default = "default_soc")]
        soc_pref: f64,
        #[serde(default = "default_soc_min")]
        soc_min: f64,
        #[serde(default = "default_soc_max")]
        soc_max: f64,
        #[serde(default = "default_cost_weight")]
        cost_weight: f64,
    },
}

fn default_soc() -> f64 {
    DEFAULT_SOC_PREF
}
fn default_soc_min() -> f64 {
    DEFAULT_SOC_MIN
}
fn default_soc_max() -> f64 {
    DEFAULT_SOC_MAX
}
fn default_cost_weight() -> f64 {
    BATTERY_COST_WEIGHT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub id: String,
    pub bus: BusId,
    #[serde(flatten)]
    pub kind: DeviceKind,
    /// Initial primal step size, per-unit.
    pub alpha0: f64,
    /// Falls back to `params.gamma_down_der`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_down: Option<f64>,
    /// Devices naming the same controller share one local controller and
    /// one step size. Unnamed devices get a controller of their own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<String>,
}

impl DeviceSpec {
    /// The device in SI units with the given availability fraction.
    pub fn device(&self, availability: f64, tick_s: f64) -> DerDevice {
        match &self.kind {
            DeviceKind::Pv { inv_rating_w, .. } => {
                DerDevice::Pv(PvParams { inv_rating: *inv_rating_w, p_avail: inv_rating_w * availability.clamp(0.0, 1.0) })
            }
            DeviceKind::Battery { capacity_wh, p_discharge_max_w, p_charge_max_w, soc_pref, soc_min, soc_max, cost_weight, .. } => {
                DerDevice::Battery(BatteryParams {
                    capacity: *capacity_wh,
                    p_discharge_max: *p_discharge_max_w,
                    p_charge_max: *p_charge_max_w,
                    soc_pref: *soc_pref,
                    soc_min: *soc_min,
                    soc_max: *soc_max,
                    cost_weight: *cost_weight,
                    dt_hours: tick_s / 3600.0,
                })
            }
        }
    }

    pub fn initial_soc(&self) -> f64 {
        match self.kind {
            DeviceKind::Battery { initial_soc, .. } => initial_soc,
            DeviceKind::Pv { .. } => 0.0,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self.kind {
            DeviceKind::Pv { .. } => "pv",
            DeviceKind::Battery { .. } => "battery",
        }
    }
}

/// A complete simulation setup. Tap changes live in the network's tap
/// schedule and set-point steps in the service bound schedules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub horizon_s: f64,
    #[serde(default = "default_tick")]
    pub tick_s: f64,
    /// Hour of day at t = 0, used by synthetic profiles.
    #[serde(default = "default_start_hour")]
    pub start_hour: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    /// Common frozen step size used in manual mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manual_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkConfig>,
    /// Multiplier applied to every nominal bus load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load_profile: Option<String>,
    #[serde(default)]
    pub profiles: BTreeMap<String, ProfileSpec>,
    pub devices: Vec<DeviceSpec>,
    pub services: Vec<GridService>,
    #[serde(default)]
    pub params: AlgorithmParams,
    #[serde(default)]
    pub rebuild_sensitivities_on_tap: bool,
    /// Directory for relative paths; set when loaded from a file.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn default_tick() -> f64 {
    2.0
}
fn default_start_hour() -> f64 {
    12.0
}

impl Scenario {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut sc = Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        sc.base_dir = path.parent().map(Path::to_path_buf);
        Ok(sc)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn tick_count(&self) -> usize {
        (self.horizon_s / self.tick_s).round() as usize
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        match (&self.network, &self.network_file) {
            (Some(n), None) => Ok(n.clone()),
            (None, Some(p)) => {
                let full = match &self.base_dir {
                    Some(d) if p.is_relative() => d.join(p),
                    _ => p.clone(),
                };
                NetworkConfig::load(full)
            }
            (Some(_), Some(_)) => Err(Error::Config("give either network or network_file, not both".into())),
            (None, None) => Err(Error::Config("scenario has no network".into())),
        }
    }

    pub fn service_gamma_down(&self, s: &GridService) -> f64 {
        s.gamma_down.unwrap_or(match s.kind {
            ServiceKind::Voltage => self.params.gamma_down_voltage,
            ServiceKind::Vpp => self.params.gamma_down_vpp,
        })
    }

    pub fn device_gamma_down(&self, d: &DeviceSpec) -> f64 {
        d.gamma_down.unwrap_or(self.params.gamma_down_der)
    }

    /// Device indices per local controller, in order of first appearance.
    pub fn controller_groups(&self) -> Vec<Vec<usize>> {
        let mut groups: Vec<(Option<&str>, Vec<usize>)> = Vec::new();
        for (i, d) in self.devices.iter().enumerate() {
            match d.controller.as_deref() {
                Some(c) => match groups.iter_mut().find(|g| g.0 == Some(c)) {
                    Some(g) => g.1.push(i),
                    None => groups.push((Some(c), vec![i])),
                },
                None => groups.push((None, vec![i])),
            }
        }
        groups.into_iter().map(|g| g.1).collect()
    }

    /// Materialized profiles, with the scenario seed mixed into synthetic ones.
    pub fn build_profiles(&self) -> Result<BTreeMap<String, Profile>> {
        self.profiles
            .iter()
            .map(|(name, spec)| {
                let spec = match spec.clone() {
                    ProfileSpec::SyntheticLoad { seed, noise } => ProfileSpec::SyntheticLoad { seed: mix_seed(seed, self.seed), noise },
                    ProfileSpec::SyntheticPv { seed, peak, noise, clouds } => {
                        ProfileSpec::SyntheticPv { seed: mix_seed(seed, self.seed), peak, noise, clouds }
                    }
                    other => other,
                };
                let p = spec
                    .build(self.horizon_s, self.start_hour, self.base_dir.as_deref())
                    .map_err(|e| match e {
                        Error::Config(m) => Error::Config(format!("profile {name}: {m}")),
                        other => other,
                    })?;
                Ok((name.clone(), p))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if !(self.tick_s > 0.0 && self.tick_s.is_finite()) {
            return bad(format!("tick_s must be > 0, got {}", self.tick_s));
        }
        if !(self.horizon_s >= 0.0 && self.horizon_s.is_finite()) {
            return bad(format!("horizon_s must be >= 0, got {}", self.horizon_s));
        }
        let ratio = self.horizon_s / self.tick_s;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return bad(format!("horizon {} s is not a multiple of the {} s tick", self.horizon_s, self.tick_s));
        }
        self.params.validate()?;
        if self.mode == Mode::Manual {
            match self.manual_step {
                Some(s) if s > 0.0 && s.is_finite() => {}
                Some(s) => return bad(format!("manual_step must be > 0, got {s}")),
                None => return bad("manual mode needs manual_step".into()),
            }
        }
        let cfg = self.network_config()?;
        let net = cfg.build()?;
        if cfg.tap_schedule.windows(2).any(|w| w[1].time_s < w[0].time_s) {
            return Err(Error::Config("tap schedule is not time-ordered".into()));
        }
        for s in &cfg.tap_schedule {
            if !(0.9..=1.1).contains(&s.tap_ratio) {
                return bad(format!("tap ratio {} outside [0.9, 1.1]", s.tap_ratio));
            }
        }
        if self.devices.is_empty() {
            return bad("scenario has no devices".into());
        }
        let mut ids = BTreeSet::new();
        for d in &self.devices {
            if !ids.insert(d.id.as_str()) {
                return Err(Error::Config(format!("duplicate device id {}", d.id)));
            }
            if !net.contains(d.bus) {
                return Err(Error::Topology(format!("device {} sits on unknown bus {}", d.id, d.bus)));
            }
            if !(d.alpha0 > 0.0 && d.alpha0.is_finite()) {
                return bad(format!("device {}: alpha0 must be > 0", d.id));
            }
            if let Some(g) = d.gamma_down {
                if !(g > 0.0 && g < 1.0) {
                    return bad(format!("device {}: gamma_down must lie in (0, 1), got {g}", d.id));
                }
            }
            d.device(1.0, self.tick_s).validate().map_err(|e| Error::Parameter(format!("device {}: {e}", d.id)))?;
            match &d.kind {
                DeviceKind::Pv { availability: Some(p), .. } if !self.profiles.contains_key(p) => {
                    return Err(Error::Config(format!("device {} references unknown profile {p}", d.id)));
                }
                DeviceKind::Battery { initial_soc, soc_min, soc_max, .. } if !(soc_min <= initial_soc && initial_soc <= soc_max) => {
                    return bad(format!("device {}: initial SOC outside [{soc_min}, {soc_max}]", d.id));
                }
                _ => {}
            }
        }
        for g in self.controller_groups() {
            let first = &self.devices[g[0]];
            for &i in &g[1..] {
                let d = &self.devices[i];
                if d.alpha0 != first.alpha0 || self.device_gamma_down(d) != self.device_gamma_down(first) {
                    return bad(format!(
                        "devices {} and {} share a controller but differ in alpha0 or gamma_down",
                        first.id, d.id
                    ));
                }
            }
        }
        if let Some(p) = &self.load_profile {
            if !self.profiles.contains_key(p) {
                return Err(Error::Config(format!("load profile {p} is not defined")));
            }
        }
        let mut sids = BTreeSet::new();
        for s in &self.services {
            if !sids.insert(s.id.as_str()) {
                return Err(Error::Config(format!("duplicate service id {}", s.id)));
            }
            s.validate()?;
            for m in &s.measurements {
                let (MeasurementId::Voltage(b) | MeasurementId::Power(b)) = m;
                if !net.contains(*b) {
                    return Err(Error::UnknownMeasurement(format!("service {} measures unknown bus {b}", s.id)));
                }
            }
        }
        self.build_profiles()?;
        Ok(())
    }

    /// Apply a `key=value` override. Keys: `horizon_s`, `tick_s`,
    /// `start_hour`, `seed`, `mode`, `manual_step`,
    /// `rebuild_sensitivities_on_tap`, `params.<field>`,
    /// `service.<id>.{beta0,gamma_down}`, `device.<id>.{alpha0,gamma_down}`.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let num = || -> Result<f64> {
            value.trim().parse::<f64>().map_err(|_| Error::Config(format!("override {key}: {value:?} is not a number")))
        };
        let flag = || -> Result<bool> {
            value.trim().parse::<bool>().map_err(|_| Error::Config(format!("override {key}: {value:?} is not true/false")))
        };
        let unknown = || Error::Config(format!("unknown override key {key:?}"));
        let parts: Vec<&str> = key.split('.').collect();
        match parts.as_slice() {
            ["horizon_s"] => self.horizon_s = num()?,
            ["tick_s"] => self.tick_s = num()?,
            ["start_hour"] => self.start_hour = num()?,
            ["seed"] => {
                self.seed = value.trim().parse().map_err(|_| Error::Config(format!("override seed: {value:?} is not an integer")))?
            }
            ["mode"] => self.mode = value.trim().parse()?,
            ["manual_step"] => self.manual_step = Some(num()?),
            ["rebuild_sensitivities_on_tap"] => self.rebuild_sensitivities_on_tap = flag()?,
            ["params", field] => {
                let p = &mut self.params;
                match *field {
                    "nu" => p.nu = num()?,
                    "epsilon" => p.epsilon = num()?,
                    "s_lower" => p.s_lower = num()?,
                    "s_upper" => p.s_upper = num()?,
                    "gamma_up" => p.gamma_up = num()?,
                    "gamma_down_der" => p.gamma_down_der = num()?,
                    "gamma_down_voltage" => p.gamma_down_voltage = num()?,
                    "gamma_down_vpp" => p.gamma_down_vpp = num()?,
                    "clamp_steps" => p.clamp_steps = flag()?,
                    _ => return Err(unknown()),
                }
            }
            ["service", id, field] => {
                let s = self.services.iter_mut().find(|s| s.id == *id).ok_or_else(unknown)?;
                match *field {
                    "beta0" => s.beta0 = num()?,
                    "gamma_down" => s.gamma_down = Some(num()?),
                    _ => return Err(unknown()),
                }
            }
            ["device", id, field] => {
                let d = self.devices.iter_mut().find(|d| d.id == *id).ok_or_else(unknown)?;
                match *field {
                    "alpha0" => d.alpha0 = num()?,
                    "gamma_down" => d.gamma_down = Some(num()?),
                    _ => return Err(unknown()),
                }
            }
            _ => return Err(unknown()),
        }
        Ok(())
    }

    /// Multiply every initial step size by `factor`.
    pub fn scale_initial_steps(&mut self, factor: f64) {
        for d in &mut self.devices {
            d.alpha0 *= factor;
        }
        for s in &mut self.services {
            s.beta0 *= factor;
        }
    }
}

fn mix_seed(profile_seed: u64, scenario_seed: u64) -> u64 {
    profile_seed ^ scenario_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}
