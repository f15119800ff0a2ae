//! Built-in desk-scale scenarios on a 12-bus feeder.
//!
//! Feeder: substation bus 0 with three laterals, A = 1-2-3-4, B = 5-6-7-8
//! and C = 9-10-11. Each lateral has two PV customers: a small rooftop
//! system and a larger one with a battery behind the same meter. One
//! voltage service watches every customer bus; one VPP service tracks the
//! active power drawn by each lateral.
//!
//! DER quantities are per-unit of 1 kVA, so the PV and battery costs read
//! in kW, and the VPP is measured in units of 500 kW.

use std::collections::BTreeMap;

use crate::control::AlgorithmParams;
use crate::network::{Bus, BusId, Line, MeasurementId, NetworkConfig, TapStep};
use crate::profiles::{CloudSpec, ProfileSpec};
use crate::services::{BoundEntry, BoundValue, GridService, ServiceKind};

use super::scenario::{DeviceKind, DeviceSpec, Mode, Scenario};

pub const BASE_POWER_W: f64 = 1e3;
pub const VPP_UNIT_W: f64 = 500e3;
const IMPEDANCE_BASE_POWER_W: f64 = 100e3;
pub const BASE_VOLTAGE_V: f64 = 400.0;
pub const SOURCE_VOLTAGE_PU: f64 = 0.99;

/// Lateral head buses, A, B, C.
pub const LATERAL_HEADS: [u32; 3] = [1, 5, 9];
const LATERALS: [&[u32]; 3] = [&[1, 2, 3, 4], &[5, 6, 7, 8], &[9, 10, 11]];

struct Customer {
    bus: u32,
    pv_w: f64,
    /// Capacity (Wh) and power limit (W).
    battery: Option<(f64, f64)>,
}

const CUSTOMERS: [Customer; 6] = [
    Customer { bus: 2, pv_w: 4e3, battery: None },
    Customer { bus: 4, pv_w: 34e3, battery: Some((54e3, 20e3)) },
    Customer { bus: 6, pv_w: 12e3, battery: None },
    Customer { bus: 8, pv_w: 25e3, battery: Some((19e3, 7e3)) },
    Customer { bus: 10, pv_w: 8e3, battery: None },
    Customer { bus: 11, pv_w: 20e3, battery: Some((13.5e3, 5e3)) },
];
const LOAD_P_W: f64 = 4e3;
const LOAD_Q_VAR: f64 = 1.3e3;
const LINE_R_PU: f64 = 0.04;
const LINE_X_PU: f64 = 0.04;
pub const VPP_BAND_W: f64 = 2e3;

pub const ALPHA0_DER: f64 = 10.0;
pub const BETA0_VOLTAGE: f64 = 1000.0;
pub const BETA0_VPP: f64 = 100.0;

/// Frozen manual-mode step sizes, one per event scenario, found with
/// [`super::calibrate::calibrate_manual_step`].
pub const MANUAL_STEP_SELFTUNE: f64 = 20.0;
pub const MANUAL_STEP_VPP_STEP: f64 = 10.0;
pub const MANUAL_STEP_PV_FLUCT: f64 = 20.0;
pub const MANUAL_STEP_TAP: f64 = 20.0;
pub const MANUAL_STEP_PRIORITY: f64 = 30.0;

/// LTC position of the self-tuning and priority runs, high enough that the
/// voltage limit binds around noon.
pub const RAISED_TAP: f64 = 1.01;
/// LTC positions of the tap scenario.
pub const TAP_DOWN: f64 = 0.96;
pub const TAP_UP: f64 = 1.015;

/// Nominal lateral set points, W.
pub const VPP_SET_POINTS_W: [f64; 3] = [-17e3, -17e3, -13e3];
/// Set-point steps after 30 min and after another 45 min, W.
pub const VPP_STEP_1_W: [f64; 3] = [6e3, -5e3, -4e3];
pub const VPP_STEP_2_W: [f64; 3] = [-3e3, 2e3, 2e3];

pub fn desk_feeder() -> NetworkConfig {
    let z_base = BASE_VOLTAGE_V * BASE_VOLTAGE_V / IMPEDANCE_BASE_POWER_W;
    let mut buses = vec![Bus { id: BusId(0), load_p_w: 0.0, load_q_var: 0.0 }];
    let mut lines = Vec::new();
    for lateral in LATERALS {
        let mut from = 0;
        for &b in lateral {
            buses.push(Bus { id: BusId(b), load_p_w: LOAD_P_W, load_q_var: LOAD_Q_VAR });
            lines.push(Line { from: BusId(from), to: BusId(b), r_ohm: LINE_R_PU * z_base, x_ohm: LINE_X_PU * z_base });
            from = b;
        }
    }
    NetworkConfig {
        base_power_w: BASE_POWER_W,
        base_voltage_v: BASE_VOLTAGE_V,
        source_voltage_v: SOURCE_VOLTAGE_PU * BASE_VOLTAGE_V,
        tap_ratio: 1.0,
        tap_schedule: Vec::new(),
        buses,
        lines,
    }
}

fn lateral_of(bus: u32) -> usize {
    LATERALS.iter().position(|l| l.contains(&bus)).expect("bus on a lateral")
}

fn devices(sun: &[Option<String>; 3]) -> Vec<DeviceSpec> {
    let mut out = Vec::new();
    for (n, c) in CUSTOMERS.iter().enumerate() {
        let controller = Some(format!("customer{}", n + 1));
        out.push(DeviceSpec {
            id: format!("pv{}", n + 1),
            bus: BusId(c.bus),
            kind: DeviceKind::Pv { inv_rating_w: c.pv_w, availability: sun[lateral_of(c.bus)].clone() },
            alpha0: ALPHA0_DER,
            gamma_down: None,
            controller: controller.clone(),
        });
        if let Some((capacity_wh, power_w)) = c.battery {
            out.push(DeviceSpec {
                id: format!("bat{}", n + 1),
                bus: BusId(c.bus),
                kind: DeviceKind::Battery {
                    capacity_wh,
                    p_discharge_max_w: power_w,
                    p_charge_max_w: power_w,
                    initial_soc: 60.0,
                    soc_pref: 60.0,
                    soc_min: 10.0,
                    soc_max: 90.0,
                    cost_weight: crate::devices::BATTERY_COST_WEIGHT,
                },
                alpha0: ALPHA0_DER,
                gamma_down: None,
                controller,
            });
        }
    }
    out
}

fn voltage_service() -> GridService {
    let buses = CUSTOMERS.iter().map(|c| MeasurementId::Voltage(BusId(c.bus))).collect();
    GridService::voltage("voltage", buses, BETA0_VOLTAGE, None)
}

fn vpp_service(set_points: &[(f64, [f64; 3])]) -> GridService {
    let measurements: Vec<MeasurementId> = LATERAL_HEADS.iter().map(|&b| MeasurementId::Power(BusId(b))).collect();
    let mut bounds = Vec::new();
    for (t, sp) in set_points {
        for (m, v) in measurements.iter().zip(sp) {
            bounds.push(BoundEntry { time_s: *t, measurement: Some(*m), value: BoundValue::SetPoint { set_point: *v, band: VPP_BAND_W } });
        }
    }
    GridService {
        id: "vpp".into(),
        kind: ServiceKind::Vpp,
        measurements,
        bounds,
        beta0: BETA0_VPP,
        gamma_down: None,
        unit_w: Some(VPP_UNIT_W),
        horizon_s: f64::INFINITY,
    }
}

fn sun_profiles(seed: u64, clouds: Option<CloudSpec>, noise: f64) -> (BTreeMap<String, ProfileSpec>, [Option<String>; 3]) {
    let mut profiles = BTreeMap::new();
    let names = ["sun-a", "sun-b", "sun-c"];
    for (k, name) in names.iter().enumerate() {
        profiles.insert(
            name.to_string(),
            ProfileSpec::SyntheticPv { seed: seed + k as u64, peak: 1.0, noise, clouds: clouds.clone() },
        );
    }
    (profiles, names.map(|n| Some(n.to_string())))
}

fn base_scenario(id: &str, description: &str, horizon_s: f64, manual_step: f64) -> Scenario {
    Scenario {
        id: id.into(),
        description: description.into(),
        horizon_s,
        tick_s: 2.0,
        start_hour: 11.0,
        seed: 0,
        mode: Mode::Adaptive,
        manual_step: Some(manual_step),
        network_file: None,
        network: Some(desk_feeder()),
        load_profile: None,
        profiles: BTreeMap::new(),
        devices: Vec::new(),
        services: Vec::new(),
        params: AlgorithmParams::default(),
        rebuild_sensitivities_on_tap: false,
        base_dir: None,
    }
}

/// Dynamic day-time scenario with clouds and load changes, used to show
/// that step sizes settle regardless of their starting values.
pub fn selftune(scale: f64) -> Scenario {
    let id = match scale {
        s if s < 1.0 => "selftune-low",
        s if s > 1.0 => "selftune-high",
        _ => "selftune",
    };
    let mut sc = base_scenario(id, "self-tuning from scaled initial step sizes", 3.0 * 3600.0, MANUAL_STEP_SELFTUNE);
    let (mut profiles, sun) = sun_profiles(11, Some(CloudSpec::new(6.0)), 0.01);
    profiles.insert("load".into(), ProfileSpec::SyntheticLoad { seed: 5, noise: 0.05 });
    sc.profiles = profiles;
    sc.load_profile = Some("load".into());
    sc.devices = devices(&sun);
    if let Some(net) = sc.network.as_mut() {
        net.tap_ratio = RAISED_TAP;
    }
    sc.services = vec![voltage_service(), vpp_service(&[(0.0, VPP_SET_POINTS_W)])];
    sc.scale_initial_steps(scale);
    sc
}

/// Lateral set points step twice under clear sky.
pub fn vpp_step() -> Scenario {
    let mut sc = base_scenario("vpp-step", "VPP set-point tracking through two steps", 7200.0, MANUAL_STEP_VPP_STEP);
    let (profiles, sun) = sun_profiles(21, None, 0.0);
    sc.profiles = profiles;
    sc.devices = devices(&sun);
    let add = |a: [f64; 3], b: [f64; 3]| [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
    let step1 = add(VPP_SET_POINTS_W, VPP_STEP_1_W);
    let step2 = add(step1, VPP_STEP_2_W);
    sc.services = vec![voltage_service(), vpp_service(&[(0.0, VPP_SET_POINTS_W), (1800.0, step1), (4500.0, step2)])];
    sc
}

/// Fast cloud transients on every lateral.
pub fn pv_fluct() -> Scenario {
    let mut sc = base_scenario("pv-fluct", "VPP and voltage under cloud transients", 3600.0, MANUAL_STEP_PV_FLUCT);
    let (profiles, sun) = sun_profiles(31, Some(CloudSpec::new(20.0)), 0.01);
    sc.profiles = profiles;
    sc.devices = devices(&sun);
    sc.params.gamma_down_vpp = 0.995;
    sc.params.gamma_down_der = 0.8;
    sc.services = vec![voltage_service(), vpp_service(&[(0.0, VPP_SET_POINTS_W)])];
    sc
}

/// Tap steps down, then up past its starting position.
pub fn tap() -> Scenario {
    let mut sc = base_scenario("tap", "LTC tap steps with a frozen linear model", 3600.0, MANUAL_STEP_TAP);
    let (profiles, sun) = sun_profiles(41, None, 0.0);
    sc.profiles = profiles;
    sc.devices = devices(&sun);
    sc.params.gamma_down_voltage = 0.25;
    if let Some(net) = sc.network.as_mut() {
        net.tap_schedule = vec![TapStep { time_s: 1200.0, tap_ratio: TAP_DOWN }, TapStep { time_s: 2400.0, tap_ratio: TAP_UP }];
    }
    sc.services = vec![voltage_service(), vpp_service(&[(0.0, VPP_SET_POINTS_W)])];
    sc
}

/// Voltage and VPP bounds that cannot both hold: the laterals are asked to
/// export more than the voltage limit allows.
pub fn priority(gamma_down_voltage: f64, gamma_down_vpp: f64) -> Scenario {
    let mut sc = base_scenario("priority", "conflicting voltage and VPP bounds", 3600.0, MANUAL_STEP_PRIORITY);
    let (profiles, sun) = sun_profiles(51, None, 0.0);
    sc.profiles = profiles;
    sc.devices = devices(&sun);
    if let Some(net) = sc.network.as_mut() {
        net.tap_ratio = RAISED_TAP;
    }
    let mut v = voltage_service();
    v.gamma_down = Some(gamma_down_voltage);
    let mut p = vpp_service(&[(0.0, PRIORITY_SET_POINTS_W)]);
    p.gamma_down = Some(gamma_down_vpp);
    sc.services = vec![v, p];
    sc
}

/// Catalog names accepted by [`builtin`].
pub const CATALOG: [(&str, &str); 7] = [
    ("selftune", "self-tuning, baseline initial step sizes"),
    ("selftune-low", "self-tuning, initial step sizes divided by 100"),
    ("selftune-high", "self-tuning, initial step sizes multiplied by 100"),
    ("vpp-step", "VPP set-point steps"),
    ("pv-fluct", "fluctuating PV with cloud transients"),
    ("tap", "LTC tap changes"),
    ("priority", "conflicting voltage and VPP bounds"),
];

/// Lateral exports within device capacity but beyond what the voltage
/// limit allows, W.
const PRIORITY_SET_POINTS_W: [f64; 3] = [-36e3, -24e3, -18e3];

/// Decrease factors of the symmetric priority run.
pub const PRIORITY_GAMMA: f64 = 0.9;

pub fn builtin(name: &str, mode: Mode) -> Option<Scenario> {
    let mut sc = match name {
        "selftune" => selftune(1.0),
        "selftune-low" => selftune(0.01),
        "selftune-high" => selftune(100.0),
        "vpp-step" => vpp_step(),
        "pv-fluct" => pv_fluct(),
        "tap" => tap(),
        "priority" => priority(PRIORITY_GAMMA, PRIORITY_GAMMA),
        _ => return None,
    };
    sc.mode = mode;
    Some(sc)
}

/// Every catalog entry in both modes.
pub fn builtin_scenarios() -> Vec<Scenario> {
    CATALOG
        .iter()
        .flat_map(|(name, _)| [Mode::Adaptive, Mode::Manual].map(|m| builtin(name, m).expect("catalog entry")))
        .collect()
}
