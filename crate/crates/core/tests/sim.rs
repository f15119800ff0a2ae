use adaptive_derms::profiles::ProfileSpec;
use adaptive_derms::services::BoundEntry;
use adaptive_derms::sim::calibrate::{calibrate_manual_step, OscillationDetector};
use adaptive_derms::sim::catalog::{
    MANUAL_STEP_PRIORITY, MANUAL_STEP_PV_FLUCT, MANUAL_STEP_SELFTUNE, MANUAL_STEP_TAP, MANUAL_STEP_VPP_STEP, TAP_DOWN, TAP_UP,
};
use adaptive_derms::sim::{builtin, builtin_scenarios, run, DeviceKind, Mode, Scenario, TickRecord, CATALOG};

fn same_record(a: &TickRecord, b: &TickRecord) -> bool {
    // bitwise, NaN-free
    format!("{a:?}") == format!("{b:?}")
}

/// Replace every profile by the series it produces, so that future values
/// can be edited point by point.
fn materialized(sc: &Scenario) -> Scenario {
    let mut sc = sc.clone();
    let built = sc.build_profiles().unwrap();
    for (name, p) in built {
        let points = p.points().map(|(t, v)| [t, v]).collect();
        sc.profiles.insert(name, ProfileSpec::Series { points });
    }
    sc
}

#[test]
fn catalog_has_every_scenario_in_both_modes() {
    let all = builtin_scenarios();
    assert_eq!(all.len(), CATALOG.len() * 2);
    assert!(all.len() >= 8);
    for (name, _) in CATALOG {
        assert!(all.iter().any(|s| s.id == name && s.mode == Mode::Adaptive));
        assert!(all.iter().any(|s| s.id == name && s.mode == Mode::Manual));
    }
}

#[test]
fn tap_scenario_steps_down_then_up() {
    let sc = builtin("tap", Mode::Adaptive).unwrap();
    let net = sc.network_config().unwrap();
    let steps = &net.tap_schedule;
    assert_eq!(steps.len(), 2);
    assert!(steps[0].time_s < steps[1].time_s);
    assert_eq!((steps[0].tap_ratio, steps[1].tap_ratio), (TAP_DOWN, TAP_UP));
    assert!(TAP_DOWN < net.tap_ratio && TAP_UP > TAP_DOWN);
}

#[test]
fn pv_fluct_uses_faster_release_factors() {
    let sc = builtin("pv-fluct", Mode::Adaptive).unwrap();
    assert_eq!(sc.params.gamma_down_vpp, 0.995);
    assert_eq!(sc.params.gamma_down_der, 0.8);
}

#[test]
fn trajectory_has_one_record_per_tick() {
    let sc = builtin("vpp-step", Mode::Adaptive).unwrap();
    let tr = run(&sc).unwrap();
    assert_eq!(tr.records.len(), sc.tick_count() + 1);
    assert!(tr.records.windows(2).all(|w| w[1].t > w[0].t));
    assert_eq!(tr.records.last().unwrap().t, sc.horizon_s);
}

#[test]
fn runs_are_bitwise_deterministic() {
    let sc = builtin("pv-fluct", Mode::Adaptive).unwrap();
    let a = run(&sc).unwrap();
    let b = run(&sc).unwrap();
    assert_eq!(a, b);
    let mut out_a = Vec::new();
    let mut out_b = Vec::new();
    a.write_csv(&mut out_a).unwrap();
    b.write_csv(&mut out_b).unwrap();
    assert_eq!(out_a, out_b);
}

#[test]
fn seed_changes_synthetic_profiles() {
    let sc = builtin("pv-fluct", Mode::Adaptive).unwrap();
    let mut other = sc.clone();
    other.seed = 7;
    assert_ne!(run(&sc).unwrap().records, run(&other).unwrap().records);
}

#[test]
fn future_profile_values_do_not_leak_into_the_past() {
    let sc = materialized(&builtin("pv-fluct", Mode::Adaptive).unwrap());
    let cut = 1800.0;
    let mut perturbed = sc.clone();
    for spec in perturbed.profiles.values_mut() {
        if let ProfileSpec::Series { points } = spec {
            for p in points.iter_mut().filter(|p| p[0] > cut) {
                p[1] *= 0.5;
            }
        }
    }
    let a = run(&sc).unwrap();
    let b = run(&perturbed).unwrap();
    let k = a.records.iter().position(|r| r.t > cut).unwrap();
    assert!(a.records[..k].iter().zip(&b.records[..k]).all(|(x, y)| same_record(x, y)));
    assert!(!same_record(&a.records[k + 30], &b.records[k + 30]));
}

#[test]
fn materialized_profiles_reproduce_the_run() {
    let sc = builtin("selftune", Mode::Adaptive).unwrap();
    let mut short = sc.clone();
    short.horizon_s = 1200.0;
    let mut mat = materialized(&short);
    mat.horizon_s = 1200.0;
    assert_eq!(run(&short).unwrap().records, run(&mat).unwrap().records);
}

#[test]
fn tap_change_takes_effect_at_its_own_tick() {
    let sc = builtin("tap", Mode::Adaptive).unwrap();
    let net = sc.network_config().unwrap();
    let first = net.tap_schedule[0].time_s;
    let tr = run(&sc).unwrap();
    let k = tr.records.iter().position(|r| r.t == first).unwrap();
    assert_eq!(tr.records[k - 1].tap, net.tap_ratio);
    assert_eq!(tr.records[k].tap, TAP_DOWN);
    // the jump in measured voltage lands at the same tick
    let dv = |i: usize| (tr.records[i].values[0][0] - tr.records[i - 1].values[0][0]).abs();
    assert!(dv(k) > 10.0 * dv(k - 1).max(dv(k + 1)).max(1e-6));
}

#[test]
fn set_point_step_applies_to_every_lateral_at_once() {
    let tr = run(&builtin("vpp-step", Mode::Adaptive).unwrap()).unwrap();
    let k = tr.records.iter().position(|r| r.t == 1800.0).unwrap();
    let vpp = tr.services.iter().position(|s| s.id == "vpp").unwrap();
    let before = &tr.records[k - 1].bounds[vpp];
    let at = &tr.records[k].bounds[vpp];
    assert!(before.iter().zip(at).all(|(a, b)| a != b));
    assert_eq!(tr.records[k].bounds[vpp], tr.records[k + 1].bounds[vpp]);
}

#[test]
fn quiescent_scenario_stays_put() {
    let mut sc = builtin("vpp-step", Mode::Adaptive).unwrap();
    sc.horizon_s = 600.0;
    sc.params.nu = 0.0;
    sc.services.truncate(1);
    sc.services[0].bounds = vec![BoundEntry::range(0.0, 0.5, 1.5)];
    for spec in sc.profiles.values_mut() {
        *spec = ProfileSpec::Constant { value: 0.8 };
    }
    for d in &mut sc.devices {
        if let DeviceKind::Battery { initial_soc, soc_pref, .. } = &mut d.kind {
            *initial_soc = *soc_pref;
        }
    }
    let tr = run(&sc).unwrap();
    let first = &tr.records[0];
    for r in &tr.records[1..] {
        let mut r = r.clone();
        r.t = first.t;
        assert!(same_record(&r, first), "moved at t = {}", r.t);
    }
    assert!(first.dual_upper[0].iter().chain(&first.dual_lower[0]).all(|d| *d == 0.0));
}

#[test]
fn built_in_runs_keep_invariants() {
    for sc in builtin_scenarios() {
        let tr = run(&sc).unwrap();
        assert!(tr.completed(), "{} {}: {:?}", sc.id, sc.mode, tr.aborted);
        assert_eq!(tr.invariants.total(), 0, "{} {}: {:?}", sc.id, sc.mode, tr.invariants);
    }
}

#[test]
fn calibration_reproduces_frozen_manual_steps() {
    let frozen = [
        ("selftune", MANUAL_STEP_SELFTUNE),
        ("vpp-step", MANUAL_STEP_VPP_STEP),
        ("pv-fluct", MANUAL_STEP_PV_FLUCT),
        ("tap", MANUAL_STEP_TAP),
        ("priority", MANUAL_STEP_PRIORITY),
    ];
    for (name, step) in frozen {
        let sc = builtin(name, Mode::Manual).unwrap();
        let c = calibrate_manual_step(&sc, 1e-3, &OscillationDetector::default()).unwrap();
        assert_eq!(c.step, step, "{name}");
    }
}

#[test]
fn manual_mode_keeps_step_sizes_fixed() {
    let sc = builtin("vpp-step", Mode::Manual).unwrap();
    let step = sc.manual_step.unwrap();
    let tr = run(&sc).unwrap();
    assert!(tr.records.iter().all(|r| r.alpha.iter().chain(&r.beta).all(|s| *s == step)));
}

#[test]
fn scenario_round_trips_through_toml() {
    let sc = builtin("tap", Mode::Manual).unwrap();
    let text = sc.to_toml_string().unwrap();
    let back = Scenario::from_toml_str(&text).unwrap();
    assert_eq!(run(&sc).unwrap(), run(&back).unwrap());
}
