use adaptive_derms::control::AlgorithmParams;
use adaptive_derms::devices::{BatteryParams, DerDevice, PvParams};
use adaptive_derms::oracle::{self, grid_search, solve_central, track_controller, CentralInstance, KKT_TOL, TRACKING_ALPHA0, TRACKING_BETA0};
use adaptive_derms::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk_instance(v_hi: f64) -> CentralInstance {
    oracle::desk_instance(v_hi).unwrap()
}

fn single_pv(dp: f64, dq: f64, hi: f64, epsilon: f64) -> CentralInstance {
    CentralInstance {
        ders: vec![DerDevice::Pv(PvParams { inv_rating: 1.0, p_avail: 0.9 })],
        soc: vec![],
        dp: vec![vec![dp]],
        dq: vec![vec![dq]],
        offset: vec![1.0],
        bounds: vec![(0.9, hi)],
        nu: 1e-3,
        epsilon,
    }
}

#[test]
fn desk_instance_binds_and_satisfies_kkt() {
    let inst = desk_instance(0.985);
    let full = inst.measure(&[11.0, 7.5, 0.0], &[0.0; 3]);
    assert!(full.iter().any(|v| *v > 0.985), "bound is slack at full output: {full:?}");
    let s = solve_central(&inst).unwrap();
    assert!(s.kkt_residual < KKT_TOL);
    assert!(s.dual_upper.iter().any(|d| *d > 0.0));
    assert!(s.dual_lower.iter().all(|d| *d == 0.0));
}

#[test]
fn battery_follows_soc_when_voltage_is_slack() {
    let mut inst = desk_instance(1.2);
    inst.soc = vec![0.0, 0.0, 80.0];
    assert!(solve_central(&inst).unwrap().p[2] > 0.0);
    inst.soc = vec![0.0, 0.0, 20.0];
    assert!(solve_central(&inst).unwrap().p[2] < 0.0);
}

#[test]
fn binding_voltage_pushes_battery_to_charge() {
    let s = solve_central(&desk_instance(0.985)).unwrap();
    assert!((s.p[2] + 5.0).abs() < 1e-9, "{:?}", s.p);
    assert!(s.q[0] < 0.0 && s.q[1] < 0.0);
}

#[test]
fn grid_search_agrees_on_single_pv() {
    for (dp, dq, hi) in [(0.05, 0.04, 1.03), (0.08, 0.02, 1.02), (0.03, 0.06, 1.01), (0.05, 0.04, 1.2)] {
        let inst = single_pv(dp, dq, hi, 1e-4);
        let s = solve_central(&inst).unwrap();
        let (p, q, _) = grid_search(&inst, 1000).unwrap();
        assert!((s.p[0] - p).abs() <= 2e-3 * 0.9, "p {} vs grid {p}", s.p[0]);
        assert!((s.q[0] - q).abs() <= 2e-3 * 2.0, "q {} vs grid {q}", s.q[0]);
    }
}

#[test]
fn grid_search_agrees_without_regularization() {
    let inst = single_pv(0.05, 0.04, 1.03, 0.0);
    let s = solve_central(&inst).unwrap();
    let (p, q, _) = grid_search(&inst, 1000).unwrap();
    assert!((s.p[0] - p).abs() <= 2e-3 * 0.9 && (s.q[0] - q).abs() <= 2e-3 * 2.0);
}

#[test]
fn infeasible_bounds_keep_duals_finite() {
    // the upper bound sits below anything the PV can reach
    let mut inst = single_pv(0.05, 0.04, 0.9, 1e-4);
    inst.offset = vec![0.95];
    inst.bounds = vec![(0.0, 0.9)];
    let s = solve_central(&inst).unwrap();
    assert!(s.dual_upper[0].is_finite() && s.dual_upper[0] > 0.0);
    assert!(s.kkt_residual < KKT_TOL);
    assert!(s.p[0].abs() < 1e-9);
}

#[test]
fn random_instances_satisfy_kkt() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let n = rng.random_range(1..=3);
        let m = rng.random_range(1..=4);
        let ders = (0..n)
            .map(|_| {
                if rng.random_bool(0.7) {
                    let inv = rng.random_range(0.5..2.0);
                    DerDevice::Pv(PvParams { inv_rating: inv, p_avail: inv * rng.random_range(0.0..1.0) })
                } else {
                    DerDevice::Battery(BatteryParams::new(rng.random_range(1.0..5.0), 1.0, 1.0, 0.25))
                }
            })
            .collect();
        let row = |rng: &mut ChaCha8Rng| (0..n).map(|_| rng.random_range(0.0..0.05)).collect::<Vec<f64>>();
        let inst = CentralInstance {
            ders,
            soc: (0..n).map(|_| rng.random_range(20.0..80.0)).collect(),
            dp: (0..m).map(|_| row(&mut rng)).collect(),
            dq: (0..m).map(|_| row(&mut rng)).collect(),
            offset: (0..m).map(|_| rng.random_range(0.97..1.01)).collect(),
            bounds: vec![(0.95, 1.03); m],
            nu: 1e-3,
            epsilon: if rng.random_bool(0.5) { 1e-4 } else { 0.0 },
        };
        let s = solve_central(&inst).unwrap();
        let r = inst.kkt_residual(&s.p, &s.q, &s.dual_lower, &s.dual_upper).unwrap();
        assert!(r < 1e-6, "{r}");
    }
}

#[test]
fn controller_tracks_oracle_from_any_start() {
    let inst = desk_instance(0.985);
    let target = solve_central(&inst).unwrap();
    let params = AlgorithmParams::default();
    for k in [1.0, 0.01, 100.0] {
        let t = track_controller(&inst, &target, TRACKING_ALPHA0 * k, TRACKING_BETA0 * k, &params, 5000, 1e-3).unwrap();
        assert!(t.ticks.is_some(), "scale {k}: ended at {:?} vs {:?}", t.p, target.p);
    }
}

#[test]
fn instance_round_trips_through_toml() {
    let inst = desk_instance(0.985);
    let text = toml::to_string(&inst).unwrap();
    assert_eq!(CentralInstance::from_toml_str(&text).unwrap(), inst);
}

#[test]
fn rejects_bad_instances() {
    let mut inst = single_pv(0.05, 0.04, 1.03, 1e-4);
    inst.bounds = vec![(1.1, 1.0)];
    assert!(matches!(solve_central(&inst), Err(Error::Parameter(_))));
    let mut inst = single_pv(0.05, 0.04, 1.03, 1e-4);
    inst.dp = vec![vec![0.1, 0.2]];
    assert!(matches!(solve_central(&inst), Err(Error::Dimension(_))));
    let mut inst = single_pv(0.05, 0.04, 1.03, 1e-4);
    inst.offset = vec![1.0; 5];
    assert!(solve_central(&inst).is_err());
}
