use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::{solve_power_flow, BusId, Injections, MeasurementId, NetworkModel};
use crate::error::{Error, Result};

/// Which quantities to linearize, and around which DER injections.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizationSpec {
    pub voltage_buses: Vec<BusId>,
    /// Subtree roots whose inflowing active power is measured. The feeder
    /// head bus stands for the substation import.
    pub power_buses: Vec<BusId>,
    pub der_buses: Vec<BusId>,
    /// Per-DER `(P, Q)` in per-unit; empty means zero injection.
    pub der_injections: Vec<(f64, f64)>,
}

/// First-order model of measurements with respect to DER injections, all
/// per-unit. Rows follow the requested measurements, columns follow
/// `der_buses` (one column per DER, several DERs may share a bus).
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityModel {
    pub voltage_buses: Vec<BusId>,
    pub power_buses: Vec<BusId>,
    pub der_buses: Vec<BusId>,
    pub dvmag_dp: DMatrix<f64>,
    pub dvmag_dq: DMatrix<f64>,
    pub dphead_dp: DMatrix<f64>,
    pub dphead_dq: DMatrix<f64>,
    pub linearization_point: Vec<(f64, f64)>,
    pub tap_ratio: f64,
}

impl SensitivityModel {
    pub fn der_count(&self) -> usize {
        self.der_buses.len()
    }

    /// `(dG/dP, dG/dQ)` rows for `id`, per-unit measurement per per-unit power.
    pub fn row(&self, id: &MeasurementId) -> Result<(Vec<f64>, Vec<f64>)> {
        let (mp, mq, r) = match id {
            MeasurementId::Voltage(b) => (&self.dvmag_dp, &self.dvmag_dq, self.voltage_buses.iter().position(|x| x == b)),
            MeasurementId::Power(b) => (&self.dphead_dp, &self.dphead_dq, self.power_buses.iter().position(|x| x == b)),
        };
        let r = r.ok_or_else(|| Error::UnknownMeasurement(format!("{id} is not in the sensitivity model")))?;
        Ok((mp.row(r).iter().copied().collect(), mq.row(r).iter().copied().collect()))
    }
}

/// Sensitivities of bus voltage magnitudes and substation import about the
/// nominal-load operating point with zero DER output.
pub fn build_sensitivities(net: &NetworkModel, measured_buses: &[BusId], der_buses: &[BusId]) -> Result<SensitivityModel> {
    build_sensitivities_with(
        net,
        &LinearizationSpec {
            voltage_buses: measured_buses.to_vec(),
            power_buses: vec![net.root_id()],
            der_buses: der_buses.to_vec(),
            der_injections: Vec::new(),
        },
    )
}

/// Exact Jacobian of the radial power flow at the linearization point.
///
/// With `Z` the bus impedance matrix (common-path sums) and `I_m =
/// conj(S_m / V_m)` the current drawn at bus `m`, the sweep fixed point is
/// `V = V0 - Z I`. Differentiating gives `dV + Z A conj(dV) = -Z c`, where
/// `A = diag(-conj(S) / conj(V)^2)` and `c` carries the injection
/// perturbation. The system is solved in real form once per DER bus.
pub fn build_sensitivities_with(net: &NetworkModel, spec: &LinearizationSpec) -> Result<SensitivityModel> {
    if spec.der_buses.is_empty() {
        return Err(Error::Parameter("no DER buses to linearize against".into()));
    }
    if spec.voltage_buses.is_empty() && spec.power_buses.is_empty() {
        return Err(Error::Parameter("no measurements to linearize".into()));
    }
    if !spec.der_injections.is_empty() && spec.der_injections.len() != spec.der_buses.len() {
        return Err(Error::Dimension("der_injections must match der_buses".into()));
    }
    let der_idx: Vec<usize> = spec.der_buses.iter().map(|b| net.index_of(*b)).collect::<Result<_>>()?;
    let v_idx: Vec<usize> = spec.voltage_buses.iter().map(|b| net.index_of(*b)).collect::<Result<_>>()?;
    let p_idx: Vec<usize> = spec.power_buses.iter().map(|b| net.index_of(*b)).collect::<Result<_>>()?;

    let point: Vec<(f64, f64)> = if spec.der_injections.is_empty() {
        vec![(0.0, 0.0); spec.der_buses.len()]
    } else {
        spec.der_injections.clone()
    };
    let mut inj = Injections::zeros(net);
    for (&k, &(p, q)) in der_idx.iter().zip(&point) {
        inj.p[k] += p;
        inj.q[k] += q;
    }
    let sol = solve_power_flow(net, &inj)?;
    if !sol.converged {
        return Err(Error::Singular(format!(
            "operating point does not solve: {}",
            sol.diagnostic.unwrap_or_default()
        )));
    }

    let n = net.bus_count();
    let root = net.topo.root;
    // unknowns: dV at every non-root bus
    let unknown: Vec<usize> = (0..n).filter(|&k| k != root).collect();
    let m = unknown.len();
    let v = &sol.voltages;
    let s = &sol.net_load;
    let a: Vec<Complex64> = (0..n).map(|k| -s[k].conj() / (v[k].conj() * v[k].conj())).collect();

    let mut mat = DMatrix::<f64>::identity(2 * m, 2 * m);
    for (r, &k) in unknown.iter().enumerate() {
        for (c, &j) in unknown.iter().enumerate() {
            let b = net.common_path_impedance(k, j) * a[j];
            mat[(r, c)] += b.re;
            mat[(r, m + c)] += b.im;
            mat[(m + r, c)] += b.im;
            mat[(m + r, m + c)] -= b.re;
        }
    }
    let lu = mat.lu();
    if !lu.is_invertible() {
        return Err(Error::Singular("power-flow Jacobian is not invertible".into()));
    }

    let d = der_idx.len();
    let mut dv_dp = DMatrix::zeros(v_idx.len(), d);
    let mut dv_dq = DMatrix::zeros(v_idx.len(), d);
    let mut dh_dp = DMatrix::zeros(p_idx.len(), d);
    let mut dh_dq = DMatrix::zeros(p_idx.len(), d);

    for (col, &bus) in der_idx.iter().enumerate() {
        // injecting P lowers consumption by 1, injecting Q lowers it by j
        for (ds, is_q) in [(Complex64::new(-1.0, 0.0), false), (Complex64::new(0.0, -1.0), true)] {
            let c_bus = ds.conj() / v[bus].conj();
            let mut rhs = DVector::zeros(2 * m);
            for (r, &k) in unknown.iter().enumerate() {
                let z = -net.common_path_impedance(k, bus) * c_bus;
                rhs[r] = z.re;
                rhs[m + r] = z.im;
            }
            let x = lu
                .solve(&rhs)
                .ok_or_else(|| Error::Singular("power-flow Jacobian solve failed".into()))?;
            let mut dv = vec![Complex64::new(0.0, 0.0); n];
            for (r, &k) in unknown.iter().enumerate() {
                dv[k] = Complex64::new(x[r], x[m + r]);
            }
            let di: Vec<Complex64> = (0..n)
                .map(|k| {
                    let ck = if k == bus { c_bus } else { Complex64::new(0.0, 0.0) };
                    ck + a[k] * dv[k].conj()
                })
                .collect();

            let (vm, pm) = if is_q { (&mut dv_dq, &mut dh_dq) } else { (&mut dv_dp, &mut dh_dp) };
            for (r, &k) in v_idx.iter().enumerate() {
                vm[(r, col)] = (v[k].conj() * dv[k]).re / v[k].norm();
            }
            for (r, &k) in p_idx.iter().enumerate() {
                let sub = net.subtree_indices(k);
                let dj: Complex64 = sub.iter().map(|&i| di[i]).sum();
                let ds_flow = match net.topo.parent[k] {
                    None => v[root] * dj.conj(),
                    Some(p) => dv[p] * sol.branch_currents[k].conj() + v[p] * dj.conj(),
                };
                pm[(r, col)] = ds_flow.re;
            }
        }
    }

    Ok(SensitivityModel {
        voltage_buses: spec.voltage_buses.clone(),
        power_buses: spec.power_buses.clone(),
        der_buses: spec.der_buses.clone(),
        dvmag_dp: dv_dp,
        dvmag_dq: dv_dq,
        dphead_dp: dh_dp,
        dphead_dq: dh_dq,
        linearization_point: point,
        tap_ratio: net.tap_ratio(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::fixtures::two_bus;
    use crate::network::{measure, Bus, Line};

    fn fd_vmag(net: &NetworkModel, bus: BusId, der: BusId, h: f64, reactive: bool) -> f64 {
        let eval = |delta: f64| {
            let mut inj = Injections::zeros(net);
            let k = net.index_of(der).unwrap();
            if reactive {
                inj.q[k] += delta;
            } else {
                inj.p[k] += delta;
            }
            let sol = solve_power_flow(net, &inj).unwrap();
            measure(net, &sol, &[MeasurementId::Voltage(bus)]).unwrap()[0]
        };
        (eval(h) - eval(-h)) / (2.0 * h)
    }

    #[test]
    fn two_bus_voltage_sensitivity_is_about_r() {
        let net = two_bus(0.01, 0.01, 0.0, 0.0);
        let sm = build_sensitivities(&net, &[BusId(2)], &[BusId(2)]).unwrap();
        let fd = fd_vmag(&net, BusId(2), BusId(2), 1e-4, false);
        let lin = sm.dvmag_dp[(0, 0)];
        assert!((lin - 0.01).abs() < 0.2 * 0.01);
        assert!((lin - fd).abs() < 0.2 * fd.abs());
    }

    #[test]
    fn head_bus_der_moves_import_one_for_one() {
        let net = two_bus(0.02, 0.03, 0.3, 0.1);
        let sm = build_sensitivities(&net, &[BusId(2)], &[BusId(1), BusId(2)]).unwrap();
        assert_eq!(sm.dphead_dp[(0, 0)], -1.0);
        assert!(sm.dphead_dp[(0, 1)] < -0.9 && sm.dphead_dp[(0, 1)] > -1.05);
    }

    #[test]
    fn doubling_impedance_doubles_voltage_sensitivity() {
        let buses = (1..=5)
            .map(|i| Bus { id: BusId(i), load_p_w: if i > 1 { 1e5 } else { 0.0 }, load_q_var: 3e4 })
            .collect();
        let lines = vec![
            Line { from: BusId(1), to: BusId(2), r_ohm: 0.01, x_ohm: 0.02 },
            Line { from: BusId(2), to: BusId(3), r_ohm: 0.03, x_ohm: 0.01 },
            Line { from: BusId(2), to: BusId(4), r_ohm: 0.02, x_ohm: 0.02 },
            Line { from: BusId(4), to: BusId(5), r_ohm: 0.015, x_ohm: 0.01 },
        ];
        let net = NetworkModel::new(buses, lines, 1000.0, 1.0, 1e6, 1000.0).unwrap();
        let ids: Vec<BusId> = (2..=5).map(BusId).collect();
        let a = build_sensitivities(&net, &ids, &ids).unwrap();
        let b = build_sensitivities(&net.with_impedance_scale(2.0).unwrap(), &ids, &ids).unwrap();
        let flat = |m: &DMatrix<f64>| m.iter().map(|x| x.abs()).collect::<Vec<_>>();
        let (fa, fb) = (flat(&a.dvmag_dp), flat(&b.dvmag_dp));
        for (x, y) in fa.iter().zip(&fb) {
            assert!(*y >= 2.0 * x, "{y} < 2 * {x}");
        }
        let rank = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
            idx
        };
        assert_eq!(rank(&fa), rank(&fb));
    }

    #[test]
    fn unknown_bus_is_rejected() {
        let net = two_bus(0.01, 0.01, 0.1, 0.0);
        assert!(build_sensitivities(&net, &[BusId(7)], &[BusId(2)]).is_err());
        assert!(build_sensitivities(&net, &[BusId(2)], &[]).is_err());
    }

    #[test]
    fn collapsed_operating_point_is_singular() {
        let net = two_bus(0.5, 0.5, 5.0, 0.0);
        assert!(matches!(
            build_sensitivities(&net, &[BusId(2)], &[BusId(2)]),
            Err(Error::Singular(_))
        ));
    }
}
