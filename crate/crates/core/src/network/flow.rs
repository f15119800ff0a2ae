use num_complex::Complex64;

use super::{Injections, NetworkModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Per-unit L1 nodal power mismatch at which the sweep stops.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Consecutive growing sweeps that count as divergence.
    pub divergence_window: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tolerance: 1e-8, max_iterations: 100, divergence_window: 10 }
    }
}

/// Result of a backward/forward sweep, everything in per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    /// Complex bus voltages, indexed like the network's buses.
    pub voltages: Vec<Complex64>,
    /// Complex power drawn from the substation (positive = import).
    pub feeder_head_power: Complex64,
    /// Current flowing down the line that feeds each bus (zero at the root).
    pub branch_currents: Vec<Complex64>,
    /// Complex power consumed at each bus (load minus DER).
    pub net_load: Vec<Complex64>,
    pub losses: Complex64,
    pub converged: bool,
    pub residual: f64,
    pub iterations: usize,
    pub diagnostic: Option<String>,
}

impl PowerFlowSolution {
    pub fn voltage_magnitudes(&self) -> Vec<f64> {
        self.voltages.iter().map(|v| v.norm()).collect()
    }

    pub fn feeder_head_power_w(&self, net: &NetworkModel) -> f64 {
        self.feeder_head_power.re * net.base_power_w
    }

    /// Complex power flowing into the subtree rooted at bus index `k`.
    pub fn subtree_power_pu(&self, net: &NetworkModel, k: usize) -> Complex64 {
        match net.topo.parent[k] {
            None => self.feeder_head_power,
            Some(p) => self.voltages[p] * self.branch_currents[k].conj(),
        }
    }

    /// `head - (total load - total DER) - losses`, per-unit complex.
    pub fn power_balance_error(&self) -> Complex64 {
        let consumed: Complex64 = self.net_load.iter().sum();
        self.feeder_head_power - consumed - self.losses
    }
}

pub fn solve_power_flow(net: &NetworkModel, injections: &Injections) -> Result<PowerFlowSolution> {
    solve_power_flow_with(net, injections, &SolverOptions::default())
}

/// Backward/forward sweep with constant-power loads.
///
/// Returns `Err` only for malformed inputs. Non-convergence is reported through
/// `converged = false` together with a diagnostic.
pub fn solve_power_flow_with(
    net: &NetworkModel,
    injections: &Injections,
    opts: &SolverOptions,
) -> Result<PowerFlowSolution> {
    let n = net.bus_count();
    if injections.p.len() != n || injections.q.len() != n {
        return Err(Error::Dimension(format!(
            "injections cover {} buses, network has {n}",
            injections.p.len()
        )));
    }
    if injections.p.iter().chain(&injections.q).any(|x| !x.is_finite()) {
        return Err(Error::Parameter("non-finite injection".into()));
    }
    let topo = &net.topo;
    let v0 = Complex64::new(net.head_voltage_pu(), 0.0);
    let net_load: Vec<Complex64> = (0..n)
        .map(|k| net.load_pu(k) - Complex64::new(injections.p[k], injections.q[k]))
        .collect();

    let mut v = vec![v0; n];
    let mut bus_current = vec![Complex64::new(0.0, 0.0); n];
    let mut branch = vec![Complex64::new(0.0, 0.0); n];
    let mut residual = f64::INFINITY;
    let mut growing = 0usize;
    let mut converged = false;
    let mut diagnostic = None;
    let mut iterations = 0;

    for it in 1..=opts.max_iterations {
        iterations = it;
        for k in 0..n {
            bus_current[k] = (net_load[k] / v[k]).conj();
        }
        // backward: accumulate currents from the leaves up
        for &k in topo.order.iter().rev() {
            let mut j = bus_current[k];
            for &c in &topo.children[k] {
                j += branch[c];
            }
            branch[k] = j;
        }
        // forward: drop voltages from the head down
        let mut v_new = vec![v0; n];
        for &k in topo.order.iter().skip(1) {
            let p = topo.parent[k].expect("non-root bus has a parent");
            v_new[k] = v_new[p] - topo.z_pu[k] * branch[k];
        }
        // the currents drawn at v deliver S * v_new / v at v_new
        let r: f64 = (0..n).map(|k| net_load[k].norm() * (v_new[k] / v[k] - 1.0).norm()).sum();
        v = v_new;

        if !r.is_finite() || v.iter().any(|x| !x.re.is_finite() || !x.im.is_finite() || x.norm() == 0.0) {
            residual = f64::NAN;
            diagnostic = Some(format!("non-finite voltages after sweep {it}"));
            break;
        }
        if r > residual {
            growing += 1;
        } else {
            growing = 0;
        }
        residual = r;
        if residual < opts.tolerance {
            converged = true;
            break;
        }
        if growing >= opts.divergence_window {
            diagnostic = Some(format!(
                "mismatch grew for {growing} consecutive sweeps (now {residual:.3e}); load may exceed transfer capability"
            ));
            break;
        }
    }
    if !converged && diagnostic.is_none() {
        diagnostic = Some(format!(
            "iteration cap {} reached with mismatch {residual:.3e}",
            opts.max_iterations
        ));
    }

    let mut losses = Complex64::new(0.0, 0.0);
    for &k in topo.order.iter().skip(1) {
        losses += topo.z_pu[k] * branch[k].norm_sqr();
    }
    let root = topo.root;
    let feeder_head_power = v0 * branch[root].conj();
    branch[root] = Complex64::new(0.0, 0.0);

    Ok(PowerFlowSolution {
        voltages: v,
        feeder_head_power,
        branch_currents: branch,
        net_load,
        losses,
        converged,
        residual,
        iterations,
        diagnostic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::fixtures::two_bus;
    use crate::network::{Bus, BusId, Line};

    /// |V2| for a single line fed at |V1| = 1 with a constant-power load,
    /// from |V2|^4 + (2(rP + xQ) - 1)|V2|^2 + |z|^2|S|^2 = 0.
    fn single_line_closed_form(r: f64, x: f64, p: f64, q: f64) -> f64 {
        let b = 2.0 * (r * p + x * q) - 1.0;
        let c = (r * r + x * x) * (p * p + q * q);
        ((-b + (b * b - 4.0 * c).sqrt()) / 2.0).sqrt()
    }

    #[test]
    fn lossless_no_load_is_flat() {
        let net = two_bus(0.0, 0.0, 0.0, 0.0);
        let sol = solve_power_flow(&net, &Injections::zeros(&net)).unwrap();
        assert!(sol.converged);
        for v in &sol.voltages {
            assert_eq!(v.norm(), 1.0);
        }
        assert_eq!(sol.feeder_head_power_w(&net), 0.0);
    }

    #[test]
    fn two_bus_matches_closed_form() {
        let net = two_bus(0.01, 0.01, 0.1, 0.0);
        let sol = solve_power_flow(&net, &Injections::zeros(&net)).unwrap();
        assert!(sol.converged);
        let expected = single_line_closed_form(0.01, 0.01, 0.1, 0.0);
        assert!((sol.voltages[1].norm() - expected).abs() < 1e-8, "{} vs {expected}", sol.voltages[1].norm());
        // load plus losses
        assert!(sol.feeder_head_power.re > 0.1);
        assert!(sol.power_balance_error().norm() < 1e-7);
    }

    #[test]
    fn overloaded_line_reports_nonconvergence() {
        // far beyond the nose of the PV curve
        let net = two_bus(0.5, 0.5, 5.0, 0.0);
        let sol = solve_power_flow(&net, &Injections::zeros(&net)).unwrap();
        assert!(!sol.converged);
        assert!(sol.diagnostic.is_some());
    }

    #[test]
    fn tap_raise_lifts_every_voltage() {
        let buses = (1..=4)
            .map(|i| Bus { id: BusId(i), load_p_w: if i > 1 { 2e5 } else { 0.0 }, load_q_var: 5e4 })
            .collect();
        let lines = vec![
            Line { from: BusId(1), to: BusId(2), r_ohm: 0.02, x_ohm: 0.03 },
            Line { from: BusId(2), to: BusId(3), r_ohm: 0.02, x_ohm: 0.01 },
            Line { from: BusId(2), to: BusId(4), r_ohm: 0.03, x_ohm: 0.02 },
        ];
        let mut net = NetworkModel::new(buses, lines, 1000.0, 1.0, 1e6, 1000.0).unwrap();
        let inj = Injections::zeros(&net);
        let low = solve_power_flow(&net, &inj).unwrap();
        net.set_tap_ratio(1.05).unwrap();
        let high = solve_power_flow(&net, &inj).unwrap();
        for (a, b) in low.voltages.iter().zip(&high.voltages) {
            assert!(b.norm() > a.norm());
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = two_bus(0.01, 0.01, 0.1, 0.0);
        let inj = Injections { p: vec![0.0], q: vec![0.0] };
        assert!(matches!(solve_power_flow(&net, &inj), Err(Error::Dimension(_))));
    }
}
