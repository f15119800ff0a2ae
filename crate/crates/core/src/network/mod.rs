//! Single-phase-equivalent radial feeder.
//!
//! The model is stored in SI units as configured and converted to per-unit on
//! demand. Sign convention used everywhere in the crate: a DER injection is
//! positive into the network, and feeder-head power is positive when the
//! feeder imports from the substation.

mod flow;
mod sensitivity;

pub use flow::{solve_power_flow, solve_power_flow_with, PowerFlowSolution, SolverOptions};
pub use sensitivity::{build_sensitivities, build_sensitivities_with, LinearizationSpec, SensitivityModel};

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TAP_MIN: f64 = 0.9;
pub const TAP_MAX: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BusId(pub u32);

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: BusId,
    /// Nominal uncontrollable active load, watts.
    #[serde(default)]
    pub load_p_w: f64,
    /// Nominal uncontrollable reactive load, vars.
    #[serde(default)]
    pub load_q_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: BusId,
    pub to: BusId,
    pub r_ohm: f64,
    pub x_ohm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TapStep {
    pub time_s: f64,
    pub tap_ratio: f64,
}

/// On-disk description of a feeder. Values are SI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub base_power_w: f64,
    pub base_voltage_v: f64,
    pub source_voltage_v: f64,
    #[serde(default = "default_tap")]
    pub tap_ratio: f64,
    #[serde(default)]
    pub tap_schedule: Vec<TapStep>,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
}

fn default_tap() -> f64 {
    1.0
}

impl NetworkConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("network config serializes")
    }

    pub fn build(&self) -> Result<NetworkModel> {
        NetworkModel::new(
            self.buses.clone(),
            self.lines.clone(),
            self.source_voltage_v,
            self.tap_ratio,
            self.base_power_w,
            self.base_voltage_v,
        )
    }

    /// Tap ratio in force at `t` (right-continuous steps).
    pub fn tap_at(&self, t: f64) -> f64 {
        self.tap_schedule
            .iter()
            .filter(|s| s.time_s <= t)
            .last()
            .map_or(self.tap_ratio, |s| s.tap_ratio)
    }
}

#[derive(Debug, Clone)]
struct Topology {
    root: usize,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    /// Breadth-first order starting at the root.
    order: Vec<usize>,
    /// Per-unit impedance of the line feeding each bus (zero at the root).
    z_pu: Vec<Complex64>,
    depth: Vec<usize>,
}

/// Radial feeder with per-bus loads, a slack source and an ideal tap at the head.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    buses: Vec<Bus>,
    lines: Vec<Line>,
    index: HashMap<BusId, usize>,
    topo: Topology,
    pub source_voltage_v: f64,
    tap_ratio: f64,
    pub base_power_w: f64,
    pub base_voltage_v: f64,
}

impl NetworkModel {
    pub fn new(
        buses: Vec<Bus>,
        lines: Vec<Line>,
        source_voltage_v: f64,
        tap_ratio: f64,
        base_power_w: f64,
        base_voltage_v: f64,
    ) -> Result<Self> {
        if !(base_power_w > 0.0 && base_power_w.is_finite()) {
            return Err(Error::Parameter(format!("base_power_w must be > 0, got {base_power_w}")));
        }
        if !(base_voltage_v > 0.0 && base_voltage_v.is_finite()) {
            return Err(Error::Parameter(format!("base_voltage_v must be > 0, got {base_voltage_v}")));
        }
        if !(source_voltage_v > 0.0 && source_voltage_v.is_finite()) {
            return Err(Error::Parameter(format!("source_voltage_v must be > 0, got {source_voltage_v}")));
        }
        check_tap(tap_ratio)?;
        for b in &buses {
            if !(b.load_p_w.is_finite() && b.load_q_var.is_finite()) {
                return Err(Error::Parameter(format!("bus {} has a non-finite load", b.id)));
            }
        }
        for l in &lines {
            if !(l.r_ohm >= 0.0 && l.r_ohm.is_finite()) {
                return Err(Error::Parameter(format!("line {}-{}: resistance must be >= 0", l.from, l.to)));
            }
            if !l.x_ohm.is_finite() {
                return Err(Error::Parameter(format!("line {}-{}: reactance must be finite", l.from, l.to)));
            }
        }

        let mut index = HashMap::with_capacity(buses.len());
        for (i, b) in buses.iter().enumerate() {
            if index.insert(b.id, i).is_some() {
                return Err(Error::Topology(format!("duplicate bus id {}", b.id)));
            }
        }
        let z_base = base_voltage_v * base_voltage_v / base_power_w;
        let topo = build_topology(&buses, &lines, &index, z_base)?;
        Ok(Self {
            buses,
            lines,
            index,
            topo,
            source_voltage_v,
            tap_ratio,
            base_power_w,
            base_voltage_v,
        })
    }

    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn root_id(&self) -> BusId {
        self.buses[self.topo.root].id
    }

    pub fn index_of(&self, id: BusId) -> Result<usize> {
        self.index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::UnknownMeasurement(format!("bus {id} is not in the network")))
    }

    pub fn contains(&self, id: BusId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn tap_ratio(&self) -> f64 {
        self.tap_ratio
    }

    pub fn set_tap_ratio(&mut self, tap: f64) -> Result<()> {
        check_tap(tap)?;
        self.tap_ratio = tap;
        Ok(())
    }

    /// Slack voltage in per-unit after the tap.
    pub fn head_voltage_pu(&self) -> f64 {
        self.source_voltage_v / self.base_voltage_v * self.tap_ratio
    }

    pub fn z_base_ohm(&self) -> f64 {
        self.base_voltage_v * self.base_voltage_v / self.base_power_w
    }

    /// Per-unit load at bus index `k`.
    pub fn load_pu(&self, k: usize) -> Complex64 {
        let b = &self.buses[k];
        Complex64::new(b.load_p_w, b.load_q_var) / self.base_power_w
    }

    /// Replace the load at `id`, SI units.
    pub fn set_load(&mut self, id: BusId, p_w: f64, q_var: f64) -> Result<()> {
        let k = self.index_of(id)?;
        self.buses[k].load_p_w = p_w;
        self.buses[k].load_q_var = q_var;
        Ok(())
    }

    /// Copy with every line impedance multiplied by `factor`.
    pub fn with_impedance_scale(&self, factor: f64) -> Result<Self> {
        let lines = self
            .lines
            .iter()
            .map(|l| Line { r_ohm: l.r_ohm * factor, x_ohm: l.x_ohm * factor, ..l.clone() })
            .collect();
        Self::new(
            self.buses.clone(),
            lines,
            self.source_voltage_v,
            self.tap_ratio,
            self.base_power_w,
            self.base_voltage_v,
        )
    }

    /// Ids of all buses in the subtree rooted at `id` (inclusive).
    pub fn subtree(&self, id: BusId) -> Result<Vec<BusId>> {
        let k = self.index_of(id)?;
        Ok(self.subtree_indices(k).into_iter().map(|i| self.buses[i].id).collect())
    }

    pub(crate) fn subtree_indices(&self, k: usize) -> Vec<usize> {
        let mut out = vec![k];
        let mut i = 0;
        while i < out.len() {
            out.extend_from_slice(&self.topo.children[out[i]]);
            i += 1;
        }
        out
    }

    /// Sum of impedances on the common part of the root paths of `a` and `b`.
    /// For a radial network this is the entry of the inverse reduced nodal
    /// admittance matrix.
    pub(crate) fn common_path_impedance(&self, a: usize, b: usize) -> Complex64 {
        let t = &self.topo;
        let (mut a, mut b) = (a, b);
        while t.depth[a] > t.depth[b] {
            a = t.parent[a].unwrap();
        }
        while t.depth[b] > t.depth[a] {
            b = t.parent[b].unwrap();
        }
        while a != b {
            a = t.parent[a].unwrap();
            b = t.parent[b].unwrap();
        }
        let mut z = Complex64::new(0.0, 0.0);
        let mut k = a;
        while let Some(p) = t.parent[k] {
            z += t.z_pu[k];
            k = p;
        }
        z
    }
}

fn check_tap(tap: f64) -> Result<()> {
    if !(TAP_MIN..=TAP_MAX).contains(&tap) {
        return Err(Error::Parameter(format!("tap_ratio {tap} outside [{TAP_MIN}, {TAP_MAX}]")));
    }
    Ok(())
}

fn build_topology(buses: &[Bus], lines: &[Line], index: &HashMap<BusId, usize>, z_base: f64) -> Result<Topology> {
    let n = buses.len();
    if n == 0 {
        return Err(Error::Topology("network has no buses".into()));
    }
    if lines.len() != n - 1 {
        return Err(Error::Topology(format!(
            "a radial feeder with {n} buses needs {} lines, found {}",
            n - 1,
            lines.len()
        )));
    }
    let mut parent: Vec<Option<usize>> = vec![None; n];
    let mut z_pu = vec![Complex64::new(0.0, 0.0); n];
    let mut children = vec![Vec::new(); n];
    for l in lines {
        let from = *index
            .get(&l.from)
            .ok_or_else(|| Error::Topology(format!("line references unknown bus {}", l.from)))?;
        let to = *index
            .get(&l.to)
            .ok_or_else(|| Error::Topology(format!("line references unknown bus {}", l.to)))?;
        if from == to {
            return Err(Error::Topology(format!("self-loop at bus {}", l.from)));
        }
        if parent[to].is_some() {
            return Err(Error::Topology(format!("bus {} is fed by more than one line", l.to)));
        }
        parent[to] = Some(from);
        z_pu[to] = Complex64::new(l.r_ohm, l.x_ohm) / z_base;
        children[from].push(to);
    }
    let roots: Vec<usize> = (0..n).filter(|&k| parent[k].is_none()).collect();
    if roots.len() != 1 {
        return Err(Error::Topology(format!("expected exactly one feeder head, found {}", roots.len())));
    }
    let root = roots[0];
    let mut order = Vec::with_capacity(n);
    let mut depth = vec![0usize; n];
    order.push(root);
    let mut i = 0;
    while i < order.len() {
        let k = order[i];
        for &c in &children[k] {
            depth[c] = depth[k] + 1;
            order.push(c);
        }
        i += 1;
    }
    if order.len() != n {
        return Err(Error::Topology("line graph is not connected to the feeder head (cycle or island)".into()));
    }
    Ok(Topology { root, parent, children, order, z_pu, depth })
}

/// Per-bus DER injections in per-unit, indexed like the network's buses.
#[derive(Debug, Clone, PartialEq)]
pub struct Injections {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl Injections {
    pub fn zeros(net: &NetworkModel) -> Self {
        Self { p: vec![0.0; net.bus_count()], q: vec![0.0; net.bus_count()] }
    }

    /// Build from SI `(bus, watts, vars)` triples; repeated buses accumulate.
    pub fn from_si(net: &NetworkModel, items: &[(BusId, f64, f64)]) -> Result<Self> {
        let mut inj = Self::zeros(net);
        for &(id, p, q) in items {
            let k = net
                .index
                .get(&id)
                .copied()
                .ok_or_else(|| Error::Parameter(format!("injection at unknown bus {id}")))?;
            inj.p[k] += p / net.base_power_w;
            inj.q[k] += q / net.base_power_w;
        }
        Ok(inj)
    }

    pub fn add_pu(&mut self, net: &NetworkModel, id: BusId, p: f64, q: f64) -> Result<()> {
        let k = net.index_of(id)?;
        self.p[k] += p;
        self.q[k] += q;
        Ok(())
    }
}

/// What a grid-service measurement observes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "bus", rename_all = "snake_case")]
pub enum MeasurementId {
    /// Voltage magnitude at a bus, per-unit.
    Voltage(BusId),
    /// Active power flowing into the subtree rooted at a bus, watts. At the
    /// feeder head this is the substation import.
    Power(BusId),
}

impl fmt::Display for MeasurementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MeasurementId::Voltage(b) => write!(f, "v{b}"),
            MeasurementId::Power(b) => write!(f, "p{b}"),
        }
    }
}

/// Evaluate measurements on a converged solution: voltages in per-unit,
/// powers in watts.
pub fn measure(net: &NetworkModel, solution: &PowerFlowSolution, ids: &[MeasurementId]) -> Result<Vec<f64>> {
    if !solution.converged {
        return Err(Error::Divergence(format!(
            "cannot measure an unconverged solution (residual {:.3e})",
            solution.residual
        )));
    }
    ids.iter()
        .map(|id| match *id {
            MeasurementId::Voltage(b) => Ok(solution.voltages[net.index_of(b)?].norm()),
            MeasurementId::Power(b) => Ok(solution.subtree_power_pu(net, net.index_of(b)?).re * net.base_power_w),
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Two buses, one line, base 1 MVA / 1 kV so that 1 ohm = 1 p.u.
    pub fn two_bus(r_pu: f64, x_pu: f64, load_p_pu: f64, load_q_pu: f64) -> NetworkModel {
        NetworkModel::new(
            vec![
                Bus { id: BusId(1), load_p_w: 0.0, load_q_var: 0.0 },
                Bus { id: BusId(2), load_p_w: load_p_pu * 1e6, load_q_var: load_q_pu * 1e6 },
            ],
            vec![Line { from: BusId(1), to: BusId(2), r_ohm: r_pu, x_ohm: x_pu }],
            1000.0,
            1.0,
            1e6,
            1000.0,
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bus(id: u32) -> Bus {
        Bus { id: BusId(id), load_p_w: 0.0, load_q_var: 0.0 }
    }

    fn line(a: u32, b: u32) -> Line {
        Line { from: BusId(a), to: BusId(b), r_ohm: 1.0, x_ohm: 1.0 }
    }

    fn model(buses: Vec<Bus>, lines: Vec<Line>) -> Result<NetworkModel> {
        NetworkModel::new(buses, lines, 1000.0, 1.0, 1e6, 1000.0)
    }

    #[test]
    fn rejects_wrong_line_count() {
        let err = model(vec![bus(1), bus(2), bus(3)], vec![line(1, 2)]).unwrap_err();
        assert!(matches!(err, Error::Topology(_)));
    }

    #[test]
    fn rejects_cycle() {
        // 1 is the head, 2 -> 3 -> 2 is a detached cycle
        let err = model(vec![bus(1), bus(2), bus(3)], vec![line(2, 3), line(3, 2)]).unwrap_err();
        assert!(matches!(err, Error::Topology(_)));
    }

    #[test]
    fn rejects_two_heads() {
        let err = model(vec![bus(1), bus(2), bus(3)], vec![line(1, 3), line(2, 3)]).unwrap_err();
        assert!(matches!(err, Error::Topology(_)));
    }

    #[test]
    fn rejects_negative_resistance_and_bad_tap() {
        let mut l = line(1, 2);
        l.r_ohm = -0.1;
        assert!(matches!(model(vec![bus(1), bus(2)], vec![l]), Err(Error::Parameter(_))));
        let err = NetworkModel::new(vec![bus(1)], vec![], 1000.0, 1.2, 1e6, 1000.0).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
    }

    #[test]
    fn common_path_impedance_of_a_branching_tree() {
        let net = model(
            vec![bus(1), bus(2), bus(3), bus(4)],
            vec![line(1, 2), line(2, 3), line(2, 4)],
        )
        .unwrap();
        let z = |a: u32, b: u32| {
            net.common_path_impedance(net.index_of(BusId(a)).unwrap(), net.index_of(BusId(b)).unwrap())
        };
        assert_eq!(z(3, 4), Complex64::new(1.0, 1.0));
        assert_eq!(z(3, 3), Complex64::new(2.0, 2.0));
        assert_eq!(z(1, 3), Complex64::new(0.0, 0.0));
        assert_eq!(net.subtree(BusId(2)).unwrap().len(), 3);
    }

    #[test]
    fn tap_schedule_is_right_continuous() {
        let cfg = NetworkConfig {
            base_power_w: 1e6,
            base_voltage_v: 1000.0,
            source_voltage_v: 1000.0,
            tap_ratio: 1.0,
            tap_schedule: vec![TapStep { time_s: 10.0, tap_ratio: 0.97 }, TapStep { time_s: 20.0, tap_ratio: 1.04 }],
            buses: vec![bus(1)],
            lines: vec![],
        };
        assert_eq!(cfg.tap_at(9.999), 1.0);
        assert_eq!(cfg.tap_at(10.0), 0.97);
        assert_eq!(cfg.tap_at(25.0), 1.04);
        let back = NetworkConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn injections_reject_unknown_bus() {
        let net = model(vec![bus(1), bus(2)], vec![line(1, 2)]).unwrap();
        assert!(Injections::from_si(&net, &[(BusId(9), 1.0, 0.0)]).is_err());
        let inj = Injections::from_si(&net, &[(BusId(2), 5e5, 0.0), (BusId(2), 5e5, 1e5)]).unwrap();
        assert_eq!(inj.p[1], 1.0);
        assert_eq!(inj.q[1], 0.1);
    }
}
