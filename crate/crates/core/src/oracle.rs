//! Centralized reference solver for tiny instances.
//!
//! The controller tracks the saddle point of
//!
//! ```text
//! L(x, λ) = Σ f_i(x_i) + ν/2 |x|² + Σ_j λl_j (lo_j - g_j(x)) + λu_j (g_j(x) - hi_j) - ε/2 |λ|²
//! ```
//!
//! over the device feasible sets and `λ >= 0`, with `g` the linear model.
//! For `ε > 0` the inner maximization has the closed form `λ = max(0, c)/ε`
//! and what remains is a smooth convex minimization, solved here with an
//! accelerated projected gradient. For `ε = 0` the same inner solver runs
//! inside a proximal method of multipliers. Neither shares code with the
//! controller's iteration, only the device models and projections.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::{AlgorithmParams, ControlSystem, LocalController, ServiceController, ServiceGradient, StepSize};
use crate::devices::{DerDevice, DeviceState};
use crate::error::{Error, Result};
use crate::devices::{BatteryParams, PvParams};
use crate::network::{build_sensitivities_with, measure, solve_power_flow, BusId, Injections, LinearizationSpec, MeasurementId, SensitivityModel};
use crate::sim::catalog::{desk_feeder, RAISED_TAP};

pub const MAX_DERS: usize = 3;
pub const MAX_MEASUREMENTS: usize = 4;
/// Target for the KKT residual of a returned point.
pub const KKT_TOL: f64 = 1e-8;
pub const MAX_ITERATIONS: usize = 1_000_000;
/// Baseline initial DER step size for tracking runs.
pub const TRACKING_ALPHA0: f64 = 10.0;
/// Baseline initial service step size for tracking runs. A hundredfold
/// increase must keep `β ε < 1`, past `2/ε` the regularized dual recursion
/// alternates without settling.
pub const TRACKING_BETA0: f64 = 100.0;

/// A static instance of the regularized problem, per-unit throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralInstance {
    pub ders: Vec<DerDevice>,
    /// Battery SOC in percent, one entry per DER (ignored for PV). Empty
    /// puts every battery at its preferred SOC.
    #[serde(default)]
    pub soc: Vec<f64>,
    /// `dp[j][i] = dg_j / dP_i`.
    pub dp: Vec<Vec<f64>>,
    pub dq: Vec<Vec<f64>>,
    /// `g_j` at zero injection.
    pub offset: Vec<f64>,
    pub bounds: Vec<(f64, f64)>,
    #[serde(default)]
    pub nu: f64,
    #[serde(default)]
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralSolution {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub dual_lower: Vec<f64>,
    pub dual_upper: Vec<f64>,
    /// `L(x*, λ*)`.
    pub value: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl CentralInstance {
    /// Instance whose linear model is the frozen controller model restricted
    /// to `measurements`. `values` are the measurements at the model's
    /// linearization point.
    #[allow(clippy::too_many_arguments)]
    pub fn from_sensitivities(
        model: &SensitivityModel,
        measurements: &[MeasurementId],
        values: &[f64],
        ders: Vec<DerDevice>,
        soc: Vec<f64>,
        bounds: Vec<(f64, f64)>,
        nu: f64,
        epsilon: f64,
    ) -> Result<Self> {
        if values.len() != measurements.len() {
            return Err(Error::Dimension("one value per measurement is required".into()));
        }
        let grad = ServiceGradient::from_model(model, measurements)?;
        let offset = (0..measurements.len())
            .map(|j| {
                let at_point: f64 = model
                    .linearization_point
                    .iter()
                    .enumerate()
                    .map(|(i, &(p, q))| grad.dp[j][i] * p + grad.dq[j][i] * q)
                    .sum();
                values[j] - at_point
            })
            .collect();
        let inst = Self { ders, soc, dp: grad.dp, dq: grad.dq, offset, bounds, nu, epsilon };
        inst.validate()?;
        Ok(inst)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let inst: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        inst.validate()?;
        Ok(inst)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ders.len();
        let m = self.offset.len();
        if n == 0 || n > MAX_DERS {
            return Err(Error::Parameter(format!("oracle instances take 1 to {MAX_DERS} DERs, got {n}")));
        }
        if m == 0 || m > MAX_MEASUREMENTS {
            return Err(Error::Parameter(format!("oracle instances take 1 to {MAX_MEASUREMENTS} measurements, got {m}")));
        }
        if self.dp.len() != m || self.dq.len() != m || self.bounds.len() != m {
            return Err(Error::Dimension("dp, dq, offset and bounds need one entry per measurement".into()));
        }
        if self.dp.iter().chain(&self.dq).any(|r| r.len() != n) {
            return Err(Error::Dimension(format!("model rows need {n} entries")));
        }
        if !self.soc.is_empty() && self.soc.len() != n {
            return Err(Error::Dimension("soc needs one entry per DER".into()));
        }
        let finite = self.dp.iter().chain(&self.dq).flatten().chain(&self.offset).all(|x| x.is_finite());
        if !finite {
            return Err(Error::Parameter("model entries must be finite".into()));
        }
        for &(lo, hi) in &self.bounds {
            if !(lo <= hi) {
                return Err(Error::Parameter(format!("bounds ({lo}, {hi}) are not ordered")));
            }
        }
        if !(self.nu >= 0.0 && self.epsilon >= 0.0 && self.nu.is_finite() && self.epsilon.is_finite()) {
            return Err(Error::Parameter("nu and epsilon must be finite and >= 0".into()));
        }
        for d in &self.ders {
            d.validate()?;
        }
        Ok(())
    }

    pub fn der_count(&self) -> usize {
        self.ders.len()
    }

    pub fn measurement_count(&self) -> usize {
        self.offset.len()
    }

    /// State carrying each DER's SOC, at zero injection.
    pub fn states(&self) -> Vec<DeviceState> {
        self.ders
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let soc = match d {
                    DerDevice::Battery(b) => self.soc.get(i).copied().unwrap_or(b.soc_pref),
                    DerDevice::Pv(_) => 0.0,
                };
                DeviceState { p: 0.0, q: 0.0, soc }
            })
            .collect()
    }

    /// Linear model value of every measurement.
    pub fn measure(&self, p: &[f64], q: &[f64]) -> Vec<f64> {
        (0..self.measurement_count())
            .map(|j| {
                self.offset[j]
                    + self.dp[j].iter().zip(p).map(|(a, x)| a * x).sum::<f64>()
                    + self.dq[j].iter().zip(q).map(|(a, x)| a * x).sum::<f64>()
            })
            .collect()
    }

    fn cost(&self, states: &[DeviceState], p: &[f64], q: &[f64]) -> f64 {
        self.ders
            .iter()
            .zip(states)
            .enumerate()
            .map(|(i, (d, s))| {
                let st = DeviceState { p: p[i], q: q[i], soc: s.soc };
                d.cost(&st) + 0.5 * self.nu * (p[i] * p[i] + q[i] * q[i])
            })
            .sum()
    }

    /// `L(x, λ)`.
    pub fn lagrangian(&self, p: &[f64], q: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
        let g = self.measure(p, q);
        let mut v = self.cost(&self.states(), p, q);
        for j in 0..g.len() {
            let (lo, hi) = self.bounds[j];
            v += lower[j] * (lo - g[j]) + upper[j] * (g[j] - hi);
            v -= 0.5 * self.epsilon * (lower[j] * lower[j] + upper[j] * upper[j]);
        }
        v
    }

    /// `max` of the primal and dual fixed-point residuals at unit step:
    /// `|x - P(x - ∇x L)|` and `|λ - max(0, λ + ∇λ L)|`.
    pub fn kkt_residual(&self, p: &[f64], q: &[f64], lower: &[f64], upper: &[f64]) -> Result<f64> {
        let states = self.states();
        let g = self.measure(p, q);
        let mut r: f64 = 0.0;
        for j in 0..g.len() {
            let (lo, hi) = self.bounds[j];
            let dl = (lower[j] + lo - g[j] - self.epsilon * lower[j]).max(0.0);
            let du = (upper[j] + g[j] - hi - self.epsilon * upper[j]).max(0.0);
            r = r.max((dl - lower[j]).abs()).max((du - upper[j]).abs());
        }
        for (i, d) in self.ders.iter().enumerate() {
            let (gp, gq) = self.gradient_at(i, d, &states[i], p[i], q[i], lower, upper);
            let (pp, pq) = d.project(p[i] - gp, q[i] - gq, &states[i])?;
            r = r.max((pp - p[i]).abs()).max((pq - q[i]).abs());
        }
        Ok(r)
    }

    #[allow(clippy::too_many_arguments)]
    fn gradient_at(&self, i: usize, d: &DerDevice, s: &DeviceState, p: f64, q: f64, lower: &[f64], upper: &[f64]) -> (f64, f64) {
        let (mut gp, mut gq) = d.cost_gradient(&DeviceState { p, q, soc: s.soc });
        gp += self.nu * p;
        gq += self.nu * q;
        for j in 0..self.measurement_count() {
            let w = upper[j] - lower[j];
            gp += w * self.dp[j][i];
            gq += w * self.dq[j][i];
        }
        if !d.has_q() {
            gq = 0.0;
        }
        (gp, gq)
    }
}

/// Inner maximizer over one multiplier of
/// `λ c - ε/2 λ² - (λ - μ)²/(2ρ)`; `ρ = ∞` drops the proximal term.
fn best_multiplier(c: f64, mu: f64, rho: f64, epsilon: f64) -> f64 {
    if rho.is_infinite() {
        (c / epsilon).max(0.0)
    } else {
        ((mu + rho * c) / (1.0 + rho * epsilon)).max(0.0)
    }
}

fn multiplier_value(c: f64, mu: f64, rho: f64, epsilon: f64) -> f64 {
    let l = best_multiplier(c, mu, rho, epsilon);
    let prox = if rho.is_infinite() { 0.0 } else { (l - mu) * (l - mu) / (2.0 * rho) };
    l * c - 0.5 * epsilon * l * l - prox
}

/// Smooth primal function of one outer iteration.
struct Reduced<'a> {
    inst: &'a CentralInstance,
    states: Vec<DeviceState>,
    mu_lower: Vec<f64>,
    mu_upper: Vec<f64>,
    rho: f64,
}

impl Reduced<'_> {
    /// Multipliers maximizing the inner problem at `x`.
    fn multipliers(&self, x: &[(f64, f64)]) -> (Vec<f64>, Vec<f64>) {
        let (p, q): (Vec<f64>, Vec<f64>) = x.iter().copied().unzip();
        let g = self.inst.measure(&p, &q);
        let eps = self.inst.epsilon;
        let lower = (0..g.len()).map(|j| best_multiplier(self.inst.bounds[j].0 - g[j], self.mu_lower[j], self.rho, eps)).collect();
        let upper = (0..g.len()).map(|j| best_multiplier(g[j] - self.inst.bounds[j].1, self.mu_upper[j], self.rho, eps)).collect();
        (lower, upper)
    }

    fn value(&self, x: &[(f64, f64)]) -> f64 {
        let (p, q): (Vec<f64>, Vec<f64>) = x.iter().copied().unzip();
        let g = self.inst.measure(&p, &q);
        let eps = self.inst.epsilon;
        let mut v = self.inst.cost(&self.states, &p, &q);
        for j in 0..g.len() {
            let (lo, hi) = self.inst.bounds[j];
            v += multiplier_value(lo - g[j], self.mu_lower[j], self.rho, eps);
            v += multiplier_value(g[j] - hi, self.mu_upper[j], self.rho, eps);
        }
        v
    }

    fn gradient(&self, x: &[(f64, f64)]) -> Vec<(f64, f64)> {
        let (lower, upper) = self.multipliers(x);
        self.inst
            .ders
            .iter()
            .enumerate()
            .map(|(i, d)| self.inst.gradient_at(i, d, &self.states[i], x[i].0, x[i].1, &lower, &upper))
            .collect()
    }

    fn project(&self, x: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
        self.inst.ders.iter().zip(&self.states).zip(x).map(|((d, s), &(p, q))| d.project(p, q, s)).collect()
    }
}

fn dot(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u.0 * v.0 + u.1 * v.1).sum()
}

fn sub(a: &[(f64, f64)], b: &[(f64, f64)]) -> Vec<(f64, f64)> {
    a.iter().zip(b).map(|(u, v)| (u.0 - v.0, u.1 - v.1)).collect()
}

fn norm2(a: &[(f64, f64)]) -> f64 {
    dot(a, a).sqrt()
}

fn norm_inf(a: &[(f64, f64)]) -> f64 {
    a.iter().fold(0.0f64, |m, u| m.max(u.0.abs()).max(u.1.abs()))
}

/// FISTA with a gradient-based Lipschitz search and gradient restart.
/// Stops when the projected-gradient residual at `x` falls below `tol`.
/// Function values are never compared, they are too flat near the optimum.
fn minimize(f: &Reduced<'_>, start: Vec<(f64, f64)>, tol: f64, budget: usize) -> Result<(Vec<(f64, f64)>, usize)> {
    let mut x = f.project(&start)?;
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut lip = 1.0f64;
    let mut used = 0;
    while used < budget {
        used += 1;
        let gy = f.gradient(&y);
        let x_new = loop {
            let trial: Vec<(f64, f64)> = y.iter().zip(&gy).map(|(a, g)| (a.0 - g.0 / lip, a.1 - g.1 / lip)).collect();
            let trial = f.project(&trial)?;
            let d = norm2(&sub(&trial, &y));
            let dg = norm2(&sub(&f.gradient(&trial), &gy));
            if dg <= lip * d * (1.0 + 1e-9) || lip > 1e30 {
                break trial;
            }
            lip = (2.0 * lip).max(dg / d);
        };
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let step = sub(&x_new, &x);
        if dot(&sub(&y, &x_new), &step) > 0.0 {
            t = 1.0;
            y = x_new.clone();
        } else {
            y = x_new.iter().zip(&step).map(|(a, s)| (a.0 + (t - 1.0) / t_new * s.0, a.1 + (t - 1.0) / t_new * s.1)).collect();
            t = t_new;
        }
        x = x_new;
        let gx = f.gradient(&x);
        let pg: Vec<(f64, f64)> = x.iter().zip(&gx).map(|(a, g)| (a.0 - g.0 / lip, a.1 - g.1 / lip)).collect();
        if norm_inf(&sub(&f.project(&pg)?, &x)) * lip < tol {
            break;
        }
    }
    Ok((x, used))
}

/// Solve the regularized saddle-point problem to a KKT residual below
/// [`KKT_TOL`].
pub fn solve_central(inst: &CentralInstance) -> Result<CentralSolution> {
    inst.validate()?;
    let states = inst.states();
    let n = inst.der_count();
    let m = inst.measurement_count();
    let model_scale = inst.dp.iter().chain(&inst.dq).flatten().map(|a| a * a).sum::<f64>().max(1e-12);
    let rho = if inst.epsilon > 0.0 { f64::INFINITY } else { 1e4 / model_scale };

    let mut x: Vec<(f64, f64)> = inst
        .ders
        .iter()
        .map(|d| match d {
            DerDevice::Pv(pv) => (pv.p_avail, 0.0),
            DerDevice::Battery(_) => (0.0, 0.0),
        })
        .collect();
    let mut reduced = Reduced { inst, states, mu_lower: vec![0.0; m], mu_upper: vec![0.0; m], rho };
    let mut iterations = 0;
    let mut inner_tol = if rho.is_infinite() { 0.1 * KKT_TOL } else { 1e-6 };
    let mut best: Option<CentralSolution> = None;
    while iterations < MAX_ITERATIONS {
        let (xn, used) = minimize(&reduced, x, inner_tol, MAX_ITERATIONS - iterations)?;
        iterations += used;
        x = xn;
        let (lower, upper) = reduced.multipliers(&x);
        let (p, q): (Vec<f64>, Vec<f64>) = x.iter().copied().unzip();
        let kkt = inst.kkt_residual(&p, &q, &lower, &upper)?;
        let sol = CentralSolution {
            value: inst.lagrangian(&p, &q, &lower, &upper),
            p,
            q,
            dual_lower: lower.clone(),
            dual_upper: upper.clone(),
            kkt_residual: kkt,
            iterations,
        };
        if kkt < KKT_TOL {
            return Ok(sol);
        }
        if best.as_ref().is_none_or(|b| kkt < b.kkt_residual) {
            best = Some(sol);
        }
        if rho.is_finite() {
            reduced.mu_lower = lower;
            reduced.mu_upper = upper;
        }
        if rho.is_infinite() && inner_tol <= 1e-14 {
            break;
        }
        inner_tol = (inner_tol * 0.1).max(1e-14);
    }
    let r = best.map_or(f64::NAN, |b| b.kkt_residual);
    Err(Error::OracleNonConvergence(format!("KKT residual {r:.3e} after {iterations} iterations ({n} DERs)")))
}

/// Brute-force minimizer of the reduced function for a single DER: a grid
/// of `cells` steps over each variable's range. With `ε = 0` the bounds are
/// enforced as hard constraints on the grid instead.
pub fn grid_search(inst: &CentralInstance, cells: usize) -> Result<(f64, f64, f64)> {
    inst.validate()?;
    if inst.der_count() != 1 {
        return Err(Error::Parameter("grid search takes single-DER instances".into()));
    }
    let states = inst.states();
    let d = &inst.ders[0];
    let s = &states[0];
    let (p_lo, p_hi, q_lo, q_hi) = match d {
        DerDevice::Pv(pv) => (0.0, pv.p_avail, -pv.inv_rating, pv.inv_rating),
        DerDevice::Battery(b) => {
            let (lo, hi) = b.power_limits(s.soc);
            (lo, hi, 0.0, 0.0)
        }
    };
    let m = inst.measurement_count();
    let f = Reduced { inst, states: states.clone(), mu_lower: vec![0.0; m], mu_upper: vec![0.0; m], rho: f64::INFINITY };
    let q_cells = if q_hi > q_lo { cells } else { 0 };
    let mut best = (f64::NAN, f64::NAN, f64::INFINITY);
    for a in 0..=cells {
        let p = p_lo + (p_hi - p_lo) * a as f64 / cells as f64;
        for b in 0..=q_cells {
            let q = if q_cells == 0 { 0.0 } else { q_lo + (q_hi - q_lo) * b as f64 / q_cells as f64 };
            if !d.is_feasible(p, q, s, 1e-12) {
                continue;
            }
            let v = if inst.epsilon > 0.0 {
                f.value(&[(p, q)])
            } else {
                let g = inst.measure(&[p], &[q]);
                if g.iter().zip(&inst.bounds).any(|(g, &(lo, hi))| *g < lo || *g > hi) {
                    continue;
                }
                inst.cost(&states, &[p], &[q])
            };
            if v < best.2 {
                best = (p, q, v);
            }
        }
    }
    if best.2.is_infinite() {
        return Err(Error::Parameter("no feasible grid point".into()));
    }
    Ok(best)
}

/// Outcome of running the controller against the linear model.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracking {
    /// First tick at which every injection was within the tolerance.
    pub ticks: Option<usize>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: f64,
}

/// Two PVs and a battery on the desk feeder at the raised tap, with the
/// voltage measured at their buses (6, 10 and 11) and bounded to
/// `[0.95, v_upper]`. Powers in kW, the battery at 60 % SOC with a
/// 15-minute interval.
pub fn desk_instance(v_upper: f64) -> Result<CentralInstance> {
    let mut net = desk_feeder().build()?;
    net.set_tap_ratio(RAISED_TAP)?;
    let buses: Vec<BusId> = [6, 10, 11].map(BusId).to_vec();
    let spec = LinearizationSpec { voltage_buses: buses.clone(), power_buses: vec![], der_buses: buses.clone(), der_injections: vec![] };
    let model = build_sensitivities_with(&net, &spec)?;
    let ids: Vec<MeasurementId> = buses.iter().map(|&b| MeasurementId::Voltage(b)).collect();
    let pf = solve_power_flow(&net, &Injections::zeros(&net))?;
    let values = measure(&net, &pf, &ids)?;
    let ders = vec![
        DerDevice::Pv(PvParams { inv_rating: 12.0, p_avail: 11.0 }),
        DerDevice::Pv(PvParams { inv_rating: 8.0, p_avail: 7.5 }),
        DerDevice::Battery(BatteryParams::new(13.5, 5.0, 5.0, 0.25)),
    ];
    CentralInstance::from_sensitivities(&model, &ids, &values, ders, vec![0.0, 0.0, 60.0], vec![(0.95, v_upper); 3], 1e-3, 1e-4)
}

/// Adaptive controller on a plant that is the instance's own linear model.
/// All measurements form one service; every DER has its own controller.
/// PV starts at its available power, batteries at zero.
pub fn track_controller(
    inst: &CentralInstance,
    target: &CentralSolution,
    alpha0: f64,
    beta0: f64,
    params: &AlgorithmParams,
    max_ticks: usize,
    tol: f64,
) -> Result<Tracking> {
    inst.validate()?;
    let gradient = ServiceGradient { dp: inst.dp.clone(), dq: inst.dq.clone() };
    let service = ServiceController::new(gradient, StepSize::adaptive(beta0), params.gamma_down_voltage);
    let locals = inst.ders.iter().map(|_| LocalController::new(StepSize::adaptive(alpha0), params.gamma_down_der)).collect();
    let mut control = ControlSystem::new(vec![service], locals, params.clone())?;
    let mut states = inst.states();
    for (s, d) in states.iter_mut().zip(&inst.ders) {
        if let DerDevice::Pv(pv) = d {
            s.p = pv.p_avail;
        }
    }
    let close = |st: &[DeviceState]| {
        st.iter().zip(&target.p).zip(&target.q).all(|((s, p), q)| (s.p - p).abs() <= tol && (s.q - q).abs() <= tol)
    };
    let mut hit = None;
    for k in 1..=max_ticks {
        let p: Vec<f64> = states.iter().map(|s| s.p).collect();
        let q: Vec<f64> = states.iter().map(|s| s.q).collect();
        let g = inst.measure(&p, &q);
        control.tick(&[g], std::slice::from_ref(&inst.bounds), &inst.ders, &mut states)?;
        if close(&states) {
            hit = Some(k);
            break;
        }
    }
    Ok(Tracking {
        ticks: hit,
        p: states.iter().map(|s| s.p).collect(),
        q: states.iter().map(|s| s.q).collect(),
        alpha: control.der_alphas(),
        beta: control.services[0].beta.value,
    })
}
