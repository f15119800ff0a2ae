//! Primal-dual coordination with cosine-similarity step-size tuning.
//!
//! The coordinator owns one [`ServiceController`] per grid service and turns
//! measurements into per-DER direction signals; each customer has a
//! [`LocalController`] that moves the set points of its DERs. Both estimate the next
//! update with the current step size, compare its direction with the last
//! committed move, adapt the step size, and then commit using the new one.
//!
//! Units: everything is per-unit. Duals carry 1/(measurement unit) and
//! sensitivities (measurement unit)/(power unit), so the signals `H` and the
//! cost gradients share units and sum across services.

use serde::{Deserialize, Serialize};

use crate::devices::{DerDevice, DeviceState};
use crate::error::{Error, Result};
use crate::network::{MeasurementId, SensitivityModel};
use crate::par::Execution;
use crate::services::DualState;

/// Norm below which a difference vector counts as zero.
pub const ZERO_NORM: f64 = 1e-12;
/// Adaptive step sizes stay within these multiples of their initial value.
pub const STEP_FLOOR_RATIO: f64 = 1e-6;
pub const STEP_CEIL_RATIO: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlgorithmParams {
    /// Primal regularization.
    pub nu: f64,
    /// Dual regularization.
    pub epsilon: f64,
    pub s_lower: f64,
    pub s_upper: f64,
    /// Common increase factor.
    pub gamma_up: f64,
    pub gamma_down_der: f64,
    pub gamma_down_voltage: f64,
    pub gamma_down_vpp: f64,
    /// Keep adaptive step sizes within `[1e-6, 1e6]` times their start.
    pub clamp_steps: bool,
}

impl Default for AlgorithmParams {
    fn default() -> Self {
        Self {
            nu: 1e-3,
            epsilon: 1e-4,
            s_lower: 0.0,
            s_upper: 0.9,
            gamma_up: 1.005,
            gamma_down_der: 0.95,
            gamma_down_voltage: 0.995,
            gamma_down_vpp: 0.5,
            clamp_steps: true,
        }
    }
}

impl AlgorithmParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if !(self.gamma_up > 1.0 && self.gamma_up.is_finite()) {
            return bad(format!("gamma_up must exceed 1, got {}", self.gamma_up));
        }
        for (name, g) in [
            ("gamma_down_der", self.gamma_down_der),
            ("gamma_down_voltage", self.gamma_down_voltage),
            ("gamma_down_vpp", self.gamma_down_vpp),
        ] {
            if !(g > 0.0 && g < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {g}"));
            }
        }
        if !(-1.0 <= self.s_lower && self.s_lower < self.s_upper && self.s_upper <= 1.0) {
            return bad(format!(
                "thresholds must satisfy -1 <= s_lower < s_upper <= 1, got {} and {}",
                self.s_lower, self.s_upper
            ));
        }
        // zero is allowed so that unregularized fixtures can be built
        if !(self.nu >= 0.0 && self.epsilon >= 0.0 && self.nu.is_finite() && self.epsilon.is_finite()) {
            return bad(format!("nu and epsilon must be >= 0, got {} and {}", self.nu, self.epsilon));
        }
        Ok(())
    }
}

/// `x1·x2 / (|x1||x2|)`, or 0 when either norm is below [`ZERO_NORM`].
pub fn cosine_similarity(x1: &[f64], x2: &[f64]) -> Result<f64> {
    if x1.len() != x2.len() {
        return Err(Error::Dimension(format!("cosine similarity of lengths {} and {}", x1.len(), x2.len())));
    }
    let n1 = x1.iter().map(|a| a * a).sum::<f64>().sqrt();
    let n2 = x2.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n1 < ZERO_NORM || n2 < ZERO_NORM {
        return Ok(0.0);
    }
    let dot: f64 = x1.iter().zip(x2).map(|(a, b)| a * b).sum();
    Ok((dot / (n1 * n2)).clamp(-1.0, 1.0))
}

/// Threshold rule: grow above `s_upper`, shrink below `s_lower`, hold in
/// between (boundaries included in the hold band).
pub fn adapt_step_size(s_old: f64, s_cos: f64, params: &AlgorithmParams, gamma_down: f64) -> f64 {
    if s_cos > params.s_upper {
        s_old * params.gamma_up
    } else if s_cos < params.s_lower {
        s_old * gamma_down
    } else {
        s_old
    }
}

/// A step size with its starting value and adaptation switch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSize {
    pub value: f64,
    pub initial: f64,
    /// `false` freezes the value (manual tuning).
    pub adaptive: bool,
}

impl StepSize {
    pub fn adaptive(initial: f64) -> Self {
        Self { value: initial, initial, adaptive: true }
    }

    pub fn fixed(value: f64) -> Self {
        Self { value, initial: value, adaptive: false }
    }

    /// Next value given the cosine similarity, or unchanged without history.
    pub fn next(&self, s_cos: Option<f64>, params: &AlgorithmParams, gamma_down: f64) -> f64 {
        match s_cos {
            Some(s) if self.adaptive => {
                let v = adapt_step_size(self.value, s, params, gamma_down);
                if params.clamp_steps {
                    v.clamp(STEP_FLOOR_RATIO * self.initial, STEP_CEIL_RATIO * self.initial)
                } else {
                    v
                }
            }
            _ => self.value,
        }
    }
}

/// Projected, regularized dual step for one measurement:
/// `(max(0, Dl + β(Gl - G - εDl)), max(0, Du + β(G - Gu - εDu)))`.
pub fn estimate_dual_update(d_lower: f64, d_upper: f64, g: f64, bounds: (f64, f64), beta: f64, epsilon: f64) -> (f64, f64) {
    let lo = (d_lower + beta * (bounds.0 - g - epsilon * d_lower)).max(0.0);
    let hi = (d_upper + beta * (g - bounds.1 - epsilon * d_upper)).max(0.0);
    (lo, hi)
}

/// Direction signals of one service, one entry per DER.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DirectionSignals {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl DirectionSignals {
    pub fn zeros(n: usize) -> Self {
        Self { p: vec![0.0; n], q: vec![0.0; n] }
    }
}

/// Linear model rows of one service: `dp[j][i] = dG_j / dP_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceGradient {
    pub dp: Vec<Vec<f64>>,
    pub dq: Vec<Vec<f64>>,
}

impl ServiceGradient {
    pub fn from_model(model: &SensitivityModel, measurements: &[MeasurementId]) -> Result<Self> {
        let mut dp = Vec::with_capacity(measurements.len());
        let mut dq = Vec::with_capacity(measurements.len());
        for m in measurements {
            let (a, b) = model.row(m)?;
            dp.push(a);
            dq.push(b);
        }
        Ok(Self { dp, dq })
    }

    /// Every row multiplied by `k`.
    pub fn scaled(mut self, k: f64) -> Self {
        for row in self.dp.iter_mut().chain(self.dq.iter_mut()) {
            row.iter_mut().for_each(|x| *x *= k);
        }
        self
    }

    pub fn measurement_count(&self) -> usize {
        self.dp.len()
    }

    pub fn der_count(&self) -> usize {
        self.dp.first().map_or(0, Vec::len)
    }
}

/// Coordinator state for one grid service.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceController {
    pub duals: DualState,
    pub beta: StepSize,
    pub gamma_down: f64,
    pub gradient: ServiceGradient,
    /// Cosine similarity used at the last step, if any.
    pub last_similarity: Option<f64>,
}

impl ServiceController {
    pub fn new(gradient: ServiceGradient, beta: StepSize, gamma_down: f64) -> Self {
        Self {
            duals: DualState::zeros(gradient.measurement_count()),
            beta,
            gamma_down,
            gradient,
            last_similarity: None,
        }
    }

    /// One coordinator update. `measurements` and `bounds` are per-unit.
    pub fn step(&mut self, measurements: &[f64], bounds: &[(f64, f64)], params: &AlgorithmParams) -> Result<DirectionSignals> {
        let n = self.duals.len();
        if measurements.len() != n || bounds.len() != n {
            return Err(Error::UnknownMeasurement(format!(
                "service expects {n} measurements and bounds, got {} and {}",
                measurements.len(),
                bounds.len()
            )));
        }
        if measurements.iter().any(|g| !g.is_finite()) {
            return Err(Error::Parameter("non-finite measurement".into()));
        }
        let d = &self.duals;
        let beta_old = self.beta.value;
        let estimate: Vec<(f64, f64)> = (0..n)
            .map(|j| estimate_dual_update(d.lower[j], d.upper[j], measurements[j], bounds[j], beta_old, params.epsilon))
            .collect();
        let s_cos = match &d.previous {
            Some((pl, pu)) => {
                let ahead: Vec<f64> = (0..n)
                    .map(|j| estimate[j].0 - d.lower[j])
                    .chain((0..n).map(|j| estimate[j].1 - d.upper[j]))
                    .collect();
                let behind: Vec<f64> = (0..n)
                    .map(|j| d.lower[j] - pl[j])
                    .chain((0..n).map(|j| d.upper[j] - pu[j]))
                    .collect();
                Some(cosine_similarity(&ahead, &behind)?)
            }
            None => None,
        };
        let beta_new = self.beta.next(s_cos, params, self.gamma_down);
        let (lower, upper): (Vec<f64>, Vec<f64>) = (0..n)
            .map(|j| estimate_dual_update(d.lower[j], d.upper[j], measurements[j], bounds[j], beta_new, params.epsilon))
            .unzip();

        let signals = direction_signals(&self.gradient, &lower, &upper);
        let previous = Some((std::mem::take(&mut self.duals.lower), std::mem::take(&mut self.duals.upper)));
        self.duals = DualState { lower, upper, previous };
        self.beta.value = beta_new;
        self.last_similarity = s_cos;
        Ok(signals)
    }
}

/// `H_i = Σ_j (Dl_j - Du_j) dG_j/dx_i`.
pub fn direction_signals(gradient: &ServiceGradient, lower: &[f64], upper: &[f64]) -> DirectionSignals {
    let n_der = gradient.der_count();
    let mut out = DirectionSignals::zeros(n_der);
    for (j, (dp, dq)) in gradient.dp.iter().zip(&gradient.dq).enumerate() {
        let w = lower[j] - upper[j];
        if w == 0.0 {
            continue;
        }
        for i in 0..n_der {
            out.p[i] += w * dp[i];
            out.q[i] += w * dq[i];
        }
    }
    out
}

/// Free-function form of [`ServiceController::step`].
pub fn coordinator_step(
    service: &mut ServiceController,
    measurements: &[f64],
    bounds: &[(f64, f64)],
    params: &AlgorithmParams,
) -> Result<DirectionSignals> {
    service.step(measurements, bounds, params)
}

/// Local controller of one customer. It usually sets a single DER; a PV
/// inverter and a battery behind the same meter share one controller, one
/// step size and one cosine similarity over their stacked moves.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalController {
    pub alpha: StepSize,
    pub gamma_down: f64,
    /// Fleet indices of the DERs this controller sets. Empty means "the DER
    /// at this controller's own position" when handed to [`ControlSystem`].
    pub members: Vec<usize>,
    /// Member set points before the last committed update.
    pub previous: Option<Vec<(f64, f64)>>,
    pub last_similarity: Option<f64>,
}

impl LocalController {
    pub fn new(alpha: StepSize, gamma_down: f64) -> Self {
        Self { alpha, gamma_down, members: Vec::new(), previous: None, last_similarity: None }
    }

    pub fn with_members(alpha: StepSize, gamma_down: f64, members: Vec<usize>) -> Self {
        Self { members, ..Self::new(alpha, gamma_down) }
    }

    /// One primal update; `signal` is `(Σ_k H^P, Σ_k H^Q)` for this DER.
    pub fn step(&mut self, device: &DerDevice, state: &mut DeviceState, signal: (f64, f64), params: &AlgorithmParams) -> Result<()> {
        self.step_group(&[device], std::slice::from_mut(state), &[signal], params)
    }

    /// One primal update of every member with the shared step size.
    pub fn step_group(
        &mut self,
        devices: &[&DerDevice],
        states: &mut [DeviceState],
        signals: &[(f64, f64)],
        params: &AlgorithmParams,
    ) -> Result<()> {
        let n = devices.len();
        if states.len() != n || signals.len() != n {
            return Err(Error::Dimension(format!(
                "local controller got {n} devices, {} states and {} signals",
                states.len(),
                signals.len()
            )));
        }
        let mut dirs = Vec::with_capacity(n);
        for ((dev, st), h) in devices.iter().zip(states.iter()).zip(signals) {
            let (gp, gq) = dev.cost_gradient(st);
            let dp = gp - h.0 + params.nu * st.p;
            let dq = if dev.has_q() { gq - h.1 + params.nu * st.q } else { 0.0 };
            if !(dp.is_finite() && dq.is_finite()) {
                return Err(Error::Parameter("non-finite primal direction".into()));
            }
            dirs.push((dp, dq));
        }
        let commit = |alpha: f64| -> Result<Vec<(f64, f64)>> {
            devices
                .iter()
                .zip(states.iter())
                .zip(&dirs)
                .map(|((dev, st), d)| dev.project(st.p - alpha * d.0, st.q - alpha * d.1, st))
                .collect()
        };

        let estimate = commit(self.alpha.value)?;
        let s_cos = match &self.previous {
            Some(prev) if prev.len() == n => {
                let mut ahead = Vec::with_capacity(2 * n);
                let mut behind = Vec::with_capacity(2 * n);
                for (((dev, st), e), pr) in devices.iter().zip(states.iter()).zip(&estimate).zip(prev) {
                    ahead.push(e.0 - st.p);
                    behind.push(st.p - pr.0);
                    if dev.has_q() {
                        ahead.push(e.1 - st.q);
                        behind.push(st.q - pr.1);
                    }
                }
                Some(cosine_similarity(&ahead, &behind)?)
            }
            _ => None,
        };
        let alpha_new = self.alpha.next(s_cos, params, self.gamma_down);
        let next = commit(alpha_new)?;

        self.previous = Some(states.iter().map(|s| (s.p, s.q)).collect());
        for (st, (p, q)) in states.iter_mut().zip(next) {
            st.p = p;
            st.q = q;
        }
        self.alpha.value = alpha_new;
        self.last_similarity = s_cos;
        Ok(())
    }
}

/// Free-function form of [`LocalController::step`].
pub fn local_controller_step(
    controller: &mut LocalController,
    device: &DerDevice,
    state: &mut DeviceState,
    signals: &[(f64, f64)],
    params: &AlgorithmParams,
) -> Result<()> {
    let total = signals.iter().fold((0.0, 0.0), |acc, s| (acc.0 + s.0, acc.1 + s.1));
    controller.step(device, state, total, params)
}

/// Outcome of one control tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TickSignals {
    /// Per service, per DER.
    pub per_service: Vec<DirectionSignals>,
}

/// Coordinator plus local controllers, advanced in lockstep.
#[derive(Debug, Clone)]
pub struct ControlSystem {
    pub services: Vec<ServiceController>,
    pub locals: Vec<LocalController>,
    pub params: AlgorithmParams,
    pub exec: Execution,
}

impl ControlSystem {
    /// Controllers without members take the DER at their own position; every
    /// DER must end up with exactly one controller.
    pub fn new(services: Vec<ServiceController>, mut locals: Vec<LocalController>, params: AlgorithmParams) -> Result<Self> {
        params.validate()?;
        for (i, c) in locals.iter_mut().enumerate() {
            if c.members.is_empty() {
                c.members.push(i);
            }
        }
        let n_der = locals.iter().map(|c| c.members.len()).sum::<usize>();
        let mut seen = vec![false; n_der];
        for &i in locals.iter().flat_map(|c| &c.members) {
            if i >= n_der || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Dimension(format!("DER {i} is not assigned to exactly one local controller")));
            }
        }
        for s in &services {
            if s.gradient.der_count() != n_der {
                return Err(Error::Dimension(format!(
                    "service model has {} DER columns, local controllers cover {n_der}",
                    s.gradient.der_count()
                )));
            }
        }
        Ok(Self { services, locals, params, exec: Execution::Sequential })
    }

    pub fn der_count(&self) -> usize {
        self.locals.iter().map(|c| c.members.len()).sum()
    }

    /// Step size in force for every DER, in fleet order.
    pub fn der_alphas(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.der_count()];
        for c in &self.locals {
            for &i in &c.members {
                out[i] = c.alpha.value;
            }
        }
        out
    }

    /// Coordinator for every service, then every local controller. Devices
    /// and states are per-unit. Nothing is committed if any step fails.
    pub fn tick(
        &mut self,
        measurements: &[Vec<f64>],
        bounds: &[Vec<(f64, f64)>],
        devices: &[DerDevice],
        states: &mut [DeviceState],
    ) -> Result<TickSignals> {
        if measurements.len() != self.services.len() || bounds.len() != self.services.len() {
            return Err(Error::Dimension("one measurement vector per service is required".into()));
        }
        let n_der = self.der_count();
        if devices.len() != n_der || states.len() != n_der {
            return Err(Error::Dimension(format!(
                "{n_der} DERs are controlled, got {} devices and {} states",
                devices.len(),
                states.len()
            )));
        }
        let mut services = self.services.clone();
        let per_service = services
            .iter_mut()
            .zip(measurements.iter().zip(bounds))
            .map(|(s, (g, b))| s.step(g, b, &self.params))
            .collect::<Result<Vec<_>>>()?;

        let totals: Vec<(f64, f64)> = (0..n_der)
            .map(|i| per_service.iter().fold((0.0, 0.0), |acc, h| (acc.0 + h.p[i], acc.1 + h.q[i])))
            .collect();
        let params = &self.params;
        let mut work: Vec<(LocalController, Vec<DeviceState>, Result<()>)> = self
            .locals
            .iter()
            .map(|c| (c.clone(), c.members.iter().map(|&i| states[i]).collect(), Ok(())))
            .collect();
        self.exec.for_each_mut(&mut work, |_, (c, s, r)| {
            let devs: Vec<&DerDevice> = c.members.iter().map(|&i| &devices[i]).collect();
            let sig: Vec<(f64, f64)> = c.members.iter().map(|&i| totals[i]).collect();
            *r = c.step_group(&devs, s, &sig, params);
        });
        for (_, _, r) in &work {
            if let Err(e) = r {
                return Err(Error::Parameter(format!("local controller failed: {e}")));
            }
        }
        for (k, (c, s, _)) in work.into_iter().enumerate() {
            for (&i, st) in c.members.iter().zip(s) {
                states[i] = st;
            }
            self.locals[k] = c;
        }
        self.services = services;
        Ok(TickSignals { per_service })
    }
}
