use std::collections::BTreeMap;

use crate::control::{ControlSystem, LocalController, ServiceController, ServiceGradient, StepSize};
use crate::devices::{step_soc, DerDevice, DeviceState};
use crate::error::{Error, Result};
use crate::network::{build_sensitivities_with, measure, solve_power_flow, Injections, LinearizationSpec, MeasurementId, NetworkModel, SensitivityModel};
use crate::par::Execution;
use crate::profiles::Profile;

use super::scenario::{DeviceKind, Mode, Scenario};
use super::trajectory::{DerInfo, InvariantCounts, ServiceInfo, TickRecord, Trajectory};

/// Tolerance for the per-tick feasibility check, per-unit.
const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// How local controllers run inside a tick.
    pub within_tick: Option<Execution>,
}

/// Run a scenario to its horizon.
pub fn run(scenario: &Scenario) -> Result<Trajectory> {
    run_with(scenario, RunOptions::default())
}

pub fn run_with(scenario: &Scenario, options: RunOptions) -> Result<Trajectory> {
    scenario.validate()?;
    let mut engine = Engine::new(scenario)?;
    if let Some(e) = options.within_tick {
        engine.control.exec = e;
    }
    engine.run()
}

/// Run several scenarios, in parallel when `exec` allows it.
pub fn run_batch(scenarios: &[Scenario], exec: Execution) -> Vec<Result<Trajectory>> {
    exec.map(scenarios, run)
}

fn linearization_spec(net: &NetworkModel, scenario: &Scenario) -> LinearizationSpec {
    let mut voltage_buses = Vec::new();
    let mut power_buses = Vec::new();
    for s in &scenario.services {
        for m in &s.measurements {
            match *m {
                MeasurementId::Voltage(b) if !voltage_buses.contains(&b) => voltage_buses.push(b),
                MeasurementId::Power(b) if !power_buses.contains(&b) => power_buses.push(b),
                _ => {}
            }
        }
    }
    if power_buses.is_empty() {
        power_buses.push(net.root_id());
    }
    LinearizationSpec {
        voltage_buses,
        power_buses,
        der_buses: scenario.devices.iter().map(|d| d.bus).collect(),
        der_injections: Vec::new(),
    }
}

fn gradients(model: &SensitivityModel, scenario: &Scenario, base: f64) -> Result<Vec<ServiceGradient>> {
    scenario
        .services
        .iter()
        .map(|s| Ok(ServiceGradient::from_model(model, &s.measurements)?.scaled(s.sensitivity_scale(base))))
        .collect()
}

struct Engine<'a> {
    sc: &'a Scenario,
    cfg_tap: crate::network::NetworkConfig,
    net: NetworkModel,
    nominal_loads: Vec<(crate::network::BusId, f64, f64)>,
    profiles: BTreeMap<String, Profile>,
    services: Vec<crate::services::GridService>,
    control: ControlSystem,
    states: Vec<DeviceState>,
    base: f64,
}

impl<'a> Engine<'a> {
    fn new(sc: &'a Scenario) -> Result<Self> {
        let cfg = sc.network_config()?;
        let mut net = cfg.build()?;
        net.set_tap_ratio(cfg.tap_at(0.0))?;
        let base = net.base_power_w;
        let nominal_loads = net.buses().iter().map(|b| (b.id, b.load_p_w, b.load_q_var)).collect();
        let profiles = sc.build_profiles()?;

        let model = build_sensitivities_with(&net, &linearization_spec(&net, sc))?;
        let grads = gradients(&model, sc, base)?;
        let step = |s0: f64| match sc.mode {
            Mode::Adaptive => StepSize::adaptive(s0),
            Mode::Manual => StepSize::fixed(sc.manual_step.unwrap_or(s0)),
        };
        let service_ctrls = sc
            .services
            .iter()
            .zip(grads)
            .map(|(s, g)| ServiceController::new(g, step(s.beta0), sc.service_gamma_down(s)))
            .collect();
        let locals = sc
            .controller_groups()
            .into_iter()
            .map(|g| {
                let d = &sc.devices[g[0]];
                LocalController::with_members(step(d.alpha0), sc.device_gamma_down(d), g)
            })
            .collect();
        let control = ControlSystem::new(service_ctrls, locals, sc.params.clone())?;

        let mut services = sc.services.clone();
        for s in &mut services {
            s.horizon_s = sc.horizon_s;
        }
        let mut engine = Self { sc, cfg_tap: cfg, net, nominal_loads, profiles, services, control, states: Vec::new(), base };
        let devices = engine.devices_pu(0.0);
        engine.states = sc
            .devices
            .iter()
            .zip(&devices)
            .map(|(d, dev)| match dev {
                DerDevice::Pv(pv) => DeviceState::new(pv.p_avail, 0.0),
                DerDevice::Battery(_) => DeviceState::with_soc(0.0, d.initial_soc()),
            })
            .collect();
        Ok(engine)
    }

    fn availability(&self, name: &Option<String>, t: f64) -> f64 {
        name.as_ref().and_then(|n| self.profiles.get(n)).map_or(1.0, |p| p.at(t))
    }

    fn devices_pu(&self, t: f64) -> Vec<DerDevice> {
        self.sc
            .devices
            .iter()
            .map(|d| {
                let avail = match &d.kind {
                    DeviceKind::Pv { availability, .. } => self.availability(availability, t),
                    DeviceKind::Battery { .. } => 1.0,
                };
                d.device(avail, self.sc.tick_s).scaled(1.0 / self.base)
            })
            .collect()
    }

    fn run(mut self) -> Result<Trajectory> {
        let sc = self.sc;
        let n_ticks = sc.tick_count();
        let mut traj = Trajectory {
            scenario_id: sc.id.clone(),
            mode: sc.mode,
            seed: sc.seed,
            tick_s: sc.tick_s,
            services: sc.services.iter().map(|s| ServiceInfo { id: s.id.clone(), measurements: s.measurements.clone() }).collect(),
            ders: sc.devices.iter().map(|d| DerInfo { id: d.id.clone(), kind: d.type_name().into() }).collect(),
            records: Vec::with_capacity(n_ticks + 1),
            aborted: None,
            invariants: InvariantCounts::default(),
        };

        for k in 0..=n_ticks {
            let t = k as f64 * sc.tick_s;

            // events
            let tap = self.cfg_tap.tap_at(t);
            if tap != self.net.tap_ratio() {
                self.net.set_tap_ratio(tap)?;
                if sc.rebuild_sensitivities_on_tap {
                    let model = build_sensitivities_with(&self.net, &linearization_spec(&self.net, sc))?;
                    for (c, g) in self.control.services.iter_mut().zip(gradients(&model, sc, self.base)?) {
                        c.gradient = g;
                    }
                }
            }
            let mult = self.availability(&sc.load_profile, t);
            for &(id, p, q) in &self.nominal_loads {
                self.net.set_load(id, p * mult, q * mult)?;
            }

            // the plant implements the set points within present limits
            let devices = self.devices_pu(t);
            for (st, dev) in self.states.iter_mut().zip(&devices) {
                let (p, q) = dev.project(st.p, st.q, st)?;
                st.p = p;
                st.q = q;
            }
            let mut inj = Injections::zeros(&self.net);
            for (d, st) in sc.devices.iter().zip(&self.states) {
                inj.add_pu(&self.net, d.bus, st.p, st.q)?;
            }
            let sol = solve_power_flow(&self.net, &inj)?;
            if !sol.converged {
                traj.aborted = Some(format!(
                    "plant power flow failed at t = {t} s: {}",
                    sol.diagnostic.clone().unwrap_or_else(|| format!("residual {:.3e}", sol.residual))
                ));
                break;
            }

            let mut values = Vec::with_capacity(self.services.len());
            let mut bounds = Vec::with_capacity(self.services.len());
            let mut values_pu = Vec::with_capacity(self.services.len());
            let mut bounds_pu = Vec::with_capacity(self.services.len());
            for s in &self.services {
                let v = measure(&self.net, &sol, &s.measurements)?;
                let b = s.bounds_at(t)?;
                let scale = s.unit_scale(self.base);
                values_pu.push(v.iter().map(|x| x / scale).collect::<Vec<_>>());
                bounds_pu.push(b.iter().map(|&(lo, hi)| (lo / scale, hi / scale)).collect::<Vec<_>>());
                values.push(v);
                bounds.push(b);
            }
            let implemented = self.states.clone();

            let signals = match self.control.tick(&values_pu, &bounds_pu, &devices, &mut self.states) {
                Ok(s) => s,
                Err(e) => {
                    traj.aborted = Some(format!("controller failed at t = {t} s: {e}"));
                    break;
                }
            };

            for ((st, dev), before) in self.states.iter_mut().zip(&devices).zip(&implemented) {
                if !dev.is_feasible(st.p, st.q, before, FEASIBILITY_TOL) {
                    traj.invariants.infeasible_set_points += 1;
                }
                if let DerDevice::Battery(b) = dev {
                    st.soc = step_soc(st, b, st.p);
                }
            }
            for c in &self.control.services {
                if !c.duals.is_nonnegative() {
                    traj.invariants.negative_duals += 1;
                }
            }
            let steps_ok = |s: f64| s > 0.0 && s.is_finite();
            traj.invariants.nonpositive_steps += self.control.services.iter().filter(|c| !steps_ok(c.beta.value)).count() as u64;
            traj.invariants.nonpositive_steps += self.control.locals.iter().filter(|c| !steps_ok(c.alpha.value)).count() as u64;

            traj.records.push(TickRecord {
                t,
                tap,
                values,
                bounds,
                dual_lower: self.control.services.iter().map(|c| c.duals.lower.clone()).collect(),
                dual_upper: self.control.services.iter().map(|c| c.duals.upper.clone()).collect(),
                beta: self.control.services.iter().map(|c| c.beta.value).collect(),
                alpha: self.control.der_alphas(),
                p_w: implemented.iter().map(|s| s.p * self.base).collect(),
                q_var: implemented.iter().map(|s| s.q * self.base).collect(),
                p_avail_w: devices
                    .iter()
                    .zip(&implemented)
                    .map(|(d, st)| match d {
                        DerDevice::Pv(pv) => pv.p_avail * self.base,
                        DerDevice::Battery(b) => b.power_limits(st.soc).1 * self.base,
                    })
                    .collect(),
                soc: implemented.iter().map(|s| s.soc).collect(),
                signals: signals.per_service.iter().map(|h| h.p.iter().copied().zip(h.q.iter().copied()).collect()).collect(),
            });
        }
        if traj.aborted.is_none() && traj.records.len() != n_ticks + 1 {
            return Err(Error::Config("trajectory length mismatch".into()));
        }
        Ok(traj)
    }
}
