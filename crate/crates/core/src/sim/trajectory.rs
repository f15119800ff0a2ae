use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::MeasurementId;
use crate::services::{violation_metrics, ServiceSeries, ViolationMetrics};

use super::scenario::Mode;

/// Version of the CSV column layout and the JSON summary schema.
pub const SCHEMA_VERSION: u32 = 1;

/// One tick. Plant-side fields (`values`, `p_w`, `q_var`, `p_avail_w`,
/// `soc`, `tap`) describe the interval starting at `t`; controller fields
/// (duals, steps, signals) are the values committed at `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub t: f64,
    pub tap: f64,
    /// Per service, per measurement, measurement units (p.u. volts or W).
    pub values: Vec<Vec<f64>>,
    pub bounds: Vec<Vec<(f64, f64)>>,
    /// Per service, per measurement, per-unit.
    pub dual_lower: Vec<Vec<f64>>,
    pub dual_upper: Vec<Vec<f64>>,
    pub beta: Vec<f64>,
    /// Per DER.
    pub alpha: Vec<f64>,
    pub p_w: Vec<f64>,
    pub q_var: Vec<f64>,
    pub p_avail_w: Vec<f64>,
    pub soc: Vec<f64>,
    /// Per service, per DER, `(H^P, H^Q)` in per-unit.
    pub signals: Vec<Vec<(f64, f64)>>,
}

/// Counts of broken run-time invariants, checked every tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InvariantCounts {
    pub negative_duals: u64,
    pub nonpositive_steps: u64,
    pub infeasible_set_points: u64,
}

impl InvariantCounts {
    pub fn total(&self) -> u64 {
        self.negative_duals + self.nonpositive_steps + self.infeasible_set_points
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceInfo {
    pub id: String,
    pub measurements: Vec<MeasurementId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerInfo {
    pub id: String,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub scenario_id: String,
    pub mode: Mode,
    pub seed: u64,
    pub tick_s: f64,
    pub services: Vec<ServiceInfo>,
    pub ders: Vec<DerInfo>,
    pub records: Vec<TickRecord>,
    /// Set when the plant failed and the run stopped early.
    pub aborted: Option<String>,
    pub invariants: InvariantCounts,
}

/// Per-run numbers written to the JSON summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub scenario_id: String,
    pub mode: Mode,
    pub seed: u64,
    pub ticks: usize,
    pub completed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
    pub metrics: BTreeMap<String, ViolationMetrics>,
    pub final_alpha: BTreeMap<String, f64>,
    pub final_beta: BTreeMap<String, f64>,
    pub mean_beta: BTreeMap<String, f64>,
    pub invariants: InvariantCounts,
}

impl Trajectory {
    pub fn completed(&self) -> bool {
        self.aborted.is_none()
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t).collect()
    }

    pub fn service_index(&self, id: &str) -> Result<usize> {
        self.services
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| Error::Config(format!("no service {id} in trajectory")))
    }

    pub fn metrics(&self, service: usize) -> ViolationMetrics {
        let times = self.times();
        let values: Vec<Vec<f64>> = self.records.iter().map(|r| r.values[service].clone()).collect();
        let bounds: Vec<Vec<(f64, f64)>> = self.records.iter().map(|r| r.bounds[service].clone()).collect();
        violation_metrics(&ServiceSeries { times: &times, values: &values, bounds: &bounds })
    }

    pub fn metrics_by_id(&self, id: &str) -> Result<ViolationMetrics> {
        Ok(self.metrics(self.service_index(id)?))
    }

    pub fn mean_beta(&self, service: usize) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.beta[service]).sum::<f64>() / self.records.len() as f64
    }

    pub fn summary(&self) -> RunSummary {
        let last = self.records.last();
        RunSummary {
            schema_version: SCHEMA_VERSION,
            scenario_id: self.scenario_id.clone(),
            mode: self.mode,
            seed: self.seed,
            ticks: self.records.len(),
            completed: self.completed(),
            diagnostic: self.aborted.clone(),
            metrics: self.services.iter().enumerate().map(|(k, s)| (s.id.clone(), self.metrics(k))).collect(),
            final_alpha: self
                .ders
                .iter()
                .enumerate()
                .filter_map(|(i, d)| last.map(|r| (d.id.clone(), r.alpha[i])))
                .collect(),
            final_beta: self
                .services
                .iter()
                .enumerate()
                .filter_map(|(k, s)| last.map(|r| (s.id.clone(), r.beta[k])))
                .collect(),
            mean_beta: self.services.iter().enumerate().map(|(k, s)| (s.id.clone(), self.mean_beta(k))).collect(),
            invariants: self.invariants,
        }
    }

    /// CSV header. Columns: `t_s`, `tap`; per service measurement
    /// `<svc>.<meas>.{value,lower,upper,dual_lower,dual_upper}`; per service
    /// `<svc>.beta`; per DER `<der>.{p_w,q_var,p_avail_w,soc,alpha}`; per DER
    /// and service `<der>.<svc>.{hp,hq}`.
    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["t_s".to_string(), "tap".to_string()];
        for s in &self.services {
            for m in &s.measurements {
                for f in ["value", "lower", "upper", "dual_lower", "dual_upper"] {
                    h.push(format!("{}.{m}.{f}", s.id));
                }
            }
            h.push(format!("{}.beta", s.id));
        }
        for d in &self.ders {
            for f in ["p_w", "q_var", "p_avail_w", "soc", "alpha"] {
                h.push(format!("{}.{f}", d.id));
            }
            for s in &self.services {
                h.push(format!("{}.{}.hp", d.id, s.id));
                h.push(format!("{}.{}.hq", d.id, s.id));
            }
        }
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let to_err = |e: csv::Error| Error::Config(format!("writing CSV: {e}"));
        w.write_record(self.csv_header()).map_err(to_err)?;
        for r in &self.records {
            let mut row = vec![r.t.to_string(), r.tap.to_string()];
            for (k, s) in self.services.iter().enumerate() {
                for j in 0..s.measurements.len() {
                    row.push(r.values[k][j].to_string());
                    row.push(r.bounds[k][j].0.to_string());
                    row.push(r.bounds[k][j].1.to_string());
                    row.push(r.dual_lower[k][j].to_string());
                    row.push(r.dual_upper[k][j].to_string());
                }
                row.push(r.beta[k].to_string());
            }
            for i in 0..self.ders.len() {
                row.push(r.p_w[i].to_string());
                row.push(r.q_var[i].to_string());
                row.push(r.p_avail_w[i].to_string());
                row.push(r.soc[i].to_string());
                row.push(r.alpha[i].to_string());
                for k in 0..self.services.len() {
                    row.push(r.signals[k][i].0.to_string());
                    row.push(r.signals[k][i].1.to_string());
                }
            }
            w.write_record(&row).map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::Config(format!("writing CSV: {e}")))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f)).map_err(|e| match e {
            Error::Config(m) => Error::io(path, std::io::Error::other(m)),
            other => other,
        })
    }
}
