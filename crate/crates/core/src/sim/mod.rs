//! Scenario engine: advances the plant, runs one control tick per interval,
//! applies scheduled events and records trajectories.

pub mod calibrate;
pub mod catalog;
mod run;
mod scenario;
mod trajectory;

pub use catalog::{builtin, builtin_scenarios, desk_feeder, CATALOG};
pub use run::{run, run_batch, run_with, RunOptions};
pub use scenario::{DeviceKind, DeviceSpec, Mode, Scenario};
pub use trajectory::{DerInfo, InvariantCounts, RunSummary, ServiceInfo, TickRecord, Trajectory, SCHEMA_VERSION};
