//! Time series for load multipliers and PV availability.
//!
//! Every profile materializes into a piecewise-constant series (value held
//! from each sample time until the next). Synthetic shapes are drawn from a
//! seeded ChaCha stream so a scenario and seed always give the same series.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Load profile granularity.
pub const LOAD_STEP_S: f64 = 900.0;
/// PV profile granularity.
pub const PV_STEP_S: f64 = 60.0;

/// Square-wave irradiance dips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudSpec {
    /// Expected dips per hour.
    pub rate_per_hour: f64,
    #[serde(default = "default_depth_min")]
    pub depth_min: f64,
    #[serde(default = "default_depth_max")]
    pub depth_max: f64,
    #[serde(default = "default_duration_min")]
    pub duration_min_s: f64,
    #[serde(default = "default_duration_max")]
    pub duration_max_s: f64,
}

fn default_depth_min() -> f64 {
    0.3
}
fn default_depth_max() -> f64 {
    0.7
}
fn default_duration_min() -> f64 {
    30.0
}
fn default_duration_max() -> f64 {
    120.0
}

impl CloudSpec {
    pub fn new(rate_per_hour: f64) -> Self {
        Self {
            rate_per_hour,
            depth_min: default_depth_min(),
            depth_max: default_depth_max(),
            duration_min_s: default_duration_min(),
            duration_max_s: default_duration_max(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProfileSpec {
    Constant {
        value: f64,
    },
    /// `[time_s, value]` pairs, held until the next pair.
    Series {
        points: Vec<[f64; 2]>,
    },
    /// CSV with a `time_s` column and the named value column.
    Csv {
        path: PathBuf,
        column: String,
    },
    /// Load multiplier around 1 with a mild daily shape, 15-minute steps.
    SyntheticLoad {
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_load_noise")]
        noise: f64,
    },
    /// Fraction of inverter rating available, 1-minute steps.
    SyntheticPv {
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_peak")]
        peak: f64,
        #[serde(default = "default_pv_noise")]
        noise: f64,
        #[serde(default)]
        clouds: Option<CloudSpec>,
    },
}

fn default_load_noise() -> f64 {
    0.03
}
fn default_peak() -> f64 {
    1.0
}
fn default_pv_noise() -> f64 {
    0.01
}

/// Piecewise-constant series.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl Profile {
    pub fn constant(value: f64) -> Self {
        Self { times: vec![0.0], values: vec![value] }
    }

    pub fn from_points(points: &[[f64; 2]]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config("profile has no points".into()));
        }
        if points.windows(2).any(|w| w[1][0] <= w[0][0]) {
            return Err(Error::Config("profile times must increase strictly".into()));
        }
        if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::Config("profile contains non-finite values".into()));
        }
        Ok(Self { times: points.iter().map(|p| p[0]).collect(), values: points.iter().map(|p| p[1]).collect() })
    }

    fn uniform(step_s: f64, values: Vec<f64>) -> Self {
        Self { times: (0..values.len()).map(|k| k as f64 * step_s).collect(), values }
    }

    /// Value in force at `t`; before the first sample the first value holds.
    pub fn at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        self.values[k.saturating_sub(1)]
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.iter().copied().zip(self.values.iter().copied())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
    }
}

/// Bell-shaped clear-sky fraction for an hour of day, zero outside 6-18 h.
pub fn clear_sky(hour: f64) -> f64 {
    let x = (hour - 12.0) / 6.0;
    if x.abs() >= 1.0 {
        0.0
    } else {
        (std::f64::consts::FRAC_PI_2 * x).cos().powf(1.5)
    }
}

/// Residential-style multiplier, 1 on average over the day.
pub fn load_shape(hour: f64) -> f64 {
    let h = hour.rem_euclid(24.0);
    1.0 + 0.15 * ((h - 19.0) / 24.0 * std::f64::consts::TAU).cos() - 0.05 * ((h - 13.0) / 12.0 * std::f64::consts::TAU).cos()
}

impl ProfileSpec {
    /// Materialize over `[0, horizon_s]` starting at `start_hour`. Relative
    /// CSV paths resolve against `base_dir`.
    pub fn build(&self, horizon_s: f64, start_hour: f64, base_dir: Option<&Path>) -> Result<Profile> {
        match self {
            ProfileSpec::Constant { value } => {
                if !value.is_finite() {
                    return Err(Error::Config("constant profile is not finite".into()));
                }
                Ok(Profile::constant(*value))
            }
            ProfileSpec::Series { points } => Profile::from_points(points),
            ProfileSpec::Csv { path, column } => {
                let full = match base_dir {
                    Some(d) if path.is_relative() => d.join(path),
                    _ => path.clone(),
                };
                read_csv_profile(&full, column)
            }
            ProfileSpec::SyntheticLoad { seed, noise } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let n = (horizon_s / LOAD_STEP_S).floor() as usize + 1;
                let values = (0..n)
                    .map(|k| {
                        let hour = start_hour + k as f64 * LOAD_STEP_S / 3600.0;
                        load_shape(hour) * (1.0 + noise * rng.random_range(-1.0..=1.0))
                    })
                    .collect();
                Ok(Profile::uniform(LOAD_STEP_S, values))
            }
            ProfileSpec::SyntheticPv { seed, peak, noise, clouds } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let n = (horizon_s / PV_STEP_S).floor() as usize + 1;
                let mut values: Vec<f64> = (0..n)
                    .map(|k| {
                        let hour = start_hour + k as f64 * PV_STEP_S / 3600.0;
                        (peak * clear_sky(hour) * (1.0 + noise * rng.random_range(-1.0..=1.0))).clamp(0.0, 1.0)
                    })
                    .collect();
                match clouds {
                    None => Ok(Profile::uniform(PV_STEP_S, values)),
                    Some(c) => cloud_profile(&mut values, horizon_s, c, &mut rng),
                }
            }
        }
    }
}

/// Overlay dips on a 1-minute base. Dip edges fall on whole seconds, so the
/// result has breakpoints at both grids.
fn cloud_profile(base: &mut [f64], horizon_s: f64, c: &CloudSpec, rng: &mut ChaCha8Rng) -> Result<Profile> {
    if !(c.rate_per_hour >= 0.0
        && 0.0 <= c.depth_min
        && c.depth_min <= c.depth_max
        && c.depth_max <= 1.0
        && 0.0 < c.duration_min_s
        && c.duration_min_s <= c.duration_max_s)
    {
        return Err(Error::Config(format!("invalid cloud parameters: {c:?}")));
    }
    let mut dips = Vec::new();
    if c.rate_per_hour > 0.0 {
        let mean_gap = 3600.0 / c.rate_per_hour;
        let mut t = 0.0;
        loop {
            // exponential gaps
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            t += (-u.ln() * mean_gap).round().max(1.0);
            if t >= horizon_s {
                break;
            }
            let dur = rng.random_range(c.duration_min_s..=c.duration_max_s).round();
            let depth = rng.random_range(c.depth_min..=c.depth_max);
            dips.push((t, t + dur, depth));
            t += dur;
        }
    }
    let mut breaks: Vec<f64> = (0..base.len()).map(|k| k as f64 * PV_STEP_S).collect();
    for &(a, b, _) in &dips {
        breaks.push(a);
        breaks.push(b);
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let values = breaks
        .iter()
        .map(|&t| {
            let k = ((t / PV_STEP_S).floor() as usize).min(base.len() - 1);
            let factor = dips.iter().find(|d| d.0 <= t && t < d.1).map_or(1.0, |d| 1.0 - d.2);
            base[k] * factor
        })
        .collect();
    Ok(Profile { times: breaks, values })
}

fn read_csv_profile(path: &Path, column: &str) -> Result<Profile> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let ti = headers
        .iter()
        .position(|h| h == "time_s")
        .ok_or_else(|| Error::Config(format!("{}: missing time_s column", path.display())))?;
    let vi = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| Error::Config(format!("{}: missing column {column}", path.display())))?;
    let mut points = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{}: bad number on line {}", path.display(), rec.position().map_or(0, |p| p.line()))))
        };
        points.push([parse(ti)?, parse(vi)?]);
    }
    Profile::from_points(&points)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    }
}
