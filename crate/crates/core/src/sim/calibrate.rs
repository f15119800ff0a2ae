//! Manual-mode step-size search: start small, double until a local
//! controller oscillates without damping, then walk down one significant
//! digit at a time until the oscillation disappears.

use crate::error::{Error, Result};

use super::run::run;
use super::scenario::{Mode, Scenario};
use super::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OscillationDetector {
    /// Fraction of the horizon, counted from the end, that is inspected.
    pub window_fraction: f64,
    /// Set-point moves smaller than this (W, var) are ignored.
    pub min_move_w: f64,
    /// Share of reversing moves in the window that counts as undamped.
    pub reversal_share: f64,
}

impl Default for OscillationDetector {
    fn default() -> Self {
        Self { window_fraction: 0.25, min_move_w: 100.0, reversal_share: 0.1 }
    }
}

impl OscillationDetector {
    /// Whether any DER keeps reversing its set point late in the run. A run
    /// that stopped early counts as oscillating.
    pub fn oscillates(&self, tr: &Trajectory) -> bool {
        if !tr.completed() {
            return true;
        }
        let n = tr.records.len();
        let window = ((n as f64 * self.window_fraction) as usize).max(3).min(n);
        let recs = &tr.records[n - window..];
        (0..tr.ders.len()).any(|i| {
            let moves: Vec<(f64, f64)> = recs
                .windows(2)
                .map(|w| (w[1].p_w[i] - w[0].p_w[i], w[1].q_var[i] - w[0].q_var[i]))
                .collect();
            let reversals = moves
                .windows(2)
                .filter(|m| {
                    let (a, b) = (m[0], m[1]);
                    a.0.hypot(a.1) > self.min_move_w && b.0.hypot(b.1) > self.min_move_w && a.0 * b.0 + a.1 * b.1 < 0.0
                })
                .count();
            reversals as f64 > self.reversal_share * moves.len().saturating_sub(1) as f64
        })
    }
}

/// `d * 10^e`, dividing for negative exponents so that 0.7 comes out as 0.7.
fn digit_value(d: f64, e: i32) -> f64 {
    if e >= 0 {
        d * 10f64.powi(e)
    } else {
        d / 10f64.powi(-e)
    }
}

fn split_digit(x: f64) -> (f64, i32) {
    let e = x.log10().floor() as i32;
    (x / digit_value(1.0, e), e)
}

/// `d·10^e` with one significant digit, at or below `x`.
pub fn leading_digit_floor(x: f64) -> f64 {
    let (m, e) = split_digit(x);
    digit_value((m * (1.0 + 1e-12)).floor(), e)
}

/// Next smaller one-significant-digit value: 6 → 5, 1 → 0.9.
pub fn decrement_digit(x: f64) -> f64 {
    let (m, e) = split_digit(x);
    let d = m.round();
    if d > 1.0 {
        digit_value(d - 1.0, e)
    } else {
        digit_value(9.0, e - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub step: f64,
    /// Every tried value with its outcome (`true` = oscillates).
    pub trials: Vec<(f64, bool)>,
}

/// Largest one-significant-digit manual step that does not oscillate.
pub fn calibrate_manual_step(scenario: &Scenario, start: f64, detector: &OscillationDetector) -> Result<Calibration> {
    if !(start > 0.0 && start.is_finite()) {
        return Err(Error::Parameter(format!("calibration start must be > 0, got {start}")));
    }
    let mut trials = Vec::new();
    let mut probe = |s: f64| -> Result<bool> {
        let mut sc = scenario.clone();
        sc.mode = Mode::Manual;
        sc.manual_step = Some(s);
        let osc = detector.oscillates(&run(&sc)?);
        trials.push((s, osc));
        Ok(osc)
    };
    let mut s = start;
    let mut found = false;
    for _ in 0..60 {
        if probe(s)? {
            found = true;
            break;
        }
        s *= 2.0;
    }
    if !found {
        return Err(Error::Parameter("no oscillating step size found while doubling".into()));
    }
    let mut c = leading_digit_floor(s);
    if c >= s {
        c = decrement_digit(c);
    }
    for _ in 0..200 {
        if c < start * 1e-3 {
            break;
        }
        if !probe(c)? {
            return Ok(Calibration { step: c, trials });
        }
        c = decrement_digit(c);
    }
    Err(Error::Parameter("no stable manual step size found".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digit_walk() {
        assert_eq!(leading_digit_floor(12.8), 10.0);
        assert_eq!(leading_digit_floor(0.064), 0.06);
        assert_eq!(decrement_digit(10.0), 9.0);
        assert_eq!(decrement_digit(6.0), 5.0);
        assert_eq!(decrement_digit(0.8), 0.7);
        assert_eq!(decrement_digit(0.1), 0.09);
    }
}
