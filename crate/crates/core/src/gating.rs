//! Discrepancy-to-gate map `g = max(g_min, exp(-tau * D))`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default floor for the gate. Shortcut-like samples are down-weighted at
/// most 20x, which keeps the `1/g_min` bracketing factor moderate.
pub const DEFAULT_G_MIN: f64 = 0.05;
pub const DEFAULT_TAU: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    /// Temperature.
    pub tau: f64,
    /// Lower clip, in (0, 1).
    pub g_min: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            g_min: DEFAULT_G_MIN,
        }
    }
}

impl GateConfig {
    pub fn new(tau: f64, g_min: f64) -> Result<Self> {
        let cfg = Self { tau, g_min };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(invalid("tau", format!("must be positive, got {}", self.tau)));
        }
        if !(self.g_min > 0.0 && self.g_min < 1.0) {
            return Err(invalid(
                "g_min",
                format!("must lie in (0, 1), got {}", self.g_min),
            ));
        }
        Ok(())
    }

    /// Lipschitz constant of the gate map on `D >= 0`: `sup |phi'| = tau`.
    pub fn lipschitz_bound(&self) -> f64 {
        self.tau
    }
}

/// Maps a nonnegative discrepancy to a gate in `[g_min, 1]`.
pub fn gate(d: f64, cfg: &GateConfig) -> Result<f64> {
    if !d.is_finite() {
        return Err(Error::NonFinite("discrepancy"));
    }
    if d < 0.0 {
        return Err(invalid("discrepancy", format!("must be nonnegative, got {d}")));
    }
    Ok(cfg.g_min.max((-cfg.tau * d).exp()))
}

pub fn gate_lipschitz_bound(cfg: &GateConfig) -> f64 {
    cfg.lipschitz_bound()
}
