use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// When an inner loop hands over to a multiplier update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InnerCriterion {
    /// Dual residual at most `eps_dual`.
    B1,
    /// Dual residual at most `eps_dual + initial_excess * decay^k`.
    B2 { initial_excess: f64, decay: f64 },
    /// Sweep cap `min(initial * ceil(growth^k), cap)`, or the B1 condition.
    B3 { initial: usize, growth: f64, cap: usize },
    /// Fixed sweep cap, or the B1 condition.
    B4 { vmax: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RhoSchedule {
    Constant,
    /// Multiply penalties by `factor` after each multiplier update, saturating at `cap`.
    Geometric { factor: f64, cap: f64 },
}

impl RhoSchedule {
    pub const DEFAULT_CAP: f64 = 1e6;

    pub fn geometric(factor: f64) -> Self {
        RhoSchedule::Geometric { factor, cap: Self::DEFAULT_CAP }
    }

    pub fn advance(&self, rho: f64) -> f64 {
        match *self {
            RhoSchedule::Constant => rho,
            RhoSchedule::Geometric { factor, cap } => (rho * factor).min(cap),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub eps_pri: f64,
    pub eps_dual: f64,
    pub criterion: InnerCriterion,
    pub rho_schedule: RhoSchedule,
    /// Initial penalty entry on every edge.
    pub rho_init: f64,
    pub max_outer: usize,
    /// Budget on cumulative inner sweeps over all outer loops.
    pub max_total_inner: usize,
    /// Run a full-cycle sweep before a multiplier update that follows a partial sweep.
    pub final_sweep_full_cycle: bool,
    /// Evaluate the augmented Lagrangian for every trace record.
    pub trace_surrogate: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            eps_pri: 1e-5,
            eps_dual: 1e-5,
            criterion: InnerCriterion::B1,
            rho_schedule: RhoSchedule::Constant,
            rho_init: 1.0,
            max_outer: 10_000,
            max_total_inner: 1000,
            final_sweep_full_cycle: true,
            trace_surrogate: true,
        }
    }
}

impl EngineConfig {
    /// Every invalid field, as `field: reason`.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut positive = |name: &str, v: f64| {
            if !(v > 0.0) || !v.is_finite() {
                out.push(format!("{name}: must be a positive finite number, got {v}"));
            }
        };
        positive("eps_pri", self.eps_pri);
        positive("eps_dual", self.eps_dual);
        positive("rho_init", self.rho_init);
        match self.criterion {
            InnerCriterion::B1 => {}
            InnerCriterion::B2 { initial_excess, decay } => {
                if !(initial_excess >= 0.0) || !initial_excess.is_finite() {
                    out.push(format!("criterion.initial_excess: must be non-negative, got {initial_excess}"));
                }
                if !(decay > 0.0 && decay < 1.0) {
                    out.push(format!("criterion.decay: must lie in (0, 1), got {decay}"));
                }
            }
            InnerCriterion::B3 { initial, growth, cap } => {
                if initial == 0 {
                    out.push("criterion.initial: must be at least 1".into());
                }
                if !(growth >= 1.0) || !growth.is_finite() {
                    out.push(format!("criterion.growth: must be at least 1, got {growth}"));
                }
                if cap < initial {
                    out.push(format!("criterion.cap: must be at least initial ({initial}), got {cap}"));
                }
            }
            InnerCriterion::B4 { vmax } => {
                if vmax == 0 {
                    out.push("criterion.vmax: must be at least 1".into());
                }
            }
        }
        if let RhoSchedule::Geometric { factor, cap } = self.rho_schedule {
            if !(factor > 1.0) || !factor.is_finite() {
                out.push(format!("rho_schedule.factor: must exceed 1, got {factor}"));
            }
            if !(cap >= self.rho_init) {
                out.push(format!("rho_schedule.cap: must be at least rho_init, got {cap}"));
            }
        }
        if self.max_outer == 0 {
            out.push("max_outer: must be at least 1".into());
        }
        if self.max_total_inner == 0 {
            out.push("max_total_inner: must be at least 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::param(v.join("; ")))
        }
    }

    /// Dual tolerance used at outer index `k` (1-based).
    pub fn dual_tolerance(&self, k: usize) -> f64 {
        match self.criterion {
            InnerCriterion::B2 { initial_excess, decay } => self.eps_dual + initial_excess * decay.powi(k as i32),
            _ => self.eps_dual,
        }
    }

    /// Sweep cap at outer index `k`, if the criterion has one.
    pub fn sweep_cap(&self, k: usize) -> Option<usize> {
        match self.criterion {
            InnerCriterion::B3 { initial, growth, cap } => {
                let grown = initial as f64 * growth.powi(k as i32).ceil();
                Some(grown.min(cap as f64) as usize)
            }
            InnerCriterion::B4 { vmax } => Some(vmax),
            _ => None,
        }
    }
}
