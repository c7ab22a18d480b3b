//! Generic augmented Lagrangian loop for affine equality constraints.

use serde::{Deserialize, Serialize};

use super::config::EngineConfig;
use super::StopStatus;
use crate::error::{Error, Result};
use crate::vector::{check_len, dot, max_abs};

/// `h(x) = G x - c`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineConstraint {
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
}

impl AffineConstraint {
    pub fn new(rows: Vec<Vec<f64>>, rhs: Vec<f64>) -> Result<Self> {
        if rows.len() != rhs.len() || rows.is_empty() {
            return Err(Error::dim("constraint needs one right-hand side per row"));
        }
        let n = rows[0].len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::dim("constraint rows differ in length"));
        }
        Ok(AffineConstraint { rows, rhs })
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.rows[0].len(), x.len())?;
        Ok(self.rows.iter().zip(&self.rhs).map(|(g, c)| dot(g, x) - c).collect())
    }

    /// `G^T y`
    pub fn transpose_apply(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows[0].len()];
        for (g, yi) in self.rows.iter().zip(y) {
            for (o, gj) in out.iter_mut().zip(g) {
                *o += gj * yi;
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// What the inner minimizer is asked to solve at one outer step.
#[derive(Debug, Clone, Copy)]
pub struct AlmSubproblem<'a> {
    pub multiplier: &'a [f64],
    pub penalty: &'a [f64],
    pub warm_start: &'a [f64],
    /// Requested accuracy of the inner minimization.
    pub tolerance: f64,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlmTraceRecord {
    pub k: usize,
    pub constraint_inf: f64,
    pub lagrangian: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlmOutcome {
    pub x: Vec<f64>,
    pub multiplier: Vec<f64>,
    pub penalty: Vec<f64>,
    pub status: StopStatus,
    pub outer_loops: usize,
    pub trace: Vec<AlmTraceRecord>,
}

/// `mu + 2 rho o rho o h`
pub fn multiplier_update(mu: &[f64], rho: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    check_len(mu.len(), rho.len())?;
    check_len(mu.len(), h.len())?;
    Ok(mu.iter().zip(rho).zip(h).map(|((m, r), c)| m + 2.0 * r * r * c).collect())
}

/// Minimizes `objective` subject to `h(x) = 0`.
///
/// `inner` returns an approximate minimizer of
/// `objective(x) + mu^T h(x) + |rho o h(x)|^2`. The run stops once `|h(x)|_inf <= eps_pri`
/// and then reports the multiplier estimate `mu + 2 rho o rho o h(x)` at the final point;
/// exhausting `max_outer` returns the last state with status `MaxOuter`.
pub fn alm_solve<F, M>(
    objective: F,
    h: &AffineConstraint,
    cfg: &EngineConfig,
    x0: &[f64],
    mut inner: M,
) -> Result<AlmOutcome>
where
    F: Fn(&[f64]) -> f64,
    M: FnMut(&AlmSubproblem<'_>) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let p = h.len();
    let mut mu = vec![0.0; p];
    let mut rho = vec![cfg.rho_init; p];
    let mut x = x0.to_vec();
    h.eval(&x)?;
    let mut trace = Vec::new();
    for k in 1..=cfg.max_outer {
        x = inner(&AlmSubproblem {
            multiplier: &mu,
            penalty: &rho,
            warm_start: &x,
            tolerance: cfg.dual_tolerance(k),
            k,
        })?;
        let hx = h.eval(&x)?;
        if hx.iter().chain(&x).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { k, v: 0, client: 0 });
        }
        let violation = max_abs(&hx);
        let penalty: f64 = rho.iter().zip(&hx).map(|(r, c)| (r * c).powi(2)).sum();
        trace.push(AlmTraceRecord { k, constraint_inf: violation, lagrangian: objective(&x) + dot(&mu, &hx) + penalty });
        mu = multiplier_update(&mu, &rho, &hx)?;
        if violation <= cfg.eps_pri {
            return Ok(AlmOutcome { x, multiplier: mu, penalty: rho, status: StopStatus::Optimal, outer_loops: k, trace });
        }
        for r in rho.iter_mut() {
            *r = cfg.rho_schedule.advance(*r);
        }
    }
    Ok(AlmOutcome {
        x,
        multiplier: mu,
        penalty: rho,
        status: StopStatus::MaxOuter,
        outer_loops: cfg.max_outer,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{InnerCriterion, RhoSchedule};

    fn unit_constraint() -> AffineConstraint {
        AffineConstraint::new(vec![vec![1.0]], vec![1.0]).unwrap()
    }

    /// Exact minimizer of x^2 + mu (x - 1) + rho^2 (x - 1)^2.
    fn exact(sp: &AlmSubproblem<'_>) -> Result<Vec<f64>> {
        let r2 = sp.penalty[0] * sp.penalty[0];
        Ok(vec![(2.0 * r2 - sp.multiplier[0]) / (2.0 + 2.0 * r2)])
    }

    #[test]
    fn multiplier_update_example() {
        assert_eq!(multiplier_update(&[0.0], &[1.0], &[0.3]).unwrap(), vec![0.6]);
        assert_eq!(multiplier_update(&[1.0], &[2.0], &[0.5]).unwrap(), vec![5.0]);
    }

    #[test]
    fn quadratic_with_unit_constraint() {
        let cfg = EngineConfig { max_outer: 200, ..EngineConfig::default() };
        let out = alm_solve(|x| x[0] * x[0], &unit_constraint(), &cfg, &[0.0], exact).unwrap();
        assert_eq!(out.status, StopStatus::Optimal);
        assert!((out.x[0] - 1.0).abs() <= 1e-5);
        assert!((out.multiplier[0] + 2.0).abs() <= 1e-4);
    }

    #[test]
    fn feasible_first_iterate_stops_with_multiplier_unchanged() {
        // min (x - 1)^2 s.t. x = 1: the first subproblem already lands on the constraint.
        let inner = |sp: &AlmSubproblem<'_>| -> Result<Vec<f64>> {
            let r2 = sp.penalty[0].powi(2);
            Ok(vec![(2.0 + 2.0 * r2 - sp.multiplier[0]) / (2.0 + 2.0 * r2)])
        };
        let cfg = EngineConfig::default();
        let out = alm_solve(|x| (x[0] - 1.0).powi(2), &unit_constraint(), &cfg, &[5.0], inner).unwrap();
        assert_eq!(out.outer_loops, 1);
        assert_eq!(out.multiplier, vec![0.0]);
    }

    #[test]
    fn exhausted_outer_budget_is_reported() {
        let cfg = EngineConfig { max_outer: 3, ..EngineConfig::default() };
        let out = alm_solve(|x| x[0] * x[0], &unit_constraint(), &cfg, &[0.0], exact).unwrap();
        assert_eq!(out.status, StopStatus::MaxOuter);
        assert_eq!(out.trace.len(), 3);
    }

    #[test]
    fn inner_receives_decaying_tolerance() {
        let cfg = EngineConfig {
            criterion: InnerCriterion::B2 { initial_excess: 1e-1, decay: 0.5 },
            rho_schedule: RhoSchedule::geometric(2.0),
            max_outer: 50,
            ..EngineConfig::default()
        };
        let mut seen = Vec::new();
        alm_solve(|x| x[0] * x[0], &unit_constraint(), &cfg, &[0.0], |sp| {
            seen.push(sp.tolerance);
            exact(sp)
        })
        .unwrap();
        assert!(seen.windows(2).all(|w| w[1] < w[0]));
    }
}
