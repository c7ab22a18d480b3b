//! Local subproblem solvers and the server consensus step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{shrink, LocalObjective, ObjectiveKind};
use crate::vector::{check_len, max_abs, ParamBlock};

/// Proximal weights `2 rho^2` below this are treated as absent.
pub const PROX_WEIGHT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    /// Minimize to tolerance: closed form for smooth least squares, proximal gradient otherwise.
    Exact,
    /// `local_passes` proximal gradient steps.
    Bcpg,
    /// Return the consensus anchor; the minimizer of the linearized surrogate.
    Anchor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WarmStart {
    PreviousBlock,
    Consensus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSpec {
    pub kind: SolverKind,
    pub step: f64,
    pub local_passes: usize,
    pub grad_tol: f64,
    pub max_local_iters: usize,
    pub warm_start: WarmStart,
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec {
            kind: SolverKind::Exact,
            step: 1e-4,
            local_passes: 1,
            grad_tol: 1e-8,
            max_local_iters: 100_000,
            warm_start: WarmStart::PreviousBlock,
        }
    }
}

impl SolverSpec {
    pub fn exact() -> Self {
        SolverSpec::default()
    }

    pub fn bcpg(step: f64, local_passes: usize) -> Self {
        SolverSpec { kind: SolverKind::Bcpg, step, local_passes, ..SolverSpec::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::param(format!("step size must be positive, got {}", self.step)));
        }
        if self.local_passes == 0 {
            return Err(Error::param("local passes must be at least 1"));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::param("gradient tolerance must be positive"));
        }
        if self.max_local_iters == 0 {
            return Err(Error::param("max local iterations must be at least 1"));
        }
        Ok(())
    }
}

/// One augmented coupling term `sign * mu^T (x - anchor) + |rho o (x - anchor)|^2` of a local problem.
#[derive(Debug, Clone, Copy)]
pub struct CouplingTerm<'a> {
    pub sign: f64,
    pub multiplier: &'a [f64],
    pub penalty: &'a [f64],
    pub anchor: &'a [f64],
}

impl CouplingTerm<'_> {
    fn weight(&self, r: usize) -> f64 {
        let w = 2.0 * self.penalty[r] * self.penalty[r];
        if w < PROX_WEIGHT_FLOOR {
            0.0
        } else {
            w
        }
    }
}

/// A neighbor's block together with the multiplier and penalty of the shared edge.
#[derive(Debug, Clone, Copy)]
pub struct Neighbor<'a> {
    pub value: &'a [f64],
    pub multiplier: &'a [f64],
    pub penalty: &'a [f64],
}

/// Local augmented Lagrangian of one client.
#[derive(Debug, Clone)]
pub struct LocalProblem<'a> {
    pub objective: &'a LocalObjective,
    pub terms: Vec<CouplingTerm<'a>>,
}

impl<'a> LocalProblem<'a> {
    pub fn new(objective: &'a LocalObjective, terms: Vec<CouplingTerm<'a>>) -> Result<Self> {
        let m = objective.dim();
        for t in &terms {
            check_len(m, t.multiplier.len())?;
            check_len(m, t.penalty.len())?;
            check_len(m, t.anchor.len())?;
        }
        Ok(LocalProblem { objective, terms })
    }

    /// Centralized client problem against the server block.
    pub fn centralized(
        objective: &'a LocalObjective,
        x_hat: &'a [f64],
        multiplier: &'a [f64],
        penalty: &'a [f64],
    ) -> Result<Self> {
        Self::new(objective, vec![CouplingTerm { sign: -1.0, multiplier, penalty, anchor: x_hat }])
    }

    /// Decentralized client problem. `higher` neighbors have larger ids, `lower` smaller ids.
    pub fn decentralized(objective: &'a LocalObjective, higher: &[Neighbor<'a>], lower: &[Neighbor<'a>]) -> Result<Self> {
        let terms = higher
            .iter()
            .map(|nb| CouplingTerm { sign: 1.0, multiplier: nb.multiplier, penalty: nb.penalty, anchor: nb.value })
            .chain(lower.iter().map(|nb| CouplingTerm {
                sign: -1.0,
                multiplier: nb.multiplier,
                penalty: nb.penalty,
                anchor: nb.value,
            }))
            .collect();
        Self::new(objective, terms)
    }

    pub fn smooth_value(&self, x: &[f64]) -> Result<f64> {
        let mut v = self.objective.eval_smooth(x)?;
        for t in &self.terms {
            for r in 0..x.len() {
                let d = x[r] - t.anchor[r];
                v += t.sign * t.multiplier[r] * d + 0.5 * t.weight(r) * d * d;
            }
        }
        Ok(v)
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.smooth_value(x)? + self.objective.eval_nonsmooth(x))
    }

    pub fn smooth_grad(&self, x: &[f64]) -> Result<ParamBlock> {
        check_len(self.objective.dim(), x.len())?;
        let mut g = vec![0.0; x.len()];
        self.add_smooth_grad(x, &mut g);
        Ok(ParamBlock::new(g))
    }

    fn add_smooth_grad(&self, x: &[f64], g: &mut [f64]) {
        self.objective.add_grad_smooth(x, g);
        for t in &self.terms {
            for r in 0..x.len() {
                g[r] += t.sign * t.multiplier[r] + t.weight(r) * (x[r] - t.anchor[r]);
            }
        }
    }

    pub fn solve(&self, x_init: &[f64], spec: &SolverSpec) -> Result<ParamBlock> {
        spec.validate()?;
        check_len(self.objective.dim(), x_init.len())?;
        let x = match spec.kind {
            SolverKind::Anchor => match self.terms.as_slice() {
                [t] => t.anchor.to_vec(),
                _ => return Err(Error::Capability("anchor solver needs exactly one coupling term".into())),
            },
            SolverKind::Bcpg => self.prox_gradient(x_init, spec.step, spec.local_passes, None)?,
            SolverKind::Exact => {
                let smooth_ls = self.objective.kind() == ObjectiveKind::LeastSquares && self.objective.l1_weight() == 0.0;
                match smooth_ls.then(|| self.closed_form()).flatten() {
                    Some(x) => x,
                    None => self.prox_gradient(x_init, spec.step, spec.max_local_iters, Some(spec.grad_tol))?,
                }
            }
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iterations: spec.local_passes });
        }
        Ok(ParamBlock::new(x))
    }

    /// Proximal gradient iterations; stops early once the gradient mapping is below `tol`.
    fn prox_gradient(&self, x_init: &[f64], step: f64, passes: usize, tol: Option<f64>) -> Result<Vec<f64>> {
        let threshold = self.objective.l1_weight() * step;
        let mut x = x_init.to_vec();
        let mut g = vec![0.0; x.len()];
        for it in 0..passes {
            g.iter_mut().for_each(|v| *v = 0.0);
            self.add_smooth_grad(&x, &mut g);
            let mut moved = 0.0f64;
            for r in 0..x.len() {
                let next = shrink(x[r] - step * g[r], threshold);
                moved = moved.max((next - x[r]).abs());
                x[r] = next;
            }
            if !moved.is_finite() {
                return Err(Error::Divergence { iterations: it + 1 });
            }
            if tol.is_some_and(|tol| moved / step <= tol) {
                break;
            }
        }
        Ok(x)
    }

    /// Normal-equation solve for a smooth least-squares objective; `None` if singular.
    fn closed_form(&self) -> Option<Vec<f64>> {
        let (ata, atb) = self.objective.normal_equations();
        let m = ata.nrows();
        let mut lhs: DMatrix<f64> = ata * 2.0;
        let mut rhs: DVector<f64> = atb * 2.0;
        for t in &self.terms {
            for r in 0..m {
                let w = t.weight(r);
                lhs[(r, r)] += w;
                rhs[r] += w * t.anchor[r] - t.sign * t.multiplier[r];
            }
        }
        let sol = match lhs.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => lhs.lu().solve(&rhs)?,
        };
        Some(sol.iter().copied().collect())
    }
}

pub fn solve_local_cc(
    obj: &LocalObjective,
    x_hat: &[f64],
    mu_i: &[f64],
    rho_i: &[f64],
    x_init: &[f64],
    spec: &SolverSpec,
) -> Result<ParamBlock> {
    LocalProblem::centralized(obj, x_hat, mu_i, rho_i)?.solve(x_init, spec)
}

pub fn solve_local_dc(
    obj: &LocalObjective,
    higher: &[Neighbor<'_>],
    lower: &[Neighbor<'_>],
    x_init: &[f64],
    spec: &SolverSpec,
) -> Result<ParamBlock> {
    LocalProblem::decentralized(obj, higher, lower)?.solve(x_init, spec)
}

/// One proximal gradient step `S_{lambda*alpha}(x - alpha*grad)`.
pub fn bcpg_step(x_prev: &[f64], smooth_grad: &[f64], alpha: f64, lambda: f64) -> Result<ParamBlock> {
    check_len(x_prev.len(), smooth_grad.len())?;
    if !(alpha > 0.0) {
        return Err(Error::param("step size must be positive"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::param("l1 weight must be non-negative"));
    }
    let t = lambda * alpha;
    Ok(ParamBlock::new(
        x_prev.iter().zip(smooth_grad).map(|(x, g)| shrink(x - alpha * g, t)).collect(),
    ))
}

/// Minimizer over the server block of the centralized augmented terms, or the weighted average
/// when `weights` is given (multipliers must then be zero).
pub fn server_consensus(
    xs: &[&[f64]],
    mus: &[&[f64]],
    rhos: &[&[f64]],
    weights: Option<&[f64]>,
) -> Result<ParamBlock> {
    let Some(first) = xs.first() else {
        return Err(Error::param("consensus over an empty set of blocks"));
    };
    let m = first.len();
    if mus.len() != xs.len() || rhos.len() != xs.len() {
        return Err(Error::dim("blocks, multipliers and penalties differ in count"));
    }
    for ((x, mu), rho) in xs.iter().zip(mus).zip(rhos) {
        check_len(m, x.len())?;
        check_len(m, mu.len())?;
        check_len(m, rho.len())?;
    }
    if let Some(p) = weights {
        if p.len() != xs.len() {
            return Err(Error::dim("one weight per block required"));
        }
        if p.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::param("weights must be positive"));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::param(format!("weights sum to {total}, not 1")));
        }
        if mus.iter().any(|mu| max_abs(mu) != 0.0) {
            return Err(Error::param("weighted consensus requires zero multipliers"));
        }
        let mut out = vec![0.0; m];
        for (x, w) in xs.iter().zip(p) {
            for r in 0..m {
                out[r] += w * x[r];
            }
        }
        return Ok(ParamBlock::new(out));
    }
    if rhos.iter().any(|rho| rho.iter().any(|&r| !(r > 0.0))) {
        return Err(Error::param("penalties must be positive"));
    }
    let mut out = vec![0.0; m];
    for r in 0..m {
        let mut num = 0.0;
        let mut den = 0.0;
        for ((x, mu), rho) in xs.iter().zip(mus).zip(rhos) {
            let w = rho[r] * rho[r];
            num += w * x[r] - 0.5 * mu[r];
            den += w;
        }
        out[r] = num / den;
    }
    Ok(ParamBlock::new(out))
}
