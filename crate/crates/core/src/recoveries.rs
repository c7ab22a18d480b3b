//! Presets that reduce the decomposition to classical methods, and straight-line reference
//! implementations of those methods for cross-checking.
//!
//! GD, NM and MBGD/SGD use the anchor solver: a client returns the server block unchanged and
//! its multiplier is set from the gradient (or Newton step) there, so the server update becomes
//! `x - alpha * grad f(x)` (or `x - H^{-1} grad f(x)`). FedAvg uses a penalty of `1e-7`, whose
//! proximal weight `2e-14` falls below [`PROX_WEIGHT_FLOOR`](crate::solvers::PROX_WEIGHT_FLOOR)
//! and is dropped, leaving plain local gradient steps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::{ConsensusRule, Engine, EngineConfig, InnerCriterion, MultiplierPolicy};
use crate::error::{Error, Result};
use crate::objectives::{LocalObjective, ObjectiveKind};
use crate::solvers::{SolverKind, SolverSpec, WarmStart};
use crate::topology::{chain_graph, ConsensusGraph, CoordinationSequence, PartialCycleScheduler};
use crate::vector::ParamBlock;

const FEDAVG_PENALTY: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PresetKind {
    Pa,
    Gd,
    Nm,
    Mbgd,
    Sgd,
    FedProx,
    FedAvg,
    Dgd,
    Bcgd,
    Pg,
}

impl PresetKind {
    pub const ALL: [PresetKind; 10] = [
        PresetKind::Pa,
        PresetKind::Gd,
        PresetKind::Nm,
        PresetKind::Mbgd,
        PresetKind::Sgd,
        PresetKind::FedProx,
        PresetKind::FedAvg,
        PresetKind::Dgd,
        PresetKind::Bcgd,
        PresetKind::Pg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PresetKind::Pa => "pa",
            PresetKind::Gd => "gd",
            PresetKind::Nm => "nm",
            PresetKind::Mbgd => "mbgd",
            PresetKind::Sgd => "sgd",
            PresetKind::FedProx => "fedprox",
            PresetKind::FedAvg => "fedavg",
            PresetKind::Dgd => "dgd",
            PresetKind::Bcgd => "bcgd",
            PresetKind::Pg => "pg",
        }
    }

    fn single_client(self) -> bool {
        matches!(self, PresetKind::Pa | PresetKind::Gd | PresetKind::Nm | PresetKind::Pg)
    }

    fn smooth_only(self) -> bool {
        matches!(
            self,
            PresetKind::Gd | PresetKind::Nm | PresetKind::Mbgd | PresetKind::Sgd | PresetKind::Dgd | PresetKind::Bcgd
        )
    }

    /// Whether an iterate is the concatenation of client blocks rather than the server block.
    fn iterate_is_blocks(self) -> bool {
        matches!(self, PresetKind::Dgd | PresetKind::Bcgd | PresetKind::Pg)
    }
}

impl fmt::Display for PresetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PresetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        PresetKind::ALL
            .into_iter()
            .find(|k| k.name() == lower)
            .ok_or_else(|| Error::Preset(format!("unknown preset {s:?}")))
    }
}

/// Everything needed to build an engine that behaves as one classical method.
#[derive(Debug, Clone)]
pub struct Preset {
    pub kind: PresetKind,
    pub config: EngineConfig,
    pub solver: SolverSpec,
    pub graph: ConsensusGraph,
    pub sequence: CoordinationSequence,
    pub policy: MultiplierPolicy,
    pub consensus: ConsensusRule,
    pub l1_weight: f64,
    /// Clients solved per sweep when the preset samples clients.
    pub clients_per_sweep: Option<usize>,
}

/// Builds the preset for `kind` with `n` clients, step or proximal parameter `alpha` and
/// l1 weight `lambda`.
pub fn build_preset(kind: PresetKind, n: usize, alpha: f64, lambda: f64) -> Result<Preset> {
    if kind.single_client() && n != 1 {
        return Err(Error::Preset(format!("{kind} needs exactly one client, got {n}")));
    }
    if !kind.single_client() && n < 2 {
        return Err(Error::Preset(format!("{kind} needs at least two clients, got {n}")));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Preset(format!("step must be positive and finite, got {alpha}")));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Preset(format!("l1 weight must be non-negative, got {lambda}")));
    }
    if kind.smooth_only() && lambda != 0.0 {
        return Err(Error::Preset(format!("{kind} applies to smooth objectives only (l1 weight must be 0)")));
    }

    // 2 rho^2 = 1 / alpha turns the penalty into the proximal weight of a step of length alpha.
    let prox_rho = (1.0 / (2.0 * alpha)).sqrt();
    let uniform = ConsensusRule::Weighted(vec![1.0 / n as f64; n]);
    let anchor = SolverSpec { kind: SolverKind::Anchor, step: alpha, ..SolverSpec::exact() };
    let exact = SolverSpec { step: alpha, ..SolverSpec::exact() };
    let config = |rho_init: f64| EngineConfig {
        criterion: InnerCriterion::B4 { vmax: 1 },
        rho_init,
        ..EngineConfig::default()
    };

    let centralized = |rho: f64, solver: SolverSpec, policy: MultiplierPolicy, consensus: ConsensusRule| {
        Ok::<_, Error>(Preset {
            kind,
            config: config(rho),
            solver,
            graph: ConsensusGraph::centralized(n)?,
            sequence: CoordinationSequence::single_level(n),
            policy,
            consensus,
            l1_weight: lambda,
            clients_per_sweep: None,
        })
    };

    match kind {
        PresetKind::Pa => centralized(prox_rho, exact, MultiplierPolicy::Frozen, ConsensusRule::Augmented),
        PresetKind::Gd => centralized(prox_rho, anchor, MultiplierPolicy::Gradient, ConsensusRule::Augmented),
        PresetKind::Nm => centralized(prox_rho, anchor, MultiplierPolicy::Newton, ConsensusRule::Augmented),
        PresetKind::Mbgd | PresetKind::Sgd => {
            let mut p =
                centralized(prox_rho, anchor, MultiplierPolicy::Gradient, ConsensusRule::AugmentedParticipants)?;
            p.config.final_sweep_full_cycle = false;
            p.clients_per_sweep = Some(1);
            Ok(p)
        }
        PresetKind::FedProx => centralized(prox_rho, exact, MultiplierPolicy::Frozen, uniform),
        PresetKind::FedAvg => {
            let solver = SolverSpec { warm_start: WarmStart::Consensus, ..SolverSpec::bcpg(alpha, 1) };
            centralized(FEDAVG_PENALTY, solver, MultiplierPolicy::Frozen, uniform)
        }
        PresetKind::Dgd => centralized(prox_rho, SolverSpec::bcpg(alpha, 1), MultiplierPolicy::Frozen, uniform),
        PresetKind::Bcgd => Ok(Preset {
            kind,
            config: config(1.0),
            solver: SolverSpec::bcpg(alpha, 1),
            graph: chain_graph(n)?,
            sequence: CoordinationSequence::in_order(n),
            policy: MultiplierPolicy::Frozen,
            consensus: ConsensusRule::Augmented,
            l1_weight: lambda,
            clients_per_sweep: None,
        }),
        PresetKind::Pg => Ok(Preset {
            kind,
            config: config(1.0),
            solver: SolverSpec::bcpg(alpha, 1),
            graph: ConsensusGraph::decentralized(1, &[])?,
            sequence: CoordinationSequence::in_order(1),
            policy: MultiplierPolicy::Frozen,
            consensus: ConsensusRule::Augmented,
            l1_weight: lambda,
            clients_per_sweep: None,
        }),
    }
}

impl Preset {
    /// Number of local gradient steps per sweep (FedAvg's local epochs).
    pub fn with_local_passes(mut self, passes: usize) -> Result<Self> {
        if self.solver.kind != SolverKind::Bcpg {
            return Err(Error::Preset(format!("{} does not take local passes", self.kind)));
        }
        self.solver.local_passes = passes;
        self.solver.validate()?;
        Ok(self)
    }

    /// An engine over `objectives` (the preset's l1 weight replaces theirs), started at `x0`.
    pub fn engine(&self, objectives: &[LocalObjective], x0: &[f64], seed: u64) -> Result<Engine> {
        let objectives = objectives
            .iter()
            .map(|o| o.with_l1_weight(self.l1_weight))
            .collect::<Result<Vec<_>>>()?;
        let mut engine = Engine::new(
            self.config.clone(),
            self.solver,
            objectives,
            self.graph.clone(),
            self.sequence.clone(),
        )?
        .with_policy(self.policy)?
        .with_consensus(self.consensus.clone())?
        .with_initial(x0)?;
        if let Some(k) = self.clients_per_sweep {
            engine = engine.with_partial_cycle(PartialCycleScheduler::new(k, seed)?);
        }
        Ok(engine)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresetRun {
    /// The starting point followed by one iterate per sweep.
    pub iterates: Vec<ParamBlock>,
    /// Clients solved in each sweep.
    pub selections: Vec<Vec<usize>>,
}

/// Runs `steps` sweeps of the preset, each followed by an outer update.
pub fn run_preset(
    preset: &Preset,
    objectives: &[LocalObjective],
    x0: &[f64],
    steps: usize,
    seed: u64,
) -> Result<PresetRun> {
    let mut engine = preset.engine(objectives, x0, seed)?;
    let iterate = |e: &Engine| {
        if preset.kind.iterate_is_blocks() {
            ParamBlock::new(e.state().blocks.iter().flat_map(|b| b.iter().copied()).collect())
        } else {
            e.model()
        }
    };
    let mut iterates = vec![iterate(&engine)];
    let mut selections = Vec::with_capacity(steps);
    for _ in 0..steps {
        engine.sweep()?;
        iterates.push(iterate(&engine));
        selections.push(engine.last_participants().to_vec());
        engine.outer_update()?;
    }
    Ok(PresetRun { iterates, selections })
}

/// Inputs for [`reference_iterates`].
#[derive(Debug, Clone)]
pub struct ReferenceProblem<'a> {
    pub objectives: &'a [LocalObjective],
    pub alpha: f64,
    pub lambda: f64,
    /// Local gradient steps per round (FedAvg).
    pub local_passes: usize,
    /// Client used at each step (MBGD/SGD).
    pub selections: &'a [usize],
}

impl<'a> ReferenceProblem<'a> {
    pub fn new(objectives: &'a [LocalObjective], alpha: f64) -> Self {
        ReferenceProblem { objectives, alpha, lambda: 0.0, local_passes: 1, selections: &[] }
    }
}

/// Textbook iterations of each classical method, independent of the engine.
///
/// Returns `x0` followed by `steps` iterates, in the same layout as [`run_preset`].
pub fn reference_iterates(
    kind: PresetKind,
    problem: &ReferenceProblem<'_>,
    x0: &[f64],
    steps: usize,
) -> Result<Vec<ParamBlock>> {
    let fs = problem.objectives;
    let n = fs.len();
    if n == 0 || n > 5 || x0.len() > 10 || steps > 1000 {
        return Err(Error::Capability("reference oracles take n <= 5, m <= 10, steps <= 1000".into()));
    }
    if fs.iter().any(|f| f.dim() != x0.len()) {
        return Err(Error::dim("objective and start point dimensions differ"));
    }
    let a = problem.alpha;
    let lam = problem.lambda;
    let grad = |i: usize, x: &[f64]| -> Result<Vec<f64>> { Ok(fs[i].grad_smooth(x)?.into_vec()) };
    let step = |x: &[f64], g: &[f64]| -> Vec<f64> { x.iter().zip(g).map(|(x, g)| x - a * g).collect() };
    let mean = |xs: &[Vec<f64>]| -> Vec<f64> {
        (0..x0.len()).map(|r| xs.iter().map(|x| x[r]).sum::<f64>() / xs.len() as f64).collect()
    };
    let mut out = Vec::with_capacity(steps + 1);

    match kind {
        PresetKind::Pa | PresetKind::FedProx => {
            if fs.iter().any(|f| f.kind() != ObjectiveKind::LeastSquares) || lam != 0.0 {
                return Err(Error::Capability("proximal oracles take smooth least squares only".into()));
            }
            let mut x = x0.to_vec();
            out.push(x.clone());
            for _ in 0..steps {
                let locals = (0..n).map(|i| ls_prox(&fs[i], &x, a)).collect::<Result<Vec<_>>>()?;
                x = mean(&locals);
                out.push(x.clone());
            }
        }
        PresetKind::Gd | PresetKind::Pg => {
            let mut x = x0.to_vec();
            out.push(x.clone());
            for _ in 0..steps {
                let y = step(&x, &grad(0, &x)?);
                x = y.iter().map(|v| v.signum() * (v.abs() - a * lam).max(0.0)).collect();
                out.push(x.clone());
            }
        }
        PresetKind::Nm => {
            let mut x = x0.to_vec();
            out.push(x.clone());
            for _ in 0..steps {
                let h = fs[0].hessian_smooth(&x)?;
                let rows: Vec<Vec<f64>> = (0..x.len()).map(|r| (0..x.len()).map(|c| h[(r, c)]).collect()).collect();
                let d = gauss_solve(rows, grad(0, &x)?)?;
                x = x.iter().zip(&d).map(|(x, d)| x - d).collect();
                out.push(x.clone());
            }
        }
        PresetKind::Mbgd | PresetKind::Sgd => {
            if problem.selections.len() < steps || problem.selections.iter().any(|&i| i >= n) {
                return Err(Error::param("one valid client selection per step required"));
            }
            let mut x = x0.to_vec();
            out.push(x.clone());
            for &i in &problem.selections[..steps] {
                x = step(&x, &grad(i, &x)?);
                out.push(x.clone());
            }
        }
        PresetKind::FedAvg => {
            let mut x = x0.to_vec();
            out.push(x.clone());
            for _ in 0..steps {
                let mut locals = Vec::with_capacity(n);
                for i in 0..n {
                    let mut y = x.clone();
                    for _ in 0..problem.local_passes {
                        let z = step(&y, &grad(i, &y)?);
                        y = z.iter().map(|v| v.signum() * (v.abs() - a * lam).max(0.0)).collect();
                    }
                    locals.push(y);
                }
                x = mean(&locals);
                out.push(x.clone());
            }
        }
        PresetKind::Dgd => {
            let mut xs = vec![x0.to_vec(); n];
            out.push(xs.concat());
            for _ in 0..steps {
                let avg = mean(&xs);
                xs = (0..n).map(|i| Ok(step(&avg, &grad(i, &xs[i])?))).collect::<Result<Vec<_>>>()?;
                out.push(xs.concat());
            }
        }
        PresetKind::Bcgd => {
            // Gauss-Seidel gradient steps on sum_i f_i + sum_i |x_i - x_{i+1}|^2.
            let mut xs = vec![x0.to_vec(); n];
            out.push(xs.concat());
            for _ in 0..steps {
                for i in 0..n {
                    let mut g = grad(i, &xs[i])?;
                    for j in [i.wrapping_sub(1), i + 1] {
                        if j < n {
                            for r in 0..g.len() {
                                g[r] += 2.0 * (xs[i][r] - xs[j][r]);
                            }
                        }
                    }
                    xs[i] = step(&xs[i], &g);
                }
                out.push(xs.concat());
            }
        }
    }
    Ok(out.into_iter().map(ParamBlock::new).collect())
}

/// `argmin_x sum (a.x - b)^2 + |x - center|^2 / (2 alpha)`
fn ls_prox(f: &LocalObjective, center: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let m = center.len();
    let mut lhs = vec![vec![0.0; m]; m];
    let mut rhs: Vec<f64> = center.iter().map(|c| c / alpha).collect();
    for (r, row) in lhs.iter_mut().enumerate() {
        row[r] = 1.0 / alpha;
    }
    for (a, b) in f.rows() {
        for r in 0..m {
            rhs[r] += 2.0 * a[r] * b;
            for c in 0..m {
                lhs[r][c] += 2.0 * a[r] * a[c];
            }
        }
    }
    gauss_solve(lhs, rhs)
}

/// Gaussian elimination with partial pivoting.
fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let m = b.len();
    for col in 0..m {
        let pivot = (col..m)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::Capability("singular system in reference oracle".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..m {
            let factor = a[row][col] / a[col][col];
            for c in col..m {
                a[row][c] -= factor * a[col][c];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; m];
    for row in (0..m).rev() {
        let s: f64 = (row + 1..m).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::engine::{Phase, StopStatus};
    use crate::objectives::Sample;

    fn square() -> Vec<LocalObjective> {
        vec![LocalObjective::separable_quadratic(&[0.0]).unwrap()]
    }

    fn random_ls(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<LocalObjective> {
        (0..n)
            .map(|_| {
                let samples: Vec<Sample> = (0..m + 1)
                    .map(|_| Sample {
                        features: (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        target: rng.random_range(-2.0..2.0),
                    })
                    .collect();
                LocalObjective::new(ObjectiveKind::LeastSquares, &samples, samples.len(), 0.0).unwrap()
            })
            .collect()
    }

    fn assert_close(a: &[ParamBlock], b: &[ParamBlock], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (k, (x, y)) in a.iter().zip(b).enumerate() {
            for (u, v) in x.iter().zip(y.iter()) {
                assert!((u - v).abs() <= tol, "iterate {k}: {u} vs {v}");
            }
        }
    }

    #[test]
    fn preset_client_counts_are_checked() {
        assert!(matches!(build_preset(PresetKind::Pa, 2, 0.1, 0.0), Err(Error::Preset(_))));
        assert!(matches!(build_preset(PresetKind::FedProx, 1, 0.1, 0.0), Err(Error::Preset(_))));
        assert!(matches!(build_preset(PresetKind::Gd, 1, 0.1, 0.5), Err(Error::Preset(_))));
        assert!(build_preset(PresetKind::Pg, 1, 0.1, 0.5).is_ok());
        assert_eq!("FedAvg".parse::<PresetKind>().unwrap(), PresetKind::FedAvg);
    }

    #[test]
    fn pa_on_square_shrinks_geometrically() {
        let alpha = 0.3;
        let p = build_preset(PresetKind::Pa, 1, alpha, 0.0).unwrap();
        let run = run_preset(&p, &square(), &[1.0], 20, 0).unwrap();
        let mut x = 1.0;
        for it in &run.iterates {
            assert_relative_eq!(it[0], x, epsilon = 1e-14);
            x /= 1.0 + 2.0 * alpha;
        }
    }

    #[test]
    fn gd_on_square() {
        let p = build_preset(PresetKind::Gd, 1, 0.1, 0.0).unwrap();
        let run = run_preset(&p, &square(), &[1.0], 10, 0).unwrap();
        for (k, it) in run.iterates.iter().enumerate() {
            assert_relative_eq!(it[0], 0.8f64.powi(k as i32), epsilon = 1e-14);
        }
        let oracle = reference_iterates(PresetKind::Gd, &ReferenceProblem::new(&square(), 0.1), &[1.0], 3).unwrap();
        let got: Vec<f64> = oracle.iter().map(|x| x[0]).collect();
        assert_eq!(got, vec![1.0, 0.8, 0.64, 0.8 * 0.64]);
    }

    #[test]
    fn nm_solves_quadratic_in_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fs = random_ls(&mut rng, 1, 3);
        let x0 = [0.5, -1.0, 2.0];
        let oracle = reference_iterates(PresetKind::Nm, &ReferenceProblem::new(&fs, 1.0), &x0, 2).unwrap();
        let g = fs[0].grad_smooth(&oracle[1]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-10));
        let p = build_preset(PresetKind::Nm, 1, 1.0, 0.0).unwrap();
        assert_close(&run_preset(&p, &fs, &x0, 2, 0).unwrap().iterates, &oracle, 1e-10);
    }

    #[test]
    fn fedprox_oracle_matches_hand_solution() {
        // Clients (x - 1)^2 and (x + 3)^2, alpha = 0.5: each prox is (2c + 2x)/4.
        let fs = vec![
            LocalObjective::separable_quadratic(&[1.0]).unwrap(),
            LocalObjective::separable_quadratic(&[-3.0]).unwrap(),
        ];
        let it = reference_iterates(PresetKind::FedProx, &ReferenceProblem::new(&fs, 0.5), &[2.0], 2).unwrap();
        let x1 = ((1.0 + 2.0) / 2.0 + (-3.0 + 2.0) / 2.0) / 2.0;
        let x2 = ((1.0 + x1) / 2.0 + (-3.0 + x1) / 2.0) / 2.0;
        assert_relative_eq!(it[1][0], x1, epsilon = 1e-15);
        assert_relative_eq!(it[2][0], x2, epsilon = 1e-15);
    }

    #[test]
    fn presets_match_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = 3;
        let x0 = [0.2, -0.4, 0.9];
        for kind in [PresetKind::FedProx, PresetKind::FedAvg, PresetKind::Dgd, PresetKind::Bcgd, PresetKind::Mbgd] {
            let fs = random_ls(&mut rng, 3, m);
            let alpha = 0.02;
            let p = build_preset(kind, 3, alpha, 0.0).unwrap();
            let run = run_preset(&p, &fs, &x0, 50, 5).unwrap();
            let sel: Vec<usize> = run.selections.iter().map(|s| s[0]).collect();
            let prob = ReferenceProblem { selections: &sel, ..ReferenceProblem::new(&fs, alpha) };
            let oracle = reference_iterates(kind, &prob, &x0, 50).unwrap();
            assert_close(&run.iterates, &oracle, 1e-10);
        }
    }

    #[test]
    fn fedavg_on_identical_clients_is_gd() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = random_ls(&mut rng, 1, 2).remove(0);
        let p = build_preset(PresetKind::FedAvg, 2, 0.05, 0.0).unwrap();
        let run = run_preset(&p, &[f.clone(), f.clone()], &[1.0, 1.0], 30, 0).unwrap();
        let gd = reference_iterates(PresetKind::Gd, &ReferenceProblem::new(&[f], 0.05), &[1.0, 1.0], 30).unwrap();
        assert_close(&run.iterates, &gd, 1e-12);
    }

    #[test]
    fn enabling_multiplier_updates_closes_fedprox_gap() {
        let fs = vec![
            LocalObjective::separable_quadratic(&[1.0, 4.0]).unwrap(),
            LocalObjective::separable_quadratic(&[-3.0, 0.0]).unwrap(),
        ];
        let p = build_preset(PresetKind::FedProx, 2, 0.5, 0.0).unwrap();
        let final_gap = |policy: MultiplierPolicy| {
            let mut q = p.clone();
            q.policy = policy;
            q.consensus = ConsensusRule::Augmented;
            q.config.max_total_inner = 200;
            let mut e = q.engine(&fs, &[0.0, 0.0], 0).unwrap();
            e.run().unwrap().primal_inf
        };
        let frozen = final_gap(MultiplierPolicy::Frozen);
        let updated = final_gap(MultiplierPolicy::Update);
        assert!(frozen > 0.5, "{frozen}");
        assert!(updated < frozen * 1e-3, "{updated} vs {frozen}");
    }

    #[test]
    fn one_sweep_per_multiplier_update() {
        let fs = vec![
            LocalObjective::separable_quadratic(&[1.0]).unwrap(),
            LocalObjective::separable_quadratic(&[5.0]).unwrap(),
        ];
        let mut p = build_preset(PresetKind::FedProx, 2, 1.0, 0.0).unwrap();
        p.policy = MultiplierPolicy::Update;
        p.consensus = ConsensusRule::Augmented;
        p.config.max_total_inner = 50;
        let mut e = p.engine(&fs, &[0.0], 0).unwrap();
        let mut phases = Vec::new();
        let s = e.run_with(|_, ph| phases.push(ph)).unwrap();
        let sweeps = phases.iter().filter(|&&p| p == Phase::Sweep).count();
        let updates = phases.iter().filter(|&&p| p == Phase::OuterUpdate).count();
        assert_eq!(sweeps, updates + 1);
        assert!(phases.chunks(2).all(|c| c[0] == Phase::Sweep));
        assert!(e.trace().iter().all(|t| t.v == 1));
        assert_eq!(s.status, StopStatus::Optimal);
    }

    #[test]
    fn pg_matches_ista() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let fs = random_ls(&mut rng, 1, 4);
        let x0 = [1.0, -1.0, 0.5, 0.0];
        let p = build_preset(PresetKind::Pg, 1, 0.05, 2.0).unwrap();
        let run = run_preset(&p, &fs, &x0, 60, 0).unwrap();
        let prob = ReferenceProblem { lambda: 2.0, ..ReferenceProblem::new(&fs, 0.05) };
        assert_close(&run.iterates, &reference_iterates(PresetKind::Pg, &prob, &x0, 60).unwrap(), 1e-12);
        assert!(run.iterates.last().unwrap().contains(&0.0));
    }
}
