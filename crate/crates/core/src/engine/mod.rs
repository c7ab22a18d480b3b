//! Outer/inner loop drivers for the centralized and decentralized decompositions.

mod alm;
mod config;

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use alm::{alm_solve, multiplier_update, AffineConstraint, AlmOutcome, AlmSubproblem, AlmTraceRecord};
pub use config::{EngineConfig, InnerCriterion, RhoSchedule};

use crate::error::{Error, Result};
use crate::objectives::LocalObjective;
use crate::solvers::{server_consensus, LocalProblem, Neighbor, SolverKind, SolverSpec, WarmStart};
use crate::topology::{
    drop_client, ConsensusGraph, CoordinationMode, CoordinationSequence, GraphMode, PartialCycleScheduler,
};
use crate::vector::{assemble_residual_report, max_abs, EdgeRole, EdgeVector, ParamBlock, ResidualReport};

/// A consensus constraint: client-to-server, or between two clients with `i < j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Edge {
    Server(usize),
    Peer(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeDuals {
    pub multiplier: Vec<f64>,
    pub penalty: Vec<f64>,
}

/// How multipliers evolve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MultiplierPolicy {
    /// `mu += 2 rho o rho o C` after each inner loop.
    Update,
    /// Held at their initial value.
    Frozen,
    /// Centralized only: after each client step set `mu_i = grad f_i(x_i)`.
    Gradient,
    /// Centralized only: set `mu_i = 2 rho_i^2 o H_i^{-1} grad f_i(x_i)`.
    Newton,
}

/// How the server block is formed in centralized mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsensusRule {
    /// Exact minimizer of the augmented terms over all active clients.
    Augmented,
    /// Exact minimizer over the clients scheduled in the sweep.
    AugmentedParticipants,
    /// Weighted average with per-client weights (renormalized over active clients).
    Weighted(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopStatus {
    Optimal,
    Budget,
    MaxOuter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    ContinueInner,
    GoOuter,
    Terminate(StopStatus),
}

/// Point in the run reported to observers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Sweep,
    OuterUpdate,
    Dropout(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: usize,
    pub v: usize,
    pub primal_inf: f64,
    pub dual_inf: f64,
    pub surrogate_value: Option<f64>,
    pub elapsed_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    /// Outer index, starting at 1.
    pub k: usize,
    /// Inner sweeps in the current outer loop.
    pub v: usize,
    /// Client blocks by id; dropped clients keep their last value.
    pub blocks: Vec<ParamBlock>,
    pub x_hat: Option<ParamBlock>,
    pub edges: BTreeMap<Edge, EdgeDuals>,
    pub residuals: Option<ResidualReport>,
    pub total_inner: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub status: StopStatus,
    pub outer_loops: usize,
    pub total_inner: usize,
    pub primal_inf: f64,
    pub dual_inf: f64,
}

/// Client id, new block, and the multiplier a linearizing policy sets for it.
type SolvedBlock = (usize, ParamBlock, Option<Vec<f64>>);

pub struct Engine {
    cfg: EngineConfig,
    solver: SolverSpec,
    objectives: Vec<LocalObjective>,
    graph: ConsensusGraph,
    base: CoordinationSequence,
    policy: MultiplierPolicy,
    consensus: ConsensusRule,
    scheduler: Option<PartialCycleScheduler>,
    dropout: BTreeMap<usize, Vec<usize>>,
    state: EngineState,
    trace: Vec<TraceRecord>,
    started: Instant,
    last_sweep_full: bool,
    last_participants: Vec<usize>,
}

impl Engine {
    /// Centralized engine: every client coupled to a server block.
    pub fn centralized(cfg: EngineConfig, solver: SolverSpec, objectives: Vec<LocalObjective>) -> Result<Self> {
        let n = objectives.len();
        Self::new(cfg, solver, objectives, ConsensusGraph::centralized(n)?, CoordinationSequence::single_level(n))
    }

    pub fn new(
        cfg: EngineConfig,
        solver: SolverSpec,
        objectives: Vec<LocalObjective>,
        graph: ConsensusGraph,
        base: CoordinationSequence,
    ) -> Result<Self> {
        cfg.validate()?;
        solver.validate()?;
        let Some(first) = objectives.first() else {
            return Err(Error::param("no client objectives"));
        };
        let m = first.dim();
        if let Some(i) = objectives.iter().position(|o| o.dim() != m) {
            return Err(Error::dim(format!("client {i} has dimension {}, expected {m}", objectives[i].dim())));
        }
        if objectives.len() != graph.capacity() {
            return Err(Error::dim(format!(
                "{} objectives for a graph of {} clients",
                objectives.len(),
                graph.capacity()
            )));
        }
        base.validate_for(&graph)?;
        if graph.mode() == GraphMode::Decentralized && solver.kind == SolverKind::Anchor {
            return Err(Error::Capability("anchor solver applies to centralized runs only".into()));
        }
        let edges = initial_edges(&graph, m, cfg.rho_init);
        let state = EngineState {
            k: 1,
            v: 0,
            blocks: vec![ParamBlock::zeros(m); objectives.len()],
            x_hat: (graph.mode() == GraphMode::Centralized).then(|| ParamBlock::zeros(m)),
            edges,
            residuals: None,
            total_inner: 0,
        };
        Ok(Engine {
            cfg,
            solver,
            objectives,
            graph,
            base,
            policy: MultiplierPolicy::Update,
            consensus: ConsensusRule::Augmented,
            scheduler: None,
            dropout: BTreeMap::new(),
            state,
            trace: Vec::new(),
            started: Instant::now(),
            last_sweep_full: true,
            last_participants: Vec::new(),
        })
    }

    pub fn with_policy(mut self, policy: MultiplierPolicy) -> Result<Self> {
        if matches!(policy, MultiplierPolicy::Gradient | MultiplierPolicy::Newton)
            && self.graph.mode() != GraphMode::Centralized
        {
            return Err(Error::Capability(format!("{policy:?} multipliers apply to centralized runs only")));
        }
        self.policy = policy;
        Ok(self)
    }

    pub fn with_consensus(mut self, rule: ConsensusRule) -> Result<Self> {
        if let ConsensusRule::Weighted(w) = &rule {
            if w.len() != self.objectives.len() || w.iter().any(|&p| !(p > 0.0)) {
                return Err(Error::param("one positive consensus weight per client required"));
            }
        }
        self.consensus = rule;
        Ok(self)
    }

    pub fn with_partial_cycle(mut self, scheduler: PartialCycleScheduler) -> Self {
        self.scheduler = Some(scheduler);
        self
    }

    /// Clients to drop right before the given (1-based, cumulative) sweep runs.
    pub fn with_dropout(mut self, schedule: BTreeMap<usize, Vec<usize>>) -> Self {
        self.dropout = schedule;
        self
    }

    /// Sets every block (and the server block) to `x0`.
    pub fn with_initial(mut self, x0: &[f64]) -> Result<Self> {
        let m = self.dim();
        if x0.len() != m {
            return Err(Error::dim(format!("initial point has length {}, expected {m}", x0.len())));
        }
        for b in &mut self.state.blocks {
            *b = ParamBlock::new(x0.to_vec());
        }
        if let Some(x) = &mut self.state.x_hat {
            *x = ParamBlock::new(x0.to_vec());
        }
        Ok(self)
    }

    /// Sets client blocks individually.
    pub fn with_blocks(mut self, blocks: Vec<ParamBlock>) -> Result<Self> {
        let m = self.dim();
        if blocks.len() != self.state.blocks.len() || blocks.iter().any(|b| b.len() != m) {
            return Err(Error::dim("one block of the model dimension per client required"));
        }
        self.state.blocks = blocks;
        Ok(self)
    }

    pub fn with_multipliers(mut self, edge: Edge, multiplier: Vec<f64>) -> Result<Self> {
        let m = self.dim();
        let duals = self
            .state
            .edges
            .get_mut(&edge)
            .ok_or_else(|| Error::param(format!("no edge {edge:?}")))?;
        if multiplier.len() != m {
            return Err(Error::dim("multiplier length"));
        }
        duals.multiplier = multiplier;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.objectives[0].dim()
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &ConsensusGraph {
        &self.graph
    }

    pub fn sequence(&self) -> &CoordinationSequence {
        &self.base
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn objectives(&self) -> &[LocalObjective] {
        &self.objectives
    }

    /// Evaluation model: the server block, or the mean of active client blocks.
    pub fn model(&self) -> ParamBlock {
        if let Some(x) = &self.state.x_hat {
            return x.clone();
        }
        let active = self.graph.active();
        let mut mean = vec![0.0; self.dim()];
        for &i in active {
            for (acc, v) in mean.iter_mut().zip(self.state.blocks[i].iter()) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= active.len() as f64);
        ParamBlock::new(mean)
    }

    /// Sum of all multipliers (centralized identity check).
    pub fn multiplier_sum(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.dim()];
        for d in self.state.edges.values() {
            for (s, v) in sum.iter_mut().zip(&d.multiplier) {
                *s += v;
            }
        }
        sum
    }

    pub fn drop_client(&mut self, id: usize) -> Result<()> {
        let r = drop_client(&self.base, &self.graph, id)?;
        let m = self.dim();
        match self.graph.mode() {
            GraphMode::Centralized => {
                self.state.edges.remove(&Edge::Server(id));
            }
            GraphMode::Decentralized => {
                for (a, b) in r.removed_edges {
                    self.state.edges.remove(&Edge::Peer(a, b));
                }
                for (a, b) in r.added_edges {
                    self.state.edges.insert(
                        Edge::Peer(a, b),
                        EdgeDuals { multiplier: vec![0.0; m], penalty: vec![self.cfg.rho_init; m] },
                    );
                }
            }
        }
        self.graph = r.graph;
        self.base = r.sequence;
        Ok(())
    }

    /// Augmented Lagrangian at the current iterate and multipliers.
    pub fn surrogate_value(&self) -> Result<f64> {
        let mut total = 0.0;
        for &i in self.graph.active() {
            total += self.objectives[i].eval(&self.state.blocks[i])?;
        }
        for (edge, duals) in &self.state.edges {
            let c = self.edge_residual(*edge);
            for r in 0..c.len() {
                total += duals.multiplier[r] * c[r] + (duals.penalty[r] * c[r]).powi(2);
            }
        }
        Ok(total)
    }

    /// Constraint violation of every edge at the current iterate, in edge order.
    pub fn primal_residuals(&self) -> Vec<EdgeVector> {
        self.state
            .edges
            .keys()
            .map(|&e| EdgeVector::new(EdgeRole::PrimalResidual, self.edge_residual(e)).expect("residual role"))
            .collect()
    }

    fn edge_residual(&self, edge: Edge) -> Vec<f64> {
        let b = &self.state.blocks;
        match edge {
            Edge::Server(i) => self.state.x_hat.as_ref().expect("server block").delta(&b[i]),
            Edge::Peer(i, j) => b[i].delta(&b[j]),
        }
        .expect("blocks share a dimension")
        .into_vec()
    }

    /// Runs until termination.
    pub fn run(&mut self) -> Result<RunSummary> {
        self.run_with(|_, _| {})
    }

    /// Runs until termination, reporting each sweep, dropout and multiplier update.
    pub fn run_with(&mut self, mut observe: impl FnMut(&Engine, Phase)) -> Result<RunSummary> {
        loop {
            let next = self.state.total_inner + 1;
            if let Some(ids) = self.dropout.remove(&next) {
                for id in ids {
                    self.drop_client(id)?;
                    observe(self, Phase::Dropout(id));
                }
            }
            self.sweep()?;
            observe(self, Phase::Sweep);
            let mut decision = self.stopping_check();
            if decision == StopDecision::GoOuter && self.cfg.final_sweep_full_cycle && !self.last_sweep_full {
                self.sweep_with(self.base.clone())?;
                observe(self, Phase::Sweep);
                decision = match self.stopping_check() {
                    StopDecision::Terminate(s) => StopDecision::Terminate(s),
                    _ => StopDecision::GoOuter,
                };
            }
            match decision {
                StopDecision::ContinueInner => {}
                StopDecision::Terminate(status) => return Ok(self.summary(status)),
                StopDecision::GoOuter => {
                    if self.state.k >= self.cfg.max_outer {
                        return Ok(self.summary(StopStatus::MaxOuter));
                    }
                    self.outer_update()?;
                    observe(self, Phase::OuterUpdate);
                }
            }
        }
    }

    fn summary(&self, status: StopStatus) -> RunSummary {
        let r = self.state.residuals.as_ref();
        RunSummary {
            status,
            outer_loops: self.state.k,
            total_inner: self.state.total_inner,
            primal_inf: r.map_or(f64::INFINITY, |r| r.primal_inf_norm),
            dual_inf: r.map_or(f64::INFINITY, |r| r.dual_inf_norm),
        }
    }

    /// One inner sweep under the configured coordination.
    pub fn sweep(&mut self) -> Result<()> {
        let seq = match &mut self.scheduler {
            Some(s) => s.next_sweep(&self.base, &self.graph),
            None => self.base.clone(),
        };
        self.sweep_with(seq)
    }

    /// One inner sweep over an explicit sequence.
    pub fn sweep_with(&mut self, seq: CoordinationSequence) -> Result<()> {
        seq.validate_for(&self.graph)?;
        self.state.v += 1;
        self.state.total_inner += 1;
        let full = seq.mode() == CoordinationMode::FullCycle;
        let report = match self.graph.mode() {
            GraphMode::Centralized => self.cc_sweep(&seq)?,
            GraphMode::Decentralized => self.dc_sweep(&seq)?,
        };
        self.last_sweep_full = full;
        self.last_participants = seq.iter().copied().collect();
        let surrogate_value = if self.cfg.trace_surrogate { Some(self.surrogate_value()?) } else { None };
        self.trace.push(TraceRecord {
            k: self.state.k,
            v: self.state.v,
            primal_inf: report.primal_inf_norm,
            dual_inf: report.dual_inf_norm,
            surrogate_value,
            elapsed_ns: self.started.elapsed().as_nanos() as u64,
        });
        self.state.residuals = Some(report);
        Ok(())
    }

    fn init_for<'a>(&'a self, i: usize, anchor: Option<&'a ParamBlock>) -> &'a [f64] {
        match (self.solver.warm_start, anchor) {
            (WarmStart::Consensus, Some(a)) => a,
            _ => &self.state.blocks[i],
        }
    }

    fn check_finite(&self, i: usize, x: &ParamBlock) -> Result<()> {
        if x.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { k: self.state.k, v: self.state.v, client: i })
        }
    }

    fn cc_sweep(&mut self, seq: &CoordinationSequence) -> Result<ResidualReport> {
        let x_hat_prev = self.state.x_hat.clone().expect("centralized engine has a server block");
        for (li, level) in seq.levels().iter().enumerate() {
            let solved: Vec<Result<SolvedBlock>> = level
                .par_iter()
                .map(|&i| {
                    let duals = &self.state.edges[&Edge::Server(i)];
                    let obj = &self.objectives[i];
                    let wrap = |e: Error| Error::Sweep { client: i, level: li + 1, source: Box::new(e) };
                    let prob = LocalProblem::centralized(obj, &x_hat_prev, &duals.multiplier, &duals.penalty)
                        .map_err(wrap)?;
                    let x = prob.solve(self.init_for(i, Some(&x_hat_prev)), &self.solver).map_err(wrap)?;
                    self.check_finite(i, &x)?;
                    let mu = match self.policy {
                        MultiplierPolicy::Gradient => Some(obj.grad_smooth(&x)?.into_vec()),
                        MultiplierPolicy::Newton => {
                            let g = DVector::from_vec(obj.grad_smooth(&x)?.into_vec());
                            let h = obj.hessian_smooth(&x)?;
                            let step = h
                                .cholesky()
                                .map(|c| c.solve(&g))
                                .ok_or_else(|| wrap(Error::Capability("Hessian is not positive definite".into())))?;
                            Some(step.iter().zip(&duals.penalty).map(|(d, r)| 2.0 * r * r * d).collect())
                        }
                        _ => None,
                    };
                    Ok((i, x, mu))
                })
                .collect();
            for res in solved {
                let (i, x, mu) = res?;
                self.state.blocks[i] = x;
                if let Some(mu) = mu {
                    self.state.edges.get_mut(&Edge::Server(i)).expect("edge").multiplier = mu;
                }
            }
        }

        let members: Vec<usize> = match self.consensus {
            ConsensusRule::AugmentedParticipants => {
                let mut p: Vec<usize> = seq.iter().copied().collect();
                p.sort_unstable();
                p.dedup();
                p
            }
            _ => self.graph.active().to_vec(),
        };
        let xs: Vec<&[f64]> = members.iter().map(|&i| self.state.blocks[i].as_slice()).collect();
        let duals: Vec<&EdgeDuals> = members.iter().map(|&i| &self.state.edges[&Edge::Server(i)]).collect();
        let mus: Vec<&[f64]> = duals.iter().map(|d| d.multiplier.as_slice()).collect();
        let rhos: Vec<&[f64]> = duals.iter().map(|d| d.penalty.as_slice()).collect();
        let x_hat = match &self.consensus {
            ConsensusRule::Weighted(w) => {
                if mus.iter().any(|mu| max_abs(mu) != 0.0) {
                    return Err(Error::param("weighted consensus requires zero multipliers"));
                }
                let total: f64 = members.iter().map(|&i| w[i]).sum();
                let p: Vec<f64> = members.iter().map(|&i| w[i] / total).collect();
                weighted_mean(&xs, &p)
            }
            _ => server_consensus(&xs, &mus, &rhos, None)?,
        };
        if !x_hat.is_finite() {
            return Err(Error::NonFinite { k: self.state.k, v: self.state.v, client: usize::MAX });
        }
        let dual = x_hat.delta(&x_hat_prev)?;
        self.state.x_hat = Some(x_hat);
        assemble_residual_report(self.primal_residuals(), vec![dual])
    }

    fn dc_sweep(&mut self, seq: &CoordinationSequence) -> Result<ResidualReport> {
        let prev = self.state.blocks.clone();
        let adjacency: BTreeMap<usize, Vec<usize>> =
            self.graph.active().iter().map(|&i| (i, self.graph.neighbors(i))).collect();
        for (li, level) in seq.levels().iter().enumerate() {
            let solved: Vec<Result<(usize, ParamBlock)>> = level
                .par_iter()
                .map(|&s| {
                    let blocks = &self.state.blocks;
                    let mut higher = Vec::new();
                    let mut lower = Vec::new();
                    for &j in &adjacency[&s] {
                        let key = if s < j { Edge::Peer(s, j) } else { Edge::Peer(j, s) };
                        let d = &self.state.edges[&key];
                        let nb = Neighbor { value: &blocks[j], multiplier: &d.multiplier, penalty: &d.penalty };
                        if j > s {
                            higher.push(nb);
                        } else {
                            lower.push(nb);
                        }
                    }
                    let wrap = |e: Error| Error::Sweep { client: s, level: li + 1, source: Box::new(e) };
                    let prob = LocalProblem::decentralized(&self.objectives[s], &higher, &lower).map_err(wrap)?;
                    let x = prob.solve(&blocks[s], &self.solver).map_err(wrap)?;
                    self.check_finite(s, &x)?;
                    Ok((s, x))
                })
                .collect();
            for res in solved {
                let (s, x) = res?;
                self.state.blocks[s] = x;
            }
        }
        // With a single level there is no later block; every block's change counts.
        let first: &[usize] = if self.base.levels().len() > 1 { self.base.first_level() } else { &[] };
        let dual = self
            .graph
            .active()
            .iter()
            .filter(|i| !first.contains(i))
            .map(|&i| self.state.blocks[i].delta(&prev[i]))
            .collect::<Result<Vec<_>>>()?;
        assemble_residual_report(self.primal_residuals(), dual)
    }

    /// Clients solved in the latest sweep, in solve order.
    pub fn last_participants(&self) -> &[usize] {
        &self.last_participants
    }

    /// Residuals of the latest sweep.
    pub fn compute_residuals(&self) -> Result<&ResidualReport> {
        match (&self.state.residuals, self.state.v) {
            (Some(r), v) if v > 0 => Ok(r),
            _ => Err(Error::Precondition("no sweep has run in this outer loop".into())),
        }
    }

    pub fn stopping_check(&self) -> StopDecision {
        let Some(r) = &self.state.residuals else {
            return StopDecision::ContinueInner;
        };
        if self.state.total_inner >= self.cfg.max_total_inner {
            return StopDecision::Terminate(StopStatus::Budget);
        }
        let dual_ok = r.dual_inf_norm <= self.cfg.eps_dual;
        if r.primal_inf_norm <= self.cfg.eps_pri && dual_ok {
            return StopDecision::Terminate(StopStatus::Optimal);
        }
        let go = match self.cfg.criterion {
            InnerCriterion::B1 => dual_ok,
            InnerCriterion::B2 { .. } => r.dual_inf_norm <= self.cfg.dual_tolerance(self.state.k),
            InnerCriterion::B3 { .. } | InnerCriterion::B4 { .. } => {
                dual_ok || Some(self.state.v) >= self.cfg.sweep_cap(self.state.k)
            }
        };
        if go {
            StopDecision::GoOuter
        } else {
            StopDecision::ContinueInner
        }
    }

    /// Multiplier step from the latest primal residuals, then the penalty schedule.
    pub fn outer_update(&mut self) -> Result<()> {
        let report = self.compute_residuals()?.clone();
        if self.policy == MultiplierPolicy::Update {
            for ((_, duals), c) in self.state.edges.iter_mut().zip(&report.per_edge_primal) {
                duals.multiplier = multiplier_update(&duals.multiplier, &duals.penalty, c.as_slice())?;
            }
        }
        for duals in self.state.edges.values_mut() {
            for r in duals.penalty.iter_mut() {
                *r = self.cfg.rho_schedule.advance(*r);
            }
        }
        self.state.k += 1;
        self.state.v = 0;
        Ok(())
    }
}

fn initial_edges(graph: &ConsensusGraph, m: usize, rho: f64) -> BTreeMap<Edge, EdgeDuals> {
    let duals = || EdgeDuals { multiplier: vec![0.0; m], penalty: vec![rho; m] };
    match graph.mode() {
        GraphMode::Centralized => graph.active().iter().map(|&i| (Edge::Server(i), duals())).collect(),
        GraphMode::Decentralized => graph.edges().iter().map(|&(i, j)| (Edge::Peer(i, j), duals())).collect(),
    }
}

fn weighted_mean(xs: &[&[f64]], p: &[f64]) -> ParamBlock {
    let mut out = vec![0.0; xs[0].len()];
    for (x, w) in xs.iter().zip(p) {
        for (o, v) in out.iter_mut().zip(x.iter()) {
            *o += w * v;
        }
    }
    ParamBlock::new(out)
}

/// Largest entry of the multiplier sum, for identity checks.
pub fn multiplier_sum_norm(engine: &Engine) -> f64 {
    max_abs(&engine.multiplier_sum())
}

#[cfg(test)]
mod tests;
