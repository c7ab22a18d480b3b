//! Single-process federation runs: build clients from a partition, drive the engine, score the
//! result, and aggregate over seeds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    add_intercept, class_indices, load_csv, load_mnist_3v7, partition_iid_even, partition_stratified_strides,
    standardize, CsvOptions, DatasetTable, Partition, PixelScale, Task,
};
use crate::engine::{
    ConsensusRule, Engine, EngineConfig, InnerCriterion, MultiplierPolicy, Phase, RunSummary, StopStatus, TraceRecord,
};
use crate::error::{Error, Result};
use crate::objectives::SampleStore;
use crate::recoveries::{build_preset, PresetKind};
use crate::solvers::SolverSpec;
use crate::topology::{
    chain_graph, levels_from_matrix, ConsensusGraph, CoordinationSequence, HierarchicalMatrix, PartialCycleScheduler,
};
use crate::vector::{dot, ParamBlock};

/// Data directory: `DALD_DATA_DIR` if set, else `data/` at the workspace root.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os("DALD_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Centralized with multipliers frozen at zero and a uniform average at the server.
    FedProx,
    DaldCc,
    DaldDc,
    Preset(PresetKind),
}

impl Algorithm {
    pub fn name(&self) -> String {
        match self {
            Algorithm::FedProx => "fedprox".into(),
            Algorithm::DaldCc => "dald-cc".into(),
            Algorithm::DaldDc => "dald-dc".into(),
            Algorithm::Preset(k) => format!("preset-{k}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fedprox" => Ok(Algorithm::FedProx),
            "dald-cc" => Ok(Algorithm::DaldCc),
            "dald-dc" => Ok(Algorithm::DaldDc),
            other => match other.strip_prefix("preset-") {
                Some(k) => Ok(Algorithm::Preset(k.parse()?)),
                None => Err(Error::param(format!("unknown algorithm {other:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub enum DatasetSource {
    Csv { path: PathBuf, task: Task, options: CsvOptions },
    Mnist { dir: PathBuf, scale: PixelScale },
    Table(DatasetTable),
}

impl DatasetSource {
    pub fn load(&self) -> Result<DatasetTable> {
        match self {
            DatasetSource::Csv { path, task, options } => load_csv(path, *task, *options),
            DatasetSource::Mnist { dir, scale } => load_mnist_3v7(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
                *scale,
            ),
            DatasetSource::Table(t) => Ok(t.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Preprocess {
    pub standardize: bool,
    pub intercept: bool,
    /// Keep a seeded random subset of this many samples (before partitioning).
    pub subsample: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionSpec {
    IidEven,
    /// Two-class stride split; class lists are shuffled by the run seed first.
    StratifiedStrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopologySpec {
    Chain,
    Matrix(HierarchicalMatrix),
}

/// Which models are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// The server block, or the client-block mean without a server.
    #[default]
    Model,
    /// Every client block separately, all on the full table.
    PerClient,
}

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub dataset: DatasetSource,
    pub preprocess: Preprocess,
    pub partition: PartitionSpec,
    pub n: usize,
    pub topology: TopologySpec,
    pub algorithm: Algorithm,
    pub engine: EngineConfig,
    pub solver: SolverSpec,
    pub l1_weight: f64,
    pub seeds: Vec<u64>,
    /// Cumulative sweep budget; replaces `engine.max_total_inner`.
    pub budget: usize,
    /// Clients per sweep in centralized runs; all when `None`.
    pub clients_per_sweep: Option<usize>,
    pub dropout: BTreeMap<usize, Vec<usize>>,
    pub eval: EvalMode,
    /// Score the model after every sweep in the last tenth of the budget.
    pub trailing_stability: bool,
}

impl RunSpec {
    pub fn new(dataset: DatasetSource, algorithm: Algorithm, n: usize) -> Self {
        RunSpec {
            dataset,
            preprocess: Preprocess::default(),
            partition: PartitionSpec::IidEven,
            n,
            topology: TopologySpec::Chain,
            algorithm,
            engine: EngineConfig::default(),
            solver: SolverSpec::default(),
            l1_weight: 0.0,
            seeds: vec![0],
            budget: 1000,
            clients_per_sweep: None,
            dropout: BTreeMap::new(),
            eval: EvalMode::Model,
            trailing_stability: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::param("budget must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::param("at least one seed required"));
        }
        if self.n == 0 {
            return Err(Error::param("at least one client required"));
        }
        self.engine.validate()?;
        self.solver.validate()
    }
}

/// Scores of one model (or one run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub mse: Option<f64>,
    /// `None` when the targets are constant.
    pub r2: Option<f64>,
    pub accuracy_percent: Option<f64>,
    /// Sample std of the per-sweep accuracy over the last tenth of the run, in 1e-4 units.
    pub accuracy_std_per_tenthousand: Option<f64>,
    pub primal_inf: f64,
    pub dual_inf: f64,
    pub sweeps: usize,
    pub outer_loops: usize,
    pub status: Option<StopStatus>,
    pub wall_time_s: f64,
    pub flags: Vec<String>,
}

impl MetricsRecord {
    fn scores(mse: Option<f64>, r2: Option<f64>, accuracy_percent: Option<f64>, flags: Vec<String>) -> Self {
        MetricsRecord {
            mse,
            r2,
            accuracy_percent,
            accuracy_std_per_tenthousand: None,
            primal_inf: f64::NAN,
            dual_inf: f64::NAN,
            sweeps: 0,
            outer_loops: 0,
            status: None,
            wall_time_s: 0.0,
            flags,
        }
    }

    fn with_summary(mut self, s: &RunSummary, wall: f64) -> Self {
        self.primal_inf = s.primal_inf;
        self.dual_inf = s.dual_inf;
        self.sweeps = s.total_inner;
        self.outer_loops = s.outer_loops;
        self.status = Some(s.status);
        self.wall_time_s = wall;
        self
    }
}

fn check_model(model: &[f64], test: &DatasetTable) -> Result<()> {
    if test.is_empty() {
        return Err(Error::param("empty test set"));
    }
    if model.len() != test.feature_count() {
        return Err(Error::dim(format!("model has {} entries, data has {} features", model.len(), test.feature_count())));
    }
    Ok(())
}

fn accuracy(model: &[f64], test: &DatasetTable) -> f64 {
    let hits = (0..test.len())
        .filter(|&i| {
            let p = dot(test.store.row(i), model);
            let label = if p > 0.0 { 1.0 } else { -1.0 };
            label == test.store.target(i)
        })
        .count();
    100.0 * hits as f64 / test.len() as f64
}

/// MSE and R² for regression tables, accuracy (sign of the linear score) for binary ones.
pub fn compute_metrics(model: &[f64], test: &DatasetTable) -> Result<MetricsRecord> {
    check_model(model, test)?;
    match test.task {
        Task::Binary => Ok(MetricsRecord::scores(None, None, Some(accuracy(model, test)), Vec::new())),
        Task::Regression => {
            let t = test.len() as f64;
            let targets = test.store.targets();
            let mean = targets.iter().sum::<f64>() / t;
            let ss_res: f64 = (0..test.len()).map(|i| (dot(test.store.row(i), model) - targets[i]).powi(2)).sum();
            let ss_tot: f64 = targets.iter().map(|b| (b - mean).powi(2)).sum();
            let mut flags = Vec::new();
            let r2 = if ss_tot > 0.0 {
                Some(1.0 - ss_res / ss_tot)
            } else {
                flags.push("r2 undefined: constant targets".to_string());
                None
            };
            Ok(MetricsRecord::scores(Some(ss_res / t), r2, None, flags))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyAggregate {
    pub mean_percent: f64,
    /// Sample std of the accuracy fractions, times 1e4; 0 for a single record.
    pub std_per_tenthousand: f64,
    pub count: usize,
    pub single_record: bool,
}

pub fn aggregate_runs(records: &[MetricsRecord]) -> Result<AccuracyAggregate> {
    let acc: Vec<f64> = records.iter().filter_map(|r| r.accuracy_percent).collect();
    if acc.is_empty() {
        return Err(Error::param("no accuracy records to aggregate"));
    }
    let k = acc.len() as f64;
    let mean = acc.iter().sum::<f64>() / k;
    let std = if acc.len() > 1 {
        let var = acc.iter().map(|a| (a / 100.0 - mean / 100.0).powi(2)).sum::<f64>() / (k - 1.0);
        var.sqrt() * 1e4
    } else {
        0.0
    };
    Ok(AccuracyAggregate { mean_percent: mean, std_per_tenthousand: std, count: acc.len(), single_record: acc.len() == 1 })
}

/// One seeded run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub metrics: MetricsRecord,
    /// Per-client scores in [`EvalMode::PerClient`].
    pub client_metrics: Vec<MetricsRecord>,
    pub summary: RunSummary,
    pub model: ParamBlock,
    pub trace: Vec<TraceRecord>,
    pub partition: Partition,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub runs: Vec<RunOutcome>,
    /// Over run models, or over every client model of every run in per-client mode.
    pub aggregate: Option<AccuracyAggregate>,
}

impl ExperimentResult {
    pub fn scored_records(&self) -> Vec<MetricsRecord> {
        self.runs
            .iter()
            .flat_map(|r| if r.client_metrics.is_empty() { vec![r.metrics.clone()] } else { r.client_metrics.clone() })
            .collect()
    }
}

fn subsample(table: &DatasetTable, k: usize, seed: u64) -> Result<DatasetTable> {
    if k >= table.len() {
        return Ok(table.clone());
    }
    let mut idx: Vec<usize> = (0..table.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut keep = idx[..k].to_vec();
    keep.sort_unstable();
    let m = table.feature_count();
    let features = keep.iter().flat_map(|&i| table.store.row(i).iter().copied()).collect();
    let targets = keep.iter().map(|&i| table.store.target(i)).collect();
    DatasetTable::new(table.name.clone(), table.task, SampleStore::new(m, features, targets)?)
}

fn prepare(spec: &RunSpec) -> Result<DatasetTable> {
    let mut table = spec.dataset.load()?;
    if let Some(k) = spec.preprocess.subsample {
        table = subsample(&table, k, 0)?;
    }
    if spec.preprocess.standardize {
        table = standardize(&table)?.0;
    }
    if spec.preprocess.intercept {
        table = add_intercept(&table)?;
    }
    Ok(table)
}

fn make_partition(spec: &RunSpec, table: &DatasetTable, seed: u64) -> Result<Partition> {
    match spec.partition {
        PartitionSpec::IidEven => partition_iid_even(table.len(), spec.n, seed),
        PartitionSpec::StratifiedStrides => {
            if table.task != Task::Binary {
                return Err(Error::Partition("stratified split needs a binary task".into()));
            }
            let (a, b) = class_indices(table, seed);
            partition_stratified_strides(&a, &b, spec.n, table.len())
        }
    }
}

/// Consensus graph and base sequence for decentralized runs.
pub fn decentralized_layout(topology: &TopologySpec, n: usize) -> Result<(ConsensusGraph, CoordinationSequence)> {
    match topology {
        TopologySpec::Chain => Ok((chain_graph(n)?, CoordinationSequence::in_order(n))),
        TopologySpec::Matrix(h) => {
            if h.size() != n {
                return Err(Error::Topology(format!("matrix of size {} for {n} clients", h.size())));
            }
            let seq = levels_from_matrix(h)?;
            let edges: Vec<(usize, usize)> = seq
                .parents()
                .unwrap_or(&[])
                .iter()
                .enumerate()
                .flat_map(|(i, ps)| ps.iter().map(move |&p| (i, p)))
                .collect();
            Ok((ConsensusGraph::decentralized(n, &edges)?, seq))
        }
    }
}

fn build_engine(spec: &RunSpec, table: &DatasetTable, partition: &Partition, seed: u64) -> Result<Engine> {
    let objectives = partition.objectives(table, spec.l1_weight)?;
    let m = table.feature_count();
    let cfg = EngineConfig { max_total_inner: spec.budget, ..spec.engine.clone() };
    let mut engine = match spec.algorithm {
        Algorithm::FedProx | Algorithm::DaldCc => {
            let mut e = Engine::centralized(cfg, spec.solver, objectives)?;
            if spec.algorithm == Algorithm::FedProx {
                e = e
                    .with_policy(MultiplierPolicy::Frozen)?
                    .with_consensus(ConsensusRule::Weighted(vec![1.0 / spec.n as f64; spec.n]))?;
            }
            e
        }
        Algorithm::DaldDc => {
            let (graph, seq) = decentralized_layout(&spec.topology, spec.n)?;
            Engine::new(cfg, spec.solver, objectives, graph, seq)?
        }
        Algorithm::Preset(kind) => {
            let mut preset = build_preset(kind, spec.n, spec.solver.step, spec.l1_weight)?;
            preset.config.max_total_inner = spec.budget;
            preset.config.trace_surrogate = spec.engine.trace_surrogate;
            return Ok(preset.engine(&objectives, &vec![0.0; m], seed)?.with_dropout(spec.dropout.clone()));
        }
    };
    if let Some(k) = spec.clients_per_sweep {
        engine = engine.with_partial_cycle(PartialCycleScheduler::new(k, seed)?);
    }
    Ok(engine.with_dropout(spec.dropout.clone()))
}

fn run_one(spec: &RunSpec, table: &DatasetTable, seed: u64) -> Result<RunOutcome> {
    let started = Instant::now();
    let partition = make_partition(spec, table, seed)?;
    let mut engine = build_engine(spec, table, &partition, seed)?;
    let window_start = spec.budget - spec.budget / 10;
    let mut trailing = Vec::new();
    let summary = engine.run_with(|e, phase| {
        if spec.trailing_stability && phase == Phase::Sweep && e.state().total_inner > window_start {
            trailing.push(accuracy(&e.model(), table));
        }
    })?;
    let wall = started.elapsed().as_secs_f64();
    let model = engine.model();
    let mut metrics = compute_metrics(&model, table)?.with_summary(&summary, wall);
    if spec.trailing_stability && table.task == Task::Binary && trailing.len() > 1 {
        let recs: Vec<MetricsRecord> =
            trailing.iter().map(|&a| MetricsRecord::scores(None, None, Some(a), Vec::new())).collect();
        metrics.accuracy_std_per_tenthousand = Some(aggregate_runs(&recs)?.std_per_tenthousand);
    }
    let client_metrics = match spec.eval {
        EvalMode::Model => Vec::new(),
        EvalMode::PerClient => engine
            .graph()
            .active()
            .iter()
            .map(|&i| Ok(compute_metrics(&engine.state().blocks[i], table)?.with_summary(&summary, wall)))
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(RunOutcome {
        seed,
        metrics,
        client_metrics,
        summary,
        model,
        trace: engine.trace().to_vec(),
        partition,
    })
}

/// Runs every seed (in parallel) and aggregates accuracy for binary tasks.
pub fn run_experiment(spec: &RunSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    let table = prepare(spec)?;
    let runs = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            run_one(spec, &table, seed).map_err(|e| e.context(format!("{} with {} clients, seed {seed}", spec.algorithm.name(), spec.n)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut result = ExperimentResult { runs, aggregate: None };
    if table.task == Task::Binary {
        result.aggregate = Some(aggregate_runs(&result.scored_records())?);
    }
    Ok(result)
}

/// Known regression datasets: file name, display name.
pub const TABLE1_DATASETS: [(&str, &str); 5] = [
    ("diabetes.csv", "Diabetes"),
    ("california_housing.csv", "California Housing"),
    ("winequality_white.csv", "Wine Quality"),
    ("abalone.csv", "Abalone"),
    ("ccpp.csv", "Combined Cycle Power Plant"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub dataset: String,
    pub samples: usize,
    pub features: usize,
    pub aio_mse: f64,
    pub aio_r2: Option<f64>,
    pub dald_mse: f64,
    pub dald_r2: Option<f64>,
    /// `|dald - aio| / aio` on MSE, with the denominator floored at `1e-12` times the target variance.
    pub relative_gap: f64,
}

/// Least squares on the whole table via the normal equations.
pub fn all_in_one_fit(table: &DatasetTable) -> Result<ParamBlock> {
    let m = table.feature_count();
    let mut ata = DMatrix::<f64>::zeros(m, m);
    let mut atb = DVector::<f64>::zeros(m);
    for i in 0..table.len() {
        let a = DVector::from_column_slice(table.store.row(i));
        ata.ger(1.0, &a, &a, 1.0);
        atb.axpy(table.store.target(i), &a, 1.0);
    }
    let x = match ata.clone().cholesky() {
        Some(c) => c.solve(&atb),
        None => ata.lu().solve(&atb).ok_or_else(|| Error::Capability("singular normal equations".into()))?,
    };
    Ok(ParamBlock::new(x.iter().copied().collect()))
}

/// Chain-of-three coordination used for the regression comparison: 0 under 1 under 2.
pub fn table1_matrix() -> HierarchicalMatrix {
    HierarchicalMatrix::new(vec![vec![1, 1, 0], vec![0, 1, 1], vec![0, 0, 0]])
}

/// Decentralized spec for one regression table: standardized features plus intercept, an even
/// split over three clients, exact local solves, one sweep per multiplier update.
pub fn table1_spec(path: &Path) -> RunSpec {
    let source = DatasetSource::Csv {
        path: path.to_path_buf(),
        task: Task::Regression,
        options: CsvOptions { has_header: true, ..CsvOptions::default() },
    };
    RunSpec {
        preprocess: Preprocess { standardize: true, intercept: true, subsample: None },
        topology: TopologySpec::Matrix(table1_matrix()),
        engine: EngineConfig { criterion: InnerCriterion::B4 { vmax: 1 }, ..EngineConfig::default() },
        solver: SolverSpec::exact(),
        budget: 1000,
        ..RunSpec::new(source, Algorithm::DaldDc, 3)
    }
}

fn target_variance(table: &DatasetTable) -> f64 {
    let t = table.store.targets();
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    t.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / t.len() as f64
}

pub fn table1_row(name: &str, path: &Path) -> Result<Table1Row> {
    let spec = table1_spec(path);
    let table = prepare(&spec)?;
    let aio = compute_metrics(&all_in_one_fit(&table)?, &table)?;
    let run = run_experiment(&spec)?.runs.remove(0);
    let (aio_mse, dald_mse) = (aio.mse.unwrap_or(f64::NAN), run.metrics.mse.unwrap_or(f64::NAN));
    Ok(Table1Row {
        dataset: name.to_string(),
        samples: table.len(),
        features: table.feature_count() - 1,
        aio_mse,
        aio_r2: aio.r2,
        dald_mse,
        dald_r2: run.metrics.r2,
        relative_gap: (dald_mse - aio_mse).abs() / aio_mse.max(1e-12 * target_variance(&table)),
    })
}

/// Rows for every known regression CSV present in `data_dir`, plus the names of missing ones.
pub fn reproduce_table1(data_dir: &Path) -> Result<(Vec<Table1Row>, Vec<String>)> {
    if !data_dir.is_dir() {
        return Err(Error::Data { path: data_dir.to_path_buf(), message: "data directory not found".into() });
    }
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for (file, name) in TABLE1_DATASETS {
        let path = data_dir.join(file);
        if path.is_file() {
            rows.push(table1_row(name, &path)?);
        } else {
            missing.push(format!("{name} ({file})"));
        }
    }
    Ok((rows, missing))
}

/// Classification settings: raw pixels, stratified split, step 1e-4, one proximal gradient pass
/// per sweep, one sweep per multiplier update, every client model scored on the full set.
pub fn table2_spec(data_dir: &Path, algorithm: Algorithm, n: usize, lambda: f64, budget: usize, seeds: Vec<u64>) -> RunSpec {
    let source = DatasetSource::Mnist { dir: data_dir.join("mnist"), scale: PixelScale::Raw };
    RunSpec {
        partition: PartitionSpec::StratifiedStrides,
        engine: EngineConfig {
            criterion: InnerCriterion::B4 { vmax: 1 },
            trace_surrogate: false,
            max_outer: budget.max(1) + 1,
            ..EngineConfig::default()
        },
        solver: SolverSpec::bcpg(1e-4, 1),
        l1_weight: lambda,
        seeds,
        budget,
        eval: EvalMode::PerClient,
        ..RunSpec::new(source, algorithm, n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub algorithm: String,
    pub n: usize,
    pub lambda: f64,
    pub iters: usize,
    pub mean_acc: f64,
    pub std_acc_permyriad: f64,
}

pub const TABLE2_HEADER: &str = "algorithm,n,lambda,iters,mean_acc,std_acc_permyriad";

impl Table2Row {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.4},{:.4}",
            self.algorithm, self.n, self.lambda, self.iters, self.mean_acc, self.std_acc_permyriad
        )
    }
}

#[derive(Debug, Clone)]
pub struct Table2Grid {
    pub data_dir: PathBuf,
    pub algorithms: Vec<Algorithm>,
    pub n_list: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
    pub subsample: Option<usize>,
}

impl Table2Grid {
    pub fn new(data_dir: PathBuf) -> Self {
        Table2Grid {
            data_dir,
            algorithms: vec![Algorithm::FedProx, Algorithm::DaldCc, Algorithm::DaldDc],
            n_list: vec![10, 50],
            lambdas: vec![1e-3],
            budgets: vec![1000],
            seeds: (0..5).collect(),
            subsample: None,
        }
    }
}

pub fn table2_cell(grid: &Table2Grid, algorithm: Algorithm, n: usize, lambda: f64, budget: usize) -> Result<Table2Row> {
    let mut spec = table2_spec(&grid.data_dir, algorithm, n, lambda, budget, grid.seeds.clone());
    spec.preprocess.subsample = grid.subsample;
    let agg = run_experiment(&spec)?.aggregate.expect("binary task aggregates accuracy");
    Ok(Table2Row {
        algorithm: algorithm.name(),
        n,
        lambda,
        iters: budget,
        mean_acc: agg.mean_percent,
        std_acc_permyriad: agg.std_per_tenthousand,
    })
}

/// Every (algorithm, n, lambda, budget) cell of the grid; `on_row` sees rows as they finish.
pub fn reproduce_table2(grid: &Table2Grid, mut on_row: impl FnMut(&Table2Row)) -> Result<Vec<Table2Row>> {
    let mnist = grid.data_dir.join("mnist");
    for f in ["train-images-idx3-ubyte", "train-labels-idx1-ubyte"] {
        if !mnist.join(f).is_file() {
            return Err(Error::Data { path: mnist.join(f), message: "MNIST file missing".into() });
        }
    }
    let mut rows = Vec::new();
    for &n in &grid.n_list {
        for &lambda in &grid.lambdas {
            for &budget in &grid.budgets {
                for &alg in &grid.algorithms {
                    let row = table2_cell(grid, alg, n, lambda, budget)?;
                    on_row(&row);
                    rows.push(row);
                }
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::Sample;
    use std::io::Write;

    fn regression(rows: &[(&[f64], f64)]) -> DatasetTable {
        let samples: Vec<Sample> = rows.iter().map(|(a, b)| Sample { features: a.to_vec(), target: *b }).collect();
        DatasetTable::new("t", Task::Regression, SampleStore::from_samples(&samples).unwrap()).unwrap()
    }

    #[test]
    fn metrics_examples() {
        let t = regression(&[(&[1.0], 2.0), (&[2.0], 4.0), (&[3.0], 6.0)]);
        let perfect = compute_metrics(&[2.0], &t).unwrap();
        assert_eq!((perfect.mse, perfect.r2), (Some(0.0), Some(1.0)));

        // A model that predicts the target mean on every row.
        let t = regression(&[(&[1.0], 1.0), (&[1.0], 3.0)]);
        assert_eq!(compute_metrics(&[2.0], &t).unwrap().r2, Some(0.0));

        let constant = regression(&[(&[1.0], 3.0), (&[2.0], 3.0)]);
        let m = compute_metrics(&[1.0], &constant).unwrap();
        assert_eq!(m.r2, None);
        assert!(!m.flags.is_empty());

        let b = DatasetTable::new("b", Task::Binary, SampleStore::new(1, vec![1.0], vec![1.0]).unwrap()).unwrap();
        assert_eq!(compute_metrics(&[2.0], &b).unwrap().accuracy_percent, Some(100.0));
        assert!(compute_metrics(&[2.0, 1.0], &b).is_err());
    }

    fn acc(a: f64) -> MetricsRecord {
        MetricsRecord::scores(None, None, Some(a), Vec::new())
    }

    #[test]
    fn aggregate_examples() {
        let same = aggregate_runs(&[acc(97.0), acc(97.0)]).unwrap();
        assert_eq!(same.std_per_tenthousand, 0.0);
        let two = aggregate_runs(&[acc(97.0), acc(98.0)]).unwrap();
        assert!((two.mean_percent - 97.5).abs() < 1e-12);
        // Sample std of {0.97, 0.98} is 0.01 / sqrt(2).
        assert!((two.std_per_tenthousand - 1e4 * 0.01 / 2f64.sqrt()).abs() < 1e-9);
        let one = aggregate_runs(&[acc(90.0)]).unwrap();
        assert!(one.single_record && one.std_per_tenthousand == 0.0);
        assert!(aggregate_runs(&[]).is_err());
    }

    #[test]
    fn single_client_quadratic_recovers_minimizer() {
        // min (x1 - 3)^2 + (x2 + 1)^2 as least squares on unit rows.
        let t = regression(&[(&[1.0, 0.0], 3.0), (&[0.0, 1.0], -1.0)]);
        let mut spec = RunSpec::new(DatasetSource::Table(t), Algorithm::DaldCc, 1);
        spec.solver = SolverSpec::exact();
        spec.engine.eps_pri = 1e-9;
        spec.engine.eps_dual = 1e-9;
        spec.budget = 10_000;
        let run = run_experiment(&spec).unwrap().runs.remove(0);
        assert_eq!(run.summary.status, StopStatus::Optimal);
        assert!(run.summary.primal_inf <= spec.engine.eps_pri);
        assert!((run.model[0] - 3.0).abs() < 1e-6 && (run.model[1] + 1.0).abs() < 1e-6, "{:?} {:?}", run.model, run.summary);
    }

    #[test]
    fn fedprox_on_identical_clients_reaches_consensus() {
        let rows: Vec<(&[f64], f64)> = vec![(&[1.0, 2.0], 1.0); 6];
        let t = regression(&rows);
        let mut spec = RunSpec::new(DatasetSource::Table(t), Algorithm::FedProx, 3);
        spec.solver = SolverSpec::exact();
        spec.budget = 5000;
        let run = run_experiment(&spec).unwrap().runs.remove(0);
        assert!(run.summary.primal_inf <= spec.engine.eps_pri, "{:?}", run.summary);
    }

    fn random_regression(rows: usize, m: usize, seed: u64) -> DatasetTable {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<Sample> = (0..rows)
            .map(|_| {
                let a: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
                let b = a.iter().sum::<f64>() + rng.random_range(-0.1..0.1);
                Sample { features: a, target: b }
            })
            .collect();
        DatasetTable::new("r", Task::Regression, SampleStore::from_samples(&samples).unwrap()).unwrap()
    }

    #[test]
    fn dropout_mid_chain_completes() {
        let mut spec = RunSpec::new(DatasetSource::Table(random_regression(50, 3, 1)), Algorithm::DaldDc, 5);
        spec.solver = SolverSpec::exact();
        spec.engine.criterion = InnerCriterion::B4 { vmax: 1 };
        spec.budget = 20_000;
        spec.dropout = BTreeMap::from([(5, vec![2])]);
        let run = run_experiment(&spec).unwrap().runs.remove(0);
        assert_eq!(run.summary.status, StopStatus::Optimal);
    }

    #[test]
    fn runs_are_deterministic() {
        let mut spec = RunSpec::new(DatasetSource::Table(random_regression(40, 2, 2)), Algorithm::DaldCc, 4);
        spec.solver = SolverSpec::bcpg(0.01, 2);
        spec.budget = 50;
        spec.seeds = vec![3, 4];
        let a = run_experiment(&spec).unwrap();
        let b = run_experiment(&spec).unwrap();
        for (x, y) in a.runs.iter().zip(&b.runs) {
            let strip = |m: &MetricsRecord| MetricsRecord { wall_time_s: 0.0, ..m.clone() };
            assert_eq!(strip(&x.metrics), strip(&y.metrics));
            assert_eq!(x.model, y.model);
        }
    }

    #[test]
    fn all_in_one_matches_exact_fit() {
        let t = regression(&[(&[1.0, 1.0], 2.0), (&[1.0, 2.0], 3.0), (&[1.0, 3.0], 4.0)]);
        let x = all_in_one_fit(&t).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in [Algorithm::FedProx, Algorithm::DaldCc, Algorithm::DaldDc, Algorithm::Preset(PresetKind::FedAvg)] {
            assert_eq!(Algorithm::parse(&a.name()).unwrap(), a);
        }
        assert!(Algorithm::parse("sgd").is_err());
    }

    #[test]
    fn exactly_linear_table_has_zero_error() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a,b,y").unwrap();
        for i in 0..30 {
            let (a, b) = (i as f64 * 0.5 - 3.0, ((i * 7) % 11) as f64);
            writeln!(f, "{a},{b},{}", 2.0 - a + 0.25 * b).unwrap();
        }
        f.flush().unwrap();
        let row = table1_row("linear", f.path()).unwrap();
        assert!(row.aio_mse < 1e-20 && row.dald_mse < 1e-9, "{row:?}");
        assert!(row.aio_r2.unwrap() > 1.0 - 1e-12 && row.dald_r2.unwrap() > 1.0 - 1e-9);
        assert!(row.relative_gap < 1.0);
    }
}
