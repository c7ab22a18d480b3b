//! Run configuration: a TOML document of flat `[section]` tables plus `section.key=value`
//! overrides. Every key is listed in [`KEYS`]; anything else is rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use dald::data::{CsvOptions, PixelScale, TargetColumn, Task};
use dald::engine::{EngineConfig, InnerCriterion, RhoSchedule};
use dald::harness::{Algorithm, DatasetSource, EvalMode, PartitionSpec, Preprocess, RunSpec, TopologySpec};
use dald::solvers::{SolverKind, SolverSpec, WarmStart};
use dald::topology::{validate_matrix, HierarchicalMatrix};
use toml::{Table, Value};

pub struct KeyDoc {
    pub key: &'static str,
    /// A valid TOML value for the key.
    pub example: &'static str,
    pub doc: &'static str,
}

const fn key(key: &'static str, example: &'static str, doc: &'static str) -> KeyDoc {
    KeyDoc { key, example, doc }
}

pub const KEYS: &[KeyDoc] = &[
    key("data.source", "\"csv\"", "csv | mnist (default csv)"),
    key("data.path", "\"diabetes.csv\"", "CSV file, relative to the data directory; required for csv"),
    key("data.task", "\"regression\"", "regression | binary (default regression)"),
    key("data.has_header", "true", "first CSV row is a header (default true)"),
    key("data.target", "\"last\"", "\"last\" or a zero-based column index (default last)"),
    key("data.remap_zero_one", "false", "binary CSV targets: map 0 to -1 (default false)"),
    key("data.mnist_dir", "\"mnist\"", "directory with the IDX training files, relative to the data directory"),
    key("data.pixel_scale", "\"raw\"", "raw (0..255) | unit (divided by 255); default raw"),
    key("data.standardize", "false", "z-score every feature column (default false)"),
    key("data.intercept", "false", "append a constant 1 feature (default false)"),
    key("data.subsample", "200", "keep a random subset of this many samples"),
    key("partition.kind", "\"iid-even\"", "iid-even | stratified-strides (default iid-even)"),
    key("partition.clients", "3", "number of clients (default 1)"),
    key("topology.kind", "\"chain\"", "chain | matrix; decentralized runs only (default chain)"),
    key("topology.matrix", "[[1, 1, 0], [0, 1, 1], [0, 0, 0]]", "hierarchical matrix rows"),
    key("topology.matrix_file", "\"h.txt\"", "hierarchical matrix file, one whitespace-separated row per line"),
    key("algorithm.name", "\"dald-cc\"", "fedprox | dald-cc | dald-dc | preset-<kind> (default dald-cc)"),
    key("algorithm.l1_weight", "0.0", "per-client l1 weight; needs a binary task (default 0)"),
    key("algorithm.clients_per_sweep", "2", "centralized partial cycle: clients solved per sweep"),
    key("algorithm.eval", "\"model\"", "model | per-client (default model)"),
    key("engine.eps_pri", "1e-5", "primal tolerance (default 1e-5)"),
    key("engine.eps_dual", "1e-5", "dual tolerance (default 1e-5)"),
    key("engine.criterion", "\"b4\"", "b1 | b2 | b3 | b4 inner stopping rule (default b1)"),
    key("engine.vmax", "1", "b4: sweeps per outer loop (default 1)"),
    key("engine.initial_excess", "1e-2", "b2: initial dual tolerance excess (default 1e-2)"),
    key("engine.decay", "0.5", "b2: excess decay per outer loop, in (0, 1) (default 0.5)"),
    key("engine.initial_sweeps", "1", "b3: initial sweep cap (default 1)"),
    key("engine.sweep_growth", "1.5", "b3: sweep cap growth per outer loop (default 1.5)"),
    key("engine.sweep_cap", "100", "b3: largest sweep cap (default 100)"),
    key("engine.rho_init", "1.0", "initial penalty on every edge (default 1)"),
    key("engine.rho_schedule", "\"constant\"", "constant | geometric (default constant)"),
    key("engine.rho_factor", "2.0", "geometric: penalty factor per outer loop (default 2)"),
    key("engine.rho_cap", "1e6", "geometric: penalty ceiling (default 1e6)"),
    key("engine.max_outer", "10000", "outer loop limit (default 10000)"),
    key("engine.final_sweep_full_cycle", "true", "full sweep before each multiplier update after partial ones (default true)"),
    key("engine.trace_surrogate", "true", "record the augmented Lagrangian per sweep (default true)"),
    key("solver.kind", "\"exact\"", "exact | bcpg | anchor (default exact)"),
    key("solver.step", "1e-4", "step size (default 1e-4)"),
    key("solver.local_passes", "1", "bcpg passes per sweep (default 1)"),
    key("solver.grad_tol", "1e-8", "exact: gradient tolerance (default 1e-8)"),
    key("solver.max_local_iters", "100000", "exact: iteration cap per solve (default 100000)"),
    key("solver.warm_start", "\"previous-block\"", "previous-block | consensus (default previous-block)"),
    key("run.seeds", "[0, 1, 2]", "seeds, one run each (default [0])"),
    key("run.budget", "1000", "cumulative sweep budget (default 1000)"),
    key("run.dropout", "[[5, 1]]", "[sweep, client] pairs: drop the client before that sweep"),
    key("run.trailing_stability", "false", "score every sweep in the last tenth of the budget (default false)"),
];

const SECTIONS: [&str; 7] = ["data", "partition", "topology", "algorithm", "engine", "solver", "run"];

/// Every problem found in a configuration, one `key: reason` line each.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration ({} problem{})", self.0.len(), if self.0.len() == 1 { "" } else { "s" })?;
        for e in &self.0 {
            write!(f, "\n  {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

pub fn parse_document(text: &str) -> Result<Table, ConfigErrors> {
    text.parse::<Table>().map_err(|e| ConfigErrors(vec![e.to_string().trim_end().to_string()]))
}

pub fn load_document(path: &Path) -> Result<Table, ConfigErrors> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigErrors(vec![format!("{}: {e}", path.display())]))?;
    parse_document(&text)
        .map_err(|ConfigErrors(v)| ConfigErrors(v.into_iter().map(|e| format!("{}: {e}", path.display())).collect()))
}

/// Applies `section.key=value`. The value is read as TOML, falling back to a bare string.
pub fn apply_override(doc: &mut Table, assignment: &str) -> Result<(), String> {
    let (name, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("override {assignment:?}: expected section.key=value"))?;
    let (section, field) = name
        .trim()
        .split_once('.')
        .ok_or_else(|| format!("override {assignment:?}: key must look like section.key"))?;
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed a single key"),
        Err(_) => Value::String(raw.to_string()),
    };
    let table = doc
        .entry(section.to_string())
        .or_insert_with(|| Value::Table(Table::new()))
        .as_table_mut()
        .ok_or_else(|| format!("override {assignment:?}: {section} is not a section"))?;
    table.insert(field.to_string(), value);
    Ok(())
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "a string",
        Value::Integer(_) => "an integer",
        Value::Float(_) => "a float",
        Value::Boolean(_) => "a boolean",
        Value::Datetime(_) => "a datetime",
        Value::Array(_) => "an array",
        Value::Table(_) => "a table",
    }
}

struct Fields {
    values: BTreeMap<String, Value>,
    errors: Vec<String>,
}

impl Fields {
    fn flatten(doc: &Table) -> Self {
        let mut f = Fields { values: BTreeMap::new(), errors: Vec::new() };
        for (section, v) in doc {
            let Some(table) = v.as_table() else {
                f.errors.push(format!("{section}: unknown top-level key (settings live in [section] tables)"));
                continue;
            };
            if !SECTIONS.contains(&section.as_str()) {
                f.errors.push(format!("[{section}]: unknown section (expected one of {})", SECTIONS.join(", ")));
                continue;
            }
            for (k, val) in table {
                let full = format!("{section}.{k}");
                if KEYS.iter().any(|d| d.key == full) {
                    f.values.insert(full, val.clone());
                } else {
                    f.errors.push(format!("{full}: unknown key"));
                }
            }
        }
        f
    }

    fn take(&mut self, key: &str) -> Option<Value> {
        debug_assert!(KEYS.iter().any(|d| d.key == key), "undocumented key {key}");
        self.values.remove(key)
    }

    fn expected(&mut self, key: &str, what: &str, got: &Value) {
        self.errors.push(format!("{key}: expected {what}, got {}", type_name(got)));
    }

    fn float(&mut self, key: &str, default: f64) -> f64 {
        match self.take(key) {
            None => default,
            Some(Value::Float(x)) => x,
            Some(Value::Integer(i)) => i as f64,
            Some(other) => {
                self.expected(key, "a number", &other);
                default
            }
        }
    }

    fn opt_uint(&mut self, key: &str) -> Option<usize> {
        match self.take(key)? {
            Value::Integer(i) if i >= 0 => Some(i as usize),
            Value::Integer(i) => {
                self.errors.push(format!("{key}: must be non-negative, got {i}"));
                None
            }
            other => {
                self.expected(key, "a non-negative integer", &other);
                None
            }
        }
    }

    fn uint(&mut self, key: &str, default: usize) -> usize {
        self.opt_uint(key).unwrap_or(default)
    }

    fn boolean(&mut self, key: &str, default: bool) -> bool {
        match self.take(key) {
            None => default,
            Some(Value::Boolean(b)) => b,
            Some(other) => {
                self.expected(key, "true or false", &other);
                default
            }
        }
    }

    fn opt_string(&mut self, key: &str) -> Option<String> {
        match self.take(key)? {
            Value::String(s) => Some(s),
            other => {
                self.expected(key, "a string", &other);
                None
            }
        }
    }

    fn choice<T: Copy>(&mut self, key: &str, default: T, options: &[(&str, T)]) -> T {
        let Some(s) = self.opt_string(key) else { return default };
        match options.iter().find(|(name, _)| *name == s) {
            Some(&(_, t)) => t,
            None => {
                let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                self.errors.push(format!("{key}: {s:?} is not one of {}", names.join(", ")));
                default
            }
        }
    }

    fn uint_rows(&mut self, key: &str) -> Option<Vec<Vec<i64>>> {
        let v = self.take(key)?;
        let rows = v.as_array().and_then(|rows| {
            rows.iter()
                .map(|r| r.as_array()?.iter().map(Value::as_integer).collect::<Option<Vec<i64>>>())
                .collect::<Option<Vec<_>>>()
        });
        if rows.is_none() {
            self.expected(key, "an array of integer arrays", &v);
        }
        rows
    }

    fn require(&mut self, ok: bool, message: impl FnOnce() -> String) {
        if !ok {
            self.errors.push(message());
        }
    }
}

/// Prefixes engine field names reported by [`EngineConfig::violations`] with their config keys.
fn engine_key(field: &str) -> String {
    let name = match field {
        "criterion.vmax" => "vmax",
        "criterion.initial_excess" => "initial_excess",
        "criterion.decay" => "decay",
        "criterion.initial" => "initial_sweeps",
        "criterion.growth" => "sweep_growth",
        "criterion.cap" => "sweep_cap",
        "rho_schedule.factor" => "rho_factor",
        "rho_schedule.cap" => "rho_cap",
        other => other,
    };
    format!("engine.{name}")
}

#[derive(Clone, Copy)]
enum Source {
    Csv,
    Mnist,
}

#[derive(Clone, Copy, PartialEq)]
enum TopologyKind {
    Chain,
    Matrix,
}

#[derive(Clone, Copy)]
enum CriterionKind {
    B1,
    B2,
    B3,
    B4,
}

/// Resolves a document into a run description. Relative data paths are joined to `data_dir`;
/// `topology.matrix_file` is relative to the working directory.
pub fn resolve(doc: &Table, data_dir: &Path) -> Result<RunSpec, ConfigErrors> {
    let mut f = Fields::flatten(doc);

    let source = f.choice("data.source", Source::Csv, &[("csv", Source::Csv), ("mnist", Source::Mnist)]);
    let task = f.choice("data.task", Task::Regression, &[("regression", Task::Regression), ("binary", Task::Binary)]);
    let has_header = f.boolean("data.has_header", true);
    let target = match f.take("data.target") {
        None => TargetColumn::Last,
        Some(Value::String(s)) if s == "last" => TargetColumn::Last,
        Some(Value::Integer(i)) if i >= 0 => TargetColumn::Index(i as usize),
        Some(other) => {
            f.errors.push(format!("data.target: expected \"last\" or a column index, got {other}"));
            TargetColumn::Last
        }
    };
    let remap_zero_one = f.boolean("data.remap_zero_one", false);
    let path = f.opt_string("data.path");
    let mnist_dir = f.opt_string("data.mnist_dir").unwrap_or_else(|| "mnist".into());
    let scale = f.choice("data.pixel_scale", PixelScale::Raw, &[("raw", PixelScale::Raw), ("unit", PixelScale::Unit)]);
    let dataset = match source {
        Source::Csv => match path {
            Some(p) => Some(DatasetSource::Csv {
                path: data_dir.join(p),
                task,
                options: CsvOptions { has_header, target, remap_zero_one },
            }),
            None => {
                f.errors.push("data.path: required when data.source is \"csv\"".into());
                None
            }
        },
        Source::Mnist => Some(DatasetSource::Mnist { dir: data_dir.join(mnist_dir), scale }),
    };
    let preprocess = Preprocess {
        standardize: f.boolean("data.standardize", false),
        intercept: f.boolean("data.intercept", false),
        subsample: f.opt_uint("data.subsample"),
    };
    f.require(preprocess.subsample != Some(0), || "data.subsample: must be at least 1".into());

    let partition = f.choice(
        "partition.kind",
        PartitionSpec::IidEven,
        &[("iid-even", PartitionSpec::IidEven), ("stratified-strides", PartitionSpec::StratifiedStrides)],
    );
    let n = f.uint("partition.clients", 1);
    f.require(n >= 1, || "partition.clients: must be at least 1".into());

    let algorithm = match f.opt_string("algorithm.name") {
        None => Algorithm::DaldCc,
        Some(s) => Algorithm::parse(&s).unwrap_or_else(|e| {
            f.errors.push(format!("algorithm.name: {e}"));
            Algorithm::DaldCc
        }),
    };
    let l1_weight = f.float("algorithm.l1_weight", 0.0);
    f.require(l1_weight >= 0.0 && l1_weight.is_finite(), || {
        format!("algorithm.l1_weight: must be a non-negative finite number, got {l1_weight}")
    });
    let clients_per_sweep = f.opt_uint("algorithm.clients_per_sweep");
    if let Some(c) = clients_per_sweep {
        f.require((1..=n).contains(&c), || format!("algorithm.clients_per_sweep: must lie in 1..={n}, got {c}"));
        f.require(matches!(algorithm, Algorithm::DaldCc | Algorithm::FedProx), || {
            "algorithm.clients_per_sweep: applies to centralized algorithms only".into()
        });
    }
    let eval = f.choice("algorithm.eval", EvalMode::Model, &[("model", EvalMode::Model), ("per-client", EvalMode::PerClient)]);

    let topology_kind =
        f.choice("topology.kind", TopologyKind::Chain, &[("chain", TopologyKind::Chain), ("matrix", TopologyKind::Matrix)]);
    let inline = f.uint_rows("topology.matrix").map(HierarchicalMatrix::new);
    let from_file = f.opt_string("topology.matrix_file").and_then(|p| {
        HierarchicalMatrix::load(Path::new(&p))
            .map_err(|e| f.errors.push(format!("topology.matrix_file: {e}")))
            .ok()
    });
    let topology = match (topology_kind, inline, from_file) {
        (TopologyKind::Chain, None, None) => TopologySpec::Chain,
        (TopologyKind::Chain, ..) => {
            f.errors.push("topology.matrix: set topology.kind = \"matrix\" to use a matrix".into());
            TopologySpec::Chain
        }
        (TopologyKind::Matrix, Some(_), Some(_)) => {
            f.errors.push("topology.matrix_file: give either topology.matrix or topology.matrix_file".into());
            TopologySpec::Chain
        }
        (TopologyKind::Matrix, Some(h), None) | (TopologyKind::Matrix, None, Some(h)) => {
            for v in validate_matrix(&h) {
                f.errors.push(format!("topology.matrix: {v}"));
            }
            f.require(h.size() == n, || format!("topology.matrix: size {} does not match partition.clients = {n}", h.size()));
            TopologySpec::Matrix(h)
        }
        (TopologyKind::Matrix, None, None) => {
            f.errors.push("topology.matrix: required when topology.kind is \"matrix\"".into());
            TopologySpec::Chain
        }
    };
    if topology_kind == TopologyKind::Matrix {
        f.require(algorithm == Algorithm::DaldDc, || "topology.kind: a matrix applies to dald-dc only".into());
    }

    let criterion_kind = f.choice(
        "engine.criterion",
        CriterionKind::B1,
        &[("b1", CriterionKind::B1), ("b2", CriterionKind::B2), ("b3", CriterionKind::B3), ("b4", CriterionKind::B4)],
    );
    let vmax = f.uint("engine.vmax", 1);
    let initial_excess = f.float("engine.initial_excess", 1e-2);
    let decay = f.float("engine.decay", 0.5);
    let initial = f.uint("engine.initial_sweeps", 1);
    let growth = f.float("engine.sweep_growth", 1.5);
    let cap = f.uint("engine.sweep_cap", 100);
    let criterion = match criterion_kind {
        CriterionKind::B1 => InnerCriterion::B1,
        CriterionKind::B2 => InnerCriterion::B2 { initial_excess, decay },
        CriterionKind::B3 => InnerCriterion::B3 { initial, growth, cap },
        CriterionKind::B4 => InnerCriterion::B4 { vmax },
    };
    let geometric = f.choice("engine.rho_schedule", false, &[("constant", false), ("geometric", true)]);
    let factor = f.float("engine.rho_factor", 2.0);
    let rho_cap = f.float("engine.rho_cap", RhoSchedule::DEFAULT_CAP);
    let engine = EngineConfig {
        eps_pri: f.float("engine.eps_pri", 1e-5),
        eps_dual: f.float("engine.eps_dual", 1e-5),
        criterion,
        rho_schedule: if geometric { RhoSchedule::Geometric { factor, cap: rho_cap } } else { RhoSchedule::Constant },
        rho_init: f.float("engine.rho_init", 1.0),
        max_outer: f.uint("engine.max_outer", 10_000),
        max_total_inner: 1,
        final_sweep_full_cycle: f.boolean("engine.final_sweep_full_cycle", true),
        trace_surrogate: f.boolean("engine.trace_surrogate", true),
    };
    for v in engine.violations() {
        let (field, reason) = v.split_once(": ").unwrap_or((&v, ""));
        // The budget key owns the sweep limit.
        if field != "max_total_inner" {
            f.errors.push(format!("{}: {reason}", engine_key(field)));
        }
    }

    let solver = SolverSpec {
        kind: f.choice(
            "solver.kind",
            SolverKind::Exact,
            &[("exact", SolverKind::Exact), ("bcpg", SolverKind::Bcpg), ("anchor", SolverKind::Anchor)],
        ),
        step: f.float("solver.step", 1e-4),
        local_passes: f.uint("solver.local_passes", 1),
        grad_tol: f.float("solver.grad_tol", 1e-8),
        max_local_iters: f.uint("solver.max_local_iters", 100_000),
        warm_start: f.choice(
            "solver.warm_start",
            WarmStart::PreviousBlock,
            &[("previous-block", WarmStart::PreviousBlock), ("consensus", WarmStart::Consensus)],
        ),
    };
    f.require(solver.step > 0.0 && solver.step.is_finite(), || {
        format!("solver.step: must be a positive finite number, got {}", solver.step)
    });
    f.require(solver.local_passes >= 1, || "solver.local_passes: must be at least 1".into());
    f.require(solver.grad_tol > 0.0, || format!("solver.grad_tol: must be positive, got {}", solver.grad_tol));
    f.require(solver.max_local_iters >= 1, || "solver.max_local_iters: must be at least 1".into());

    let seeds = match f.take("run.seeds") {
        None => vec![0],
        Some(v) => match v.as_array().map(|a| a.iter().map(|s| s.as_integer().and_then(|i| u64::try_from(i).ok())).collect::<Option<Vec<u64>>>()) {
            Some(Some(s)) => s,
            _ => {
                f.errors.push(format!("run.seeds: expected an array of non-negative integers, got {v}"));
                vec![0]
            }
        },
    };
    f.require(!seeds.is_empty(), || "run.seeds: at least one seed required".into());
    let budget = f.uint("run.budget", 1000);
    f.require(budget >= 1, || "run.budget: must be at least 1".into());
    let mut dropout: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for row in f.uint_rows("run.dropout").unwrap_or_default() {
        match row[..] {
            [sweep, client] if sweep >= 1 && client >= 0 && (client as usize) < n => {
                dropout.entry(sweep as usize).or_default().push(client as usize)
            }
            _ => f.errors.push(format!("run.dropout: entry {row:?} must be [sweep >= 1, client < {n}]")),
        }
    }
    let trailing_stability = f.boolean("run.trailing_stability", false);

    for k in std::mem::take(&mut f.values).into_keys() {
        f.errors.push(format!("{k}: documented but not mapped"));
    }
    if !f.errors.is_empty() {
        return Err(ConfigErrors(f.errors));
    }
    Ok(RunSpec {
        preprocess,
        partition,
        topology,
        engine,
        solver,
        l1_weight,
        seeds,
        budget,
        clients_per_sweep,
        dropout,
        eval,
        trailing_stability,
        ..RunSpec::new(dataset.expect("checked above"), algorithm, n)
    })
}

/// Loads `path` (or an empty document), applies overrides in order, then resolves.
pub fn load_spec(path: Option<&Path>, overrides: &[String], data_dir: &Path) -> Result<RunSpec, ConfigErrors> {
    let mut doc = match path {
        Some(p) => load_document(p)?,
        None => Table::new(),
    };
    let errors: Vec<String> = overrides.iter().filter_map(|o| apply_override(&mut doc, o).err()).collect();
    if !errors.is_empty() {
        return Err(ConfigErrors(errors));
    }
    resolve(&doc, data_dir)
}
