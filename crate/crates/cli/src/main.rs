mod artifacts;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dald::engine::StopStatus;
use dald::harness::{self, Algorithm, Table2Grid};
use log::{info, warn};

use crate::artifacts::TableWriter;

/// Exit code for runs that stop on the sweep budget or the outer loop limit.
const EXIT_NONCONVERGED: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "dald", version, about = "Augmented Lagrangian decomposition for federated learning")]
struct CliConfig {
    #[command(subcommand)]
    command: Command,

    /// Configuration file (TOML sections, see docs/config.md).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one configuration key; applied after the file, in order.
    #[arg(long = "set", global = true, value_name = "K=V")]
    overrides: Vec<String>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Replace the configured seeds with this one.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Base directory for datasets.
    #[arg(long, global = true, value_name = "PATH")]
    data_dir: Option<PathBuf>,

    /// Only report errors.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one configured experiment and write its artifacts.
    Run,
    /// Regression parity: closed-form least squares against a three-client chain.
    ReproduceTable1 {
        /// Extra CSV files to use instead of the known datasets in the data directory.
        #[arg(long = "csv", value_name = "PATH")]
        csv: Vec<PathBuf>,
    },
    /// Classification grid on MNIST digits 3 and 7.
    ReproduceTable2 {
        #[arg(long, value_delimiter = ',', default_value = "fedprox,dald-cc,dald-dc")]
        algorithms: Vec<String>,
        #[arg(long = "n-list", value_delimiter = ',', default_value = "10,50")]
        n_list: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0.001")]
        lambdas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1000")]
        budgets: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Use a random subset of this many samples.
        #[arg(long)]
        subsample: Option<usize>,
    },
    /// Re-read artifacts in a directory (default: the output directory) and check a config if given.
    Validate { dir: Option<PathBuf> },
    /// List every configuration key with an example value.
    Keys,
}

fn data_dir(cli: &CliConfig) -> PathBuf {
    cli.data_dir.clone().unwrap_or_else(harness::default_data_dir)
}

fn overrides(cli: &CliConfig) -> Vec<String> {
    let mut all = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        all.push(format!("run.seeds=[{seed}]"));
    }
    all
}

fn say(cli: &CliConfig, line: impl AsRef<str>) {
    if !cli.quiet {
        println!("{}", line.as_ref());
    }
}

fn status_name(s: StopStatus) -> &'static str {
    match s {
        StopStatus::Optimal => "optimal",
        StopStatus::Budget => "budget",
        StopStatus::MaxOuter => "max-outer",
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
}

fn cmd_run(cli: &CliConfig) -> Result<u8> {
    let Some(path) = &cli.config else { bail!("run needs --config PATH") };
    let spec = config::load_spec(Some(path), &overrides(cli), &data_dir(cli))?;
    info!("running {} with {} clients over {} seed(s)", spec.algorithm.name(), spec.n, spec.seeds.len());
    let result = harness::run_experiment(&spec)?;
    let written = artifacts::write_run(&cli.out, &spec, &result)?;

    let mut code = 0;
    for run in &result.runs {
        let m = &run.metrics;
        if run.summary.status != StopStatus::Optimal {
            code = EXIT_NONCONVERGED;
        }
        say(
            cli,
            format!(
                "seed {}: status {}, {} sweeps, {} outer loops, primal {:.3e}, dual {:.3e}, mse {}, r2 {}, accuracy {}",
                run.seed,
                status_name(run.summary.status),
                m.sweeps,
                m.outer_loops,
                m.primal_inf,
                m.dual_inf,
                fmt_opt(m.mse),
                fmt_opt(m.r2),
                fmt_opt(m.accuracy_percent)
            ),
        );
    }
    if let Some(agg) = &result.aggregate {
        say(cli, format!("accuracy {:.4}% (std {:.2} per 10k, {} scores)", agg.mean_percent, agg.std_per_tenthousand, agg.count));
    }
    for p in written {
        info!("wrote {}", p.display());
    }
    Ok(code)
}

fn cmd_table1(cli: &CliConfig, csv: &[PathBuf]) -> Result<u8> {
    if cli.seed.is_some() || cli.config.is_some() || !cli.overrides.is_empty() {
        warn!("reproduce-table1 uses fixed settings; --seed, --config and --set are ignored");
    }
    let rows = if csv.is_empty() {
        let (rows, missing) = harness::reproduce_table1(&data_dir(cli))?;
        for m in missing {
            warn!("skipping {m}: file not found");
        }
        rows
    } else {
        csv.iter()
            .map(|p| {
                let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                harness::table1_row(&name, p)
            })
            .collect::<dald::error::Result<Vec<_>>>()?
    };
    if rows.is_empty() {
        bail!("no regression datasets found in {}", data_dir(cli).display());
    }
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let path = cli.out.join(artifacts::TABLE1_FILE);
    artifacts::write_table1(&path, &rows)?;
    say(cli, format!("{:<28} {:>8} {:>14} {:>8} {:>14} {:>8} {:>10}", "dataset", "samples", "aio mse", "aio r2", "dald mse", "dald r2", "gap"));
    for r in &rows {
        say(
            cli,
            format!(
                "{:<28} {:>8} {:>14.4} {:>8} {:>14.4} {:>8} {:>10.2e}",
                r.dataset,
                r.samples,
                r.aio_mse,
                r.aio_r2.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into()),
                r.dald_mse,
                r.dald_r2.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into()),
                r.relative_gap
            ),
        );
    }
    info!("wrote {}", path.display());
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_table2(
    cli: &CliConfig,
    algorithms: &[String],
    n_list: &[usize],
    lambdas: &[f64],
    budgets: &[usize],
    seeds: &[u64],
    subsample: Option<usize>,
) -> Result<u8> {
    if cli.config.is_some() || !cli.overrides.is_empty() {
        warn!("reproduce-table2 uses fixed settings; --config and --set are ignored");
    }
    let mut grid = Table2Grid::new(data_dir(cli));
    grid.algorithms = algorithms.iter().map(|a| Algorithm::parse(a)).collect::<dald::error::Result<_>>()?;
    grid.n_list = n_list.to_vec();
    grid.lambdas = lambdas.to_vec();
    grid.budgets = budgets.to_vec();
    grid.seeds = cli.seed.map(|s| vec![s]).unwrap_or_else(|| seeds.to_vec());
    grid.subsample = subsample;
    if grid.algorithms.is_empty() || grid.n_list.is_empty() || grid.lambdas.is_empty() || grid.budgets.is_empty() {
        bail!("empty grid");
    }

    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let path = cli.out.join(artifacts::TABLE_FILE);
    let mut table = TableWriter::create(&path)?;
    let mut write_err = None;
    say(cli, dald::harness::TABLE2_HEADER);
    harness::reproduce_table2(&grid, |row| {
        say(cli, row.csv_line());
        if let Err(e) = table.push(row) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    info!("wrote {}", path.display());
    Ok(0)
}

fn cmd_validate(cli: &CliConfig, dir: Option<&Path>) -> Result<u8> {
    if let Some(path) = &cli.config {
        config::load_spec(Some(path), &overrides(cli), &data_dir(cli))?;
        say(cli, format!("{}: ok", path.display()));
    }
    if dir.is_some() || cli.config.is_none() {
        for line in artifacts::validate_dir(dir.unwrap_or(&cli.out))? {
            say(cli, line);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = CliConfig::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet { "error" } else { "info" }))
        .format_timestamp(None)
        .init();
    let outcome = match &cli.command {
        Command::Run => cmd_run(&cli),
        Command::ReproduceTable1 { csv } => cmd_table1(&cli, csv),
        Command::ReproduceTable2 { algorithms, n_list, lambdas, budgets, seeds, subsample } => {
            cmd_table2(&cli, algorithms, n_list, lambdas, budgets, seeds, *subsample)
        }
        Command::Validate { dir } => cmd_validate(&cli, dir.as_deref()),
        Command::Keys => {
            for d in config::KEYS {
                println!("{:<36} {:<40} {}", d.key, d.example, d.doc);
            }
            Ok(0)
        }
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
