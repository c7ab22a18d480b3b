//! Output files and their read-back checks.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use dald::engine::TraceRecord;
use dald::harness::{ExperimentResult, MetricsRecord, RunSpec, Table1Row, Table2Row, TABLE2_HEADER};
use serde::{Deserialize, Serialize};

pub const METRICS_FILE: &str = "metrics.json";
pub const TRACE_FILE: &str = "trace.log";
pub const PARTITION_FILE: &str = "partition.csv";
pub const TABLE_FILE: &str = "table.csv";
pub const TABLE1_FILE: &str = "table1.csv";
pub const TABLE1_HEADER: &str = "dataset,samples,features,aio_mse,aio_r2,dald_mse,dald_r2,relative_gap";

/// One object per seeded run in `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub algorithm: String,
    pub clients: usize,
    #[serde(flatten)]
    pub metrics: MetricsRecord,
    /// Per-client scores when every client block is evaluated.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub client_metrics: Vec<MetricsRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub seed: u64,
    #[serde(flatten)]
    pub record: TraceRecord,
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn partition_name(index: usize, seed: u64) -> String {
    if index == 0 {
        PARTITION_FILE.to_string()
    } else {
        format!("partition_seed{seed}.csv")
    }
}

/// Writes metrics, trace, partition exports and, for binary tasks, the aggregate row.
/// The first seed's partition goes to `partition.csv`, later ones to `partition_seed<s>.csv`.
pub fn write_run(dir: &Path, spec: &RunSpec, result: &ExperimentResult) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();

    let records: Vec<RunRecord> = result
        .runs
        .iter()
        .map(|r| RunRecord {
            seed: r.seed,
            algorithm: spec.algorithm.name(),
            clients: spec.n,
            metrics: r.metrics.clone(),
            client_metrics: r.client_metrics.clone(),
        })
        .collect();
    let path = dir.join(METRICS_FILE);
    let mut out = create(&path)?;
    serde_json::to_writer_pretty(&mut out, &records)?;
    writeln!(out)?;
    out.flush()?;
    written.push(path);

    let path = dir.join(TRACE_FILE);
    let mut out = create(&path)?;
    for run in &result.runs {
        for record in &run.trace {
            serde_json::to_writer(&mut out, &TraceLine { seed: run.seed, record: record.clone() })?;
            writeln!(out)?;
        }
    }
    out.flush()?;
    written.push(path);

    for (i, run) in result.runs.iter().enumerate() {
        let path = dir.join(partition_name(i, run.seed));
        run.partition.write_csv(&path)?;
        written.push(path);
    }

    if let Some(agg) = &result.aggregate {
        let row = Table2Row {
            algorithm: spec.algorithm.name(),
            n: spec.n,
            lambda: spec.l1_weight,
            iters: spec.budget,
            mean_acc: agg.mean_percent,
            std_acc_permyriad: agg.std_per_tenthousand,
        };
        let path = dir.join(TABLE_FILE);
        let mut out = create(&path)?;
        writeln!(out, "{TABLE2_HEADER}\n{}", row.csv_line())?;
        out.flush()?;
        written.push(path);
    }
    Ok(written)
}

/// Appends rows to `table.csv` as they arrive.
pub struct TableWriter {
    out: BufWriter<fs::File>,
}

impl TableWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = create(path)?;
        writeln!(out, "{TABLE2_HEADER}")?;
        out.flush()?;
        Ok(TableWriter { out })
    }

    pub fn push(&mut self, row: &Table2Row) -> Result<()> {
        writeln!(self.out, "{}", row.csv_line())?;
        Ok(self.out.flush()?)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn table1_line(r: &Table1Row) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        r.dataset,
        r.samples,
        r.features,
        r.aio_mse,
        opt(r.aio_r2),
        r.dald_mse,
        opt(r.dald_r2),
        r.relative_gap
    )
}

pub fn write_table1(path: &Path, rows: &[Table1Row]) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "{TABLE1_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", table1_line(r))?;
    }
    Ok(out.flush()?)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn check_metrics(path: &Path) -> Result<String> {
    let records: Vec<RunRecord> =
        serde_json::from_str(&read(path)?).with_context(|| format!("{}: not a list of run records", path.display()))?;
    ensure!(!records.is_empty(), "{}: no runs", path.display());
    for (i, r) in records.iter().enumerate() {
        ensure!(r.metrics.status.is_some(), "{}: run {i} has no status", path.display());
        ensure!(r.clients >= 1, "{}: run {i} has no clients", path.display());
    }
    Ok(format!("{} runs", records.len()))
}

pub fn check_trace(path: &Path) -> Result<String> {
    let mut count = 0;
    for (i, line) in read(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t: TraceLine = serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        ensure!(t.record.k >= 1, "{}:{}: outer index must be at least 1", path.display(), i + 1);
        count += 1;
    }
    Ok(format!("{count} records"))
}

fn csv_lines(path: &Path, header: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let text = read(path)?;
    let mut lines = text.lines().enumerate();
    let first = lines.next().map(|(_, l)| l.trim()).unwrap_or("");
    ensure!(first == header, "{}: header {first:?}, expected {header:?}", path.display());
    let width = header.split(',').count();
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let fields: Vec<String> = l.split(',').map(|f| f.trim().to_string()).collect();
            ensure!(fields.len() == width, "{}:{}: {} fields, expected {width}", path.display(), i + 1, fields.len());
            Ok((i + 1, fields))
        })
        .collect()
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, name: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| anyhow::anyhow!("{}:{line}: {name} {value:?} is not valid", path.display()))
}

pub fn check_partition(path: &Path) -> Result<String> {
    let rows = csv_lines(path, "index,client_id")?;
    let mut last = None;
    let mut clients = std::collections::BTreeSet::new();
    for (line, f) in &rows {
        let index: usize = field(path, *line, "index", &f[0])?;
        let client: usize = field(path, *line, "client_id", &f[1])?;
        if last.is_some_and(|l| index <= l) {
            bail!("{}:{line}: index {index} repeated or out of order", path.display());
        }
        last = Some(index);
        clients.insert(client);
    }
    ensure!(!rows.is_empty(), "{}: no samples", path.display());
    Ok(format!("{} samples over {} clients", rows.len(), clients.len()))
}

pub fn check_table2(path: &Path) -> Result<String> {
    let rows = csv_lines(path, TABLE2_HEADER)?;
    for (line, f) in &rows {
        field::<usize>(path, *line, "n", &f[1])?;
        field::<f64>(path, *line, "lambda", &f[2])?;
        field::<usize>(path, *line, "iters", &f[3])?;
        let acc: f64 = field(path, *line, "mean_acc", &f[4])?;
        ensure!((0.0..=100.0).contains(&acc), "{}:{line}: mean_acc {acc} outside [0, 100]", path.display());
        field::<f64>(path, *line, "std_acc_permyriad", &f[5])?;
    }
    Ok(format!("{} rows", rows.len()))
}

pub fn check_table1(path: &Path) -> Result<String> {
    let rows = csv_lines(path, TABLE1_HEADER)?;
    for (line, f) in &rows {
        field::<usize>(path, *line, "samples", &f[1])?;
        field::<usize>(path, *line, "features", &f[2])?;
        for (name, v) in [("aio_mse", &f[3]), ("dald_mse", &f[5]), ("relative_gap", &f[7])] {
            field::<f64>(path, *line, name, v)?;
        }
        for (name, v) in [("aio_r2", &f[4]), ("dald_r2", &f[6])] {
            if !v.is_empty() {
                field::<f64>(path, *line, name, v)?;
            }
        }
    }
    Ok(format!("{} rows", rows.len()))
}

/// Checks every known artifact present in `dir`; returns one `file: summary` line each.
pub fn validate_dir(dir: &Path) -> Result<Vec<String>> {
    ensure!(dir.is_dir(), "{}: not a directory", dir.display());
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut report = Vec::new();
    for name in names {
        let path = dir.join(&name);
        let summary = match name.as_str() {
            METRICS_FILE => check_metrics(&path)?,
            TRACE_FILE => check_trace(&path)?,
            TABLE_FILE => check_table2(&path)?,
            TABLE1_FILE => check_table1(&path)?,
            n if n == PARTITION_FILE || (n.starts_with("partition_seed") && n.ends_with(".csv")) => {
                check_partition(&path)?
            }
            _ => continue,
        };
        report.push(format!("{name}: {summary}"));
    }
    ensure!(!report.is_empty(), "{}: no artifacts found", dir.display());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn partition_checks_order_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let ok = write(dir.path(), "p.csv", "index,client_id\n0,1\n2,0\n");
        assert_eq!(check_partition(&ok).unwrap(), "2 samples over 2 clients");
        let dup = write(dir.path(), "d.csv", "index,client_id\n0,1\n0,0\n");
        assert!(check_partition(&dup).unwrap_err().to_string().contains(":3:"));
        let header = write(dir.path(), "h.csv", "i,c\n0,1\n");
        assert!(check_partition(&header).is_err());
    }

    #[test]
    fn table_checks_fields() {
        let dir = tempfile::tempdir().unwrap();
        let ok = write(dir.path(), "t.csv", &format!("{TABLE2_HEADER}\nfedprox,10,0.001,1000,97.5,38.1\n"));
        assert_eq!(check_table2(&ok).unwrap(), "1 rows");
        let bad = write(dir.path(), "b.csv", &format!("{TABLE2_HEADER}\nfedprox,10,0.001,1000,197.5,38.1\n"));
        assert!(check_table2(&bad).is_err());
        let short = write(dir.path(), "s.csv", &format!("{TABLE2_HEADER}\nfedprox,10\n"));
        assert!(check_table2(&short).is_err());
    }

    #[test]
    fn trace_line_round_trip() {
        let line = TraceLine {
            seed: 3,
            record: TraceRecord { k: 2, v: 1, primal_inf: 0.5, dual_inf: 0.25, surrogate_value: None, elapsed_ns: 10 },
        };
        let text = serde_json::to_string(&line).unwrap();
        assert!(text.contains("\"primal_inf\":0.5"));
        assert_eq!(serde_json::from_str::<TraceLine>(&text).unwrap(), line);
    }

    #[test]
    fn table1_rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let row = Table1Row {
            dataset: "Demo".into(),
            samples: 10,
            features: 2,
            aio_mse: 1.5,
            aio_r2: Some(0.9),
            dald_mse: 1.5,
            dald_r2: None,
            relative_gap: 0.0,
        };
        let path = dir.path().join(TABLE1_FILE);
        write_table1(&path, &[row]).unwrap();
        assert_eq!(check_table1(&path).unwrap(), "1 rows");
    }

    #[test]
    fn empty_dir_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(validate_dir(dir.path()).is_err());
    }
}
