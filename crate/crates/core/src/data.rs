//! Dataset loading, standardization and client partitioning.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{LocalObjective, ObjectiveKind, SampleStore};

/// Training-set size of the canonical MNIST files after keeping digits 3 and 7.
pub const MNIST_3V7_COUNT: usize = 12_396;
pub const MNIST_POSITIVE_DIGIT: u8 = 3;
pub const MNIST_NEGATIVE_DIGIT: u8 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    /// Targets in {-1, +1}.
    Binary,
}

impl Task {
    pub fn objective_kind(self) -> ObjectiveKind {
        match self {
            Task::Regression => ObjectiveKind::LeastSquares,
            Task::Binary => ObjectiveKind::LogisticL1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetTable {
    pub name: String,
    pub task: Task,
    pub store: Arc<SampleStore>,
}

impl DatasetTable {
    pub fn new(name: impl Into<String>, task: Task, store: SampleStore) -> Result<Self> {
        if task == Task::Binary {
            if let Some(i) = store.targets().iter().position(|&t| t != 1.0 && t != -1.0) {
                return Err(Error::param(format!("targets must be -1/+1 (row {i} has {})", store.target(i))));
            }
        }
        Ok(DatasetTable { name: name.into(), task, store: Arc::new(store) })
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn feature_count(&self) -> usize {
        self.store.feature_count()
    }

    fn with_store(&self, store: SampleStore) -> DatasetTable {
        DatasetTable { name: self.name.clone(), task: self.task, store: Arc::new(store) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TargetColumn {
    #[default]
    Last,
    /// Zero-based column index.
    Index(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CsvOptions {
    pub has_header: bool,
    pub target: TargetColumn,
    /// Binary tasks: map target 0 to -1 (and keep 1 as +1).
    pub remap_zero_one: bool,
}

pub fn load_csv(path: &Path, task: Task, opts: CsvOptions) -> Result<DatasetTable> {
    let data_err = |message: String| Error::Data { path: path.to_path_buf(), message };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io { path: path.to_path_buf(), source },
            other => data_err(format!("{other:?}")),
        })?;

    let mut width = None;
    let mut features = Vec::new();
    let mut targets = Vec::new();
    let first_line = if opts.has_header { 2 } else { 1 };
    for (i, record) in reader.records().enumerate() {
        let line = first_line + i;
        let record = record.map_err(|e| data_err(format!("line {line}: {e}")))?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(data_err(format!("line {line}: {} columns, expected {w}", record.len())));
        }
        if w < 2 {
            return Err(data_err("need at least one feature column and a target column".into()));
        }
        let t = match opts.target {
            TargetColumn::Last => w - 1,
            TargetColumn::Index(c) if c < w => c,
            TargetColumn::Index(c) => return Err(data_err(format!("target column {c} outside {w} columns"))),
        };
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| data_err(format!("line {line}, column {}: non-numeric cell {cell:?}", col + 1)))?;
            if col == t {
                targets.push(v);
            } else {
                features.push(v);
            }
        }
    }
    let Some(w) = width else {
        return Err(data_err("empty file".into()));
    };
    if task == Task::Binary {
        for (i, t) in targets.iter_mut().enumerate() {
            match *t {
                v if v == 1.0 || v == -1.0 => {}
                v if v == 0.0 && opts.remap_zero_one => *t = -1.0,
                v => {
                    return Err(data_err(format!("targets must be -1/+1, found {v} at data row {}", i + 1)));
                }
            }
        }
    }
    let name = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    DatasetTable::new(name, task, SampleStore::new(w - 1, features, targets)?)
}

/// Per-feature affine transform learned from a training table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population standard deviation; 1 for constant features.
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(table: &DatasetTable) -> Result<Self> {
        let n = table.len();
        if n < 2 {
            return Err(Error::param("standardization needs at least two samples"));
        }
        let m = table.feature_count();
        let mut mean = vec![0.0; m];
        for i in 0..n {
            for (mu, x) in mean.iter_mut().zip(table.store.row(i)) {
                *mu += x;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n as f64);
        let mut var = vec![0.0; m];
        for i in 0..n {
            for ((s, x), mu) in var.iter_mut().zip(table.store.row(i)).zip(&mean) {
                *s += (x - mu).powi(2);
            }
        }
        let std = var
            .iter()
            .zip(&mean)
            .map(|(s, mu)| {
                let sd = (s / n as f64).sqrt();
                if sd <= 1e-12 * mu.abs().max(1.0) {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, table: &DatasetTable) -> Result<DatasetTable> {
        let m = table.feature_count();
        if m != self.mean.len() {
            return Err(Error::dim(format!("table has {m} features, transform expects {}", self.mean.len())));
        }
        let mut features = Vec::with_capacity(m * table.len());
        for i in 0..table.len() {
            for ((x, mu), sd) in table.store.row(i).iter().zip(&self.mean).zip(&self.std) {
                // Constant features have std 1, so this maps them to 0.
                features.push((x - mu) / sd);
            }
        }
        Ok(table.with_store(SampleStore::new(m, features, table.store.targets().to_vec())?))
    }
}

/// Zero-mean, unit-variance features, with the transform for reuse on held-out data.
pub fn standardize(table: &DatasetTable) -> Result<(DatasetTable, Standardizer)> {
    let s = Standardizer::fit(table)?;
    Ok((s.apply(table)?, s))
}

/// Appends a constant-one feature column.
pub fn add_intercept(table: &DatasetTable) -> Result<DatasetTable> {
    let m = table.feature_count();
    let mut features = Vec::with_capacity((m + 1) * table.len());
    for i in 0..table.len() {
        features.extend_from_slice(table.store.row(i));
        features.push(1.0);
    }
    Ok(table.with_store(SampleStore::new(m + 1, features, table.store.targets().to_vec())?))
}

/// Assignment of sample indices to clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    /// Client per sample index; `None` for samples left out.
    pub assignment: Vec<Option<usize>>,
    pub n: usize,
    pub counts: Vec<usize>,
    /// Number of assigned samples.
    pub global_count: usize,
    pub dropped: usize,
}

impl Partition {
    pub fn from_assignment(assignment: Vec<Option<usize>>, n: usize) -> Result<Self> {
        let mut counts = vec![0; n];
        for &c in assignment.iter().flatten() {
            if c >= n {
                return Err(Error::Partition(format!("client {c} outside {n} clients")));
            }
            counts[c] += 1;
        }
        if let Some(i) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Partition(format!("client {i} received no samples")));
        }
        let global_count = counts.iter().sum();
        let dropped = assignment.len() - global_count;
        Ok(Partition { assignment, n, counts, global_count, dropped })
    }

    /// Sample indices of each client, ascending.
    pub fn client_rows(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.n];
        for (i, c) in self.assignment.iter().enumerate() {
            if let Some(c) = c {
                rows[*c].push(i);
            }
        }
        rows
    }

    /// One objective per client over its rows, normalized by the assigned-sample count.
    pub fn objectives(&self, table: &DatasetTable, l1_weight: f64) -> Result<Vec<LocalObjective>> {
        if self.assignment.len() != table.len() {
            return Err(Error::Partition(format!(
                "partition covers {} samples, table has {}",
                self.assignment.len(),
                table.len()
            )));
        }
        self.client_rows()
            .into_iter()
            .map(|rows| {
                LocalObjective::from_store(
                    table.task.objective_kind(),
                    table.store.clone(),
                    rows,
                    self.global_count,
                    l1_weight,
                )
            })
            .collect()
    }

    /// `index,client_id` per assigned sample, with a header line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |source| Error::Io { path: path.to_path_buf(), source };
        let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
        writeln!(out, "index,client_id").map_err(io)?;
        for (i, c) in self.assignment.iter().enumerate() {
            if let Some(c) = c {
                writeln!(out, "{i},{c}").map_err(io)?;
            }
        }
        out.flush().map_err(io)
    }
}

/// Seeded shuffle, then contiguous chunks; the first `N mod n` clients get one extra sample.
pub fn partition_iid_even(sample_count: usize, n: usize, seed: u64) -> Result<Partition> {
    if n == 0 || sample_count < n {
        return Err(Error::Partition(format!("cannot split {sample_count} samples across {n} clients")));
    }
    let mut order: Vec<usize> = (0..sample_count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (sample_count / n, sample_count % n);
    let mut assignment = vec![None; sample_count];
    let mut pos = 0;
    for c in 0..n {
        let size = base + usize::from(c < extra);
        for &i in &order[pos..pos + size] {
            assignment[i] = Some(c);
        }
        pos += size;
    }
    Partition::from_assignment(assignment, n)
}

/// Non-IID split over two classes. Client `i` starts at position `i` of each class list; even
/// clients step through class A with stride `n` and class B with stride `4n`, odd clients the
/// other way round. Positions nobody reaches are dropped.
///
/// `class_a` and `class_b` hold sample indices into a table of `sample_count` rows.
pub fn partition_stratified_strides(
    class_a: &[usize],
    class_b: &[usize],
    n: usize,
    sample_count: usize,
) -> Result<Partition> {
    if class_a.is_empty() || class_b.is_empty() {
        return Err(Error::Partition("both class index lists must be non-empty".into()));
    }
    if n < 2 {
        return Err(Error::Partition(format!("stratified split needs at least two clients, got {n}")));
    }
    let mut assignment = vec![None; sample_count];
    let mut take = |list: &[usize], start: usize, stride: usize, c: usize| -> Result<()> {
        for &idx in list.iter().skip(start).step_by(stride) {
            let slot = assignment
                .get_mut(idx)
                .ok_or_else(|| Error::Partition(format!("sample index {idx} outside {sample_count} samples")))?;
            if slot.is_some() {
                return Err(Error::Partition(format!("sample {idx} assigned twice")));
            }
            *slot = Some(c);
        }
        Ok(())
    };
    for c in 0..n {
        let (a_stride, b_stride) = if c % 2 == 0 { (n, 4 * n) } else { (4 * n, n) };
        take(class_a, c, a_stride, c)?;
        take(class_b, c, b_stride, c)?;
    }
    Partition::from_assignment(assignment, n)
}

/// Pixel scaling for [`load_mnist_3v7`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelScale {
    /// Divide by 255.
    #[default]
    Unit,
    /// Keep 0..255.
    Raw,
}

fn read_idx(path: &Path, magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let data_err = |message: String| Error::Data { path: path.to_path_buf(), message };
    let be = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| data_err("truncated header".into()))
    };
    let found = be(0)?;
    if found != magic {
        return Err(data_err(format!("bad magic {found}, expected {magic}")));
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims).map(|d| be(4 + 4 * d).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndims;
    let expected: usize = dims.iter().product();
    if bytes.len() < start + expected {
        return Err(data_err(format!("truncated body: {} bytes, expected {expected}", bytes.len() - start)));
    }
    Ok((dims, bytes[start..start + expected].to_vec()))
}

/// Digits 3 (target +1) and 7 (target -1) from IDX image and label files.
pub fn load_mnist_3v7(images: &Path, labels: &Path, scale: PixelScale) -> Result<DatasetTable> {
    let (idims, pixels) = read_idx(images, 2051)?;
    let (ldims, label_bytes) = read_idx(labels, 2049)?;
    if idims[0] != ldims[0] {
        return Err(Error::Data {
            path: labels.to_path_buf(),
            message: format!("{} labels for {} images", ldims[0], idims[0]),
        });
    }
    let m = idims[1] * idims[2];
    let factor = match scale {
        PixelScale::Unit => 1.0 / 255.0,
        PixelScale::Raw => 1.0,
    };
    let mut features = Vec::new();
    let mut targets = Vec::new();
    for (i, &label) in label_bytes.iter().enumerate() {
        if label > 9 {
            return Err(Error::Data { path: labels.to_path_buf(), message: format!("label {label} at index {i}") });
        }
        let target = match label {
            MNIST_POSITIVE_DIGIT => 1.0,
            MNIST_NEGATIVE_DIGIT => -1.0,
            _ => continue,
        };
        features.extend(pixels[i * m..(i + 1) * m].iter().map(|&p| p as f64 * factor));
        targets.push(target);
    }
    if targets.is_empty() {
        return Err(Error::Data { path: labels.to_path_buf(), message: "no samples of digits 3 or 7".into() });
    }
    if targets.len() != MNIST_3V7_COUNT {
        log::warn!("{} samples of digits 3/7, canonical training files have {MNIST_3V7_COUNT}", targets.len());
    }
    DatasetTable::new("mnist-3v7", Task::Binary, SampleStore::new(m, features, targets)?)
}

/// Indices of positive and negative samples, each list shuffled by `seed`.
pub fn class_indices(table: &DatasetTable, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = (0..table.len()).partition(|&i| table.store.target(i) > 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    (pos, neg)
}
