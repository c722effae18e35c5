//! Class-incremental streams: seeded `B-m Inc-n` class splits, synthetic Gaussian
//! cluster datasets, and dataset files.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MosError, Result};
use crate::inference::ClassTaskMap;
use crate::numerics::Rng;

pub const DEFAULT_SHUFFLE_SEED: u64 = 1993;

fn default_shuffle_seed() -> u64 {
    DEFAULT_SHUFFLE_SEED
}

/// `B-m Inc-n`: the first task holds `base_m` classes (or `inc_n` when `base_m` is 0),
/// every later task `inc_n`. Leftover classes join the final task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub total_classes: usize,
    #[serde(default)]
    pub base_m: usize,
    pub inc_n: usize,
    #[serde(default = "default_shuffle_seed")]
    pub shuffle_seed: u64,
}

impl StreamSpec {
    pub fn new(total_classes: usize, base_m: usize, inc_n: usize) -> Self {
        StreamSpec {
            total_classes,
            base_m,
            inc_n,
            shuffle_seed: DEFAULT_SHUFFLE_SEED,
        }
    }

    /// Number of classes in each task.
    pub fn task_sizes(&self) -> Result<Vec<usize>> {
        let fail = |m: String| Err(MosError::Config(m));
        if self.total_classes == 0 || self.inc_n == 0 {
            return fail("total_classes and inc_n must be positive".into());
        }
        let first = if self.base_m == 0 { self.inc_n } else { self.base_m };
        if self.base_m > 0 && self.base_m + self.inc_n > self.total_classes {
            return fail(format!(
                "B{} Inc{} leaves no room for an incremental task among {} classes",
                self.base_m, self.inc_n, self.total_classes
            ));
        }
        if first > self.total_classes {
            return fail(format!(
                "first task needs {first} classes but only {} exist",
                self.total_classes
            ));
        }
        let mut sizes = vec![first];
        let mut left = self.total_classes - first;
        while left >= self.inc_n {
            sizes.push(self.inc_n);
            left -= self.inc_n;
        }
        *sizes.last_mut().expect("at least one task") += left;
        Ok(sizes)
    }
}

/// A class order and its partition into tasks.
///
/// Classes are relabelled by their position in the shuffled order, so task `t`
/// owns a contiguous range of labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    /// `order[label] = original class id`.
    pub order: Vec<usize>,
    /// `relabel[original id] = label`.
    pub relabel: Vec<usize>,
    /// Original class ids of each task, `Y_1 … Y_B`.
    pub tasks: Vec<Vec<usize>>,
    /// Task lookup over labels.
    pub map: ClassTaskMap,
}

impl Splits {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Labels of task `t`.
    pub fn task_labels(&self, t: usize) -> Vec<usize> {
        self.tasks[t].iter().map(|&c| self.relabel[c]).collect()
    }

    /// Copy of `ds` with original class ids replaced by labels.
    pub fn relabel_dataset(&self, ds: &Dataset) -> Result<Dataset> {
        let labels = ds
            .labels
            .iter()
            .map(|&c| {
                self.relabel
                    .get(c)
                    .copied()
                    .ok_or_else(|| MosError::InvalidInput(format!("class {c} is outside the stream")))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(ds.features.clone(), labels, ds.split)
    }
}

/// Seeded Fisher–Yates permutation of the classes, then the `B-m Inc-n` partition.
pub fn make_splits(spec: &StreamSpec) -> Result<Splits> {
    let sizes = spec.task_sizes()?;
    let mut order: Vec<usize> = (0..spec.total_classes).collect();
    Rng::new(spec.shuffle_seed).shuffle(&mut order);
    let mut relabel = vec![0; spec.total_classes];
    for (label, &c) in order.iter().enumerate() {
        relabel[c] = label;
    }
    let mut tasks = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for size in &sizes {
        tasks.push(order[start..start + size].to_vec());
        start += size;
    }
    let map = ClassTaskMap::from_task_sizes(&sizes);
    Ok(Splits {
        order,
        relabel,
        tasks,
        map,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, split: Split) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(MosError::dims(format!(
                "{} feature rows for {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(first) = features.first() {
            if features.iter().any(|f| f.len() != first.len()) {
                return Err(MosError::dims("feature rows differ in length"));
            }
        }
        Ok(Dataset { features, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Instances whose label is in `classes`, in their original order.
    pub fn subset(&self, classes: &[usize]) -> Dataset {
        let (features, labels) = self
            .features
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| classes.contains(l))
            .map(|(f, &l)| (f.clone(), l))
            .unzip();
        Dataset {
            features,
            labels,
            split: self.split,
        }
    }

    /// `MOSD` binary: magic, u32 n, u32 D, n·D f32, n u32 labels (little-endian).
    pub fn save_f32bin(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(12 + self.len() * (4 * self.dim() + 4));
        out.extend_from_slice(b"MOSD");
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for row in &self.features {
            for &v in row {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// One row per instance, features then the integer label, no header.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(fs::File::create(path)?);
        for (row, l) in self.features.iter().zip(&self.labels) {
            for v in row {
                write!(w, "{v},")?;
            }
            writeln!(w, "{l}")?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Csv,
    F32bin,
}

/// Reads a dataset file. Labels must be below `num_classes`; on any error nothing
/// is returned.
pub fn load_dataset(path: &Path, format: DataFormat, num_classes: usize, split: Split) -> Result<Dataset> {
    let (features, labels) = match format {
        DataFormat::Csv => read_csv(path)?,
        DataFormat::F32bin => read_f32bin(path)?,
    };
    if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(MosError::format(
            path,
            format!("label {bad} is not below the class count {num_classes}"),
        ));
    }
    Dataset::new(features, labels, split)
}

fn read_csv(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() < 2 {
            return Err(MosError::format(path, format!("row {i} needs features and a label")));
        }
        let fields: Vec<&str> = record.iter().collect();
        let (label, feats) = fields.split_last().expect("at least two fields");
        let row = feats
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| MosError::format(path, format!("row {i}: {e}")))?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(MosError::format(path, format!("row {i} has a non-finite feature")));
        }
        let label = label
            .parse::<usize>()
            .map_err(|e| MosError::format(path, format!("row {i} label: {e}")))?;
        features.push(row);
        labels.push(label);
    }
    Ok((features, labels))
}

fn read_f32bin(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[..4] != b"MOSD" {
        return Err(MosError::format(path, "missing MOSD header"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let n = word(4) as usize;
    let d = word(8) as usize;
    let expected = 12 + n * d * 4 + n * 4;
    if bytes.len() != expected {
        return Err(MosError::format(
            path,
            format!("expected {expected} bytes for {n}×{d}, found {}", bytes.len()),
        ));
    }
    let mut features = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = (0..d)
            .map(|j| f64::from(f32::from_bits(word(12 + 4 * (i * d + j)))))
            .collect();
        if row.iter().any(|v| !v.is_finite()) {
            return Err(MosError::format(path, format!("instance {i} has a non-finite feature")));
        }
        features.push(row);
    }
    let base = 12 + n * d * 4;
    let labels = (0..n).map(|i| word(base + 4 * i) as usize).collect();
    Ok((features, labels))
}

/// Parameters of the synthetic Gaussian-cluster benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub per_class: usize,
    pub separation: f64,
    pub noise: f64,
}

/// Class means uniform on the sphere of radius `separation`; instances are the mean
/// plus `N(0, noise² I)`. Each class keeps `max(1, n/5)` instances for test and the
/// rest for train. Labels are class ids `0..num_classes`.
pub fn synthetic_cil_dataset(num_classes: usize, spec: &SyntheticSpec, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
    if spec.per_class < 2 {
        return Err(MosError::Config("synthetic data needs at least 2 instances per class".into()));
    }
    if !(spec.separation > 0.0) || !(spec.noise >= 0.0) || spec.dim == 0 {
        return Err(MosError::Config(
            "synthetic data needs dim ≥ 1, separation > 0 and noise ≥ 0".into(),
        ));
    }
    let n_test = (spec.per_class / 5).max(1);
    let n_train = spec.per_class - n_test;
    let mut train = Dataset::new(Vec::new(), Vec::new(), Split::Train)?;
    let mut test = Dataset::new(Vec::new(), Vec::new(), Split::Test)?;
    for class in 0..num_classes {
        let mean = loop {
            let v: Vec<f64> = (0..spec.dim).map(|_| rng.standard_normal()).collect();
            let norm = crate::numerics::l2_norm(&v);
            if norm > 1e-12 {
                break v.iter().map(|x| x / norm * spec.separation).collect::<Vec<f64>>();
            }
        };
        for i in 0..spec.per_class {
            let x: Vec<f64> = mean.iter().map(|m| m + spec.noise * rng.standard_normal()).collect();
            let target = if i < n_train { &mut train } else { &mut test };
            target.features.push(x);
            target.labels.push(class);
        }
    }
    Ok((train, test))
}
