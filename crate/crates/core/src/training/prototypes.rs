use std::collections::BTreeMap;
use std::path::Path;

use crate::backbone::{AdapterSet, FrozenBackbone};
use crate::checkpoint::{Container, PayloadKind};
use crate::error::{MosError, Result};
use crate::numerics::{exact_sum, Matrix};
use crate::training::TaskData;

/// Class prototypes per adapter: `bank.get(a, c)` is the mean embedding of class `c`
/// under adapter `a`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrototypeBank {
    // [adapter][class]
    slots: Vec<Vec<Option<Vec<f64>>>>,
}

impl PrototypeBank {
    pub fn new() -> Self {
        PrototypeBank::default()
    }

    pub fn insert(&mut self, adapter: usize, class: usize, prototype: Vec<f64>) {
        if self.slots.len() <= adapter {
            self.slots.resize_with(adapter + 1, Vec::new);
        }
        let row = &mut self.slots[adapter];
        if row.len() <= class {
            row.resize(class + 1, None);
        }
        row[class] = Some(prototype);
    }

    pub fn get(&self, adapter: usize, class: usize) -> Option<&[f64]> {
        self.slots.get(adapter)?.get(class)?.as_deref()
    }

    pub fn num_adapters(&self) -> usize {
        self.slots.len()
    }

    /// True when adapter `adapter` has a prototype for every class in `0..num_classes`.
    pub fn covers(&self, adapter: usize, num_classes: usize) -> bool {
        (0..num_classes).all(|c| self.get(adapter, c).is_some())
    }

    /// Every (adapter, class) pair present.
    pub fn coverage(&self) -> Vec<(usize, usize)> {
        self.slots
            .iter()
            .enumerate()
            .flat_map(|(a, row)| {
                row.iter()
                    .enumerate()
                    .filter(|(_, p)| p.is_some())
                    .map(move |(c, _)| (a, c))
            })
            .collect()
    }
}

fn embeddings_by_class(
    data: &TaskData,
    backbone: &FrozenBackbone,
    adapter: &AdapterSet,
) -> Result<BTreeMap<usize, Vec<Vec<f64>>>> {
    let ds = data.read();
    let mut groups: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (x, &y) in ds.features.iter().zip(&ds.labels) {
        groups.entry(y).or_default().push(backbone.forward(x, adapter)?);
    }
    Ok(groups)
}

fn mean(points: &[Vec<f64>]) -> Vec<f64> {
    let d = points[0].len();
    let n = points.len() as f64;
    (0..d).map(|j| exact_sum(points.iter().map(|p| p[j])) / n).collect()
}

/// Inserts the mean embedding of every class in `data` under `adapter`.
///
/// Means use a correctly rounded sum, so a prototype depends only on the multiset of
/// embeddings (duplicating every instance leaves it bit-for-bit unchanged).
pub fn extract_prototypes(
    data: &TaskData,
    backbone: &FrozenBackbone,
    adapter: &AdapterSet,
    bank: &mut PrototypeBank,
) -> Result<()> {
    for (class, points) in embeddings_by_class(data, backbone, adapter)? {
        bank.insert(adapter.task_index, class, mean(&points));
    }
    Ok(())
}

/// Mean, biased covariance and instance count of one class's embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGaussian {
    pub mean: Vec<f64>,
    pub covariance: Matrix,
    pub count: usize,
}

impl ClassGaussian {
    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(MosError::InvalidInput("statistics of an empty class".into()));
        };
        let d = first.len();
        if points.iter().any(|p| p.len() != d) {
            return Err(MosError::dims("class embeddings differ in length"));
        }
        let mu = mean(points);
        let k = points.len() as f64;
        let mut cov = Matrix::zeros(d, d);
        let centered: Vec<Vec<f64>> = points
            .iter()
            .map(|p| p.iter().zip(&mu).map(|(a, m)| a - m).collect())
            .collect();
        for i in 0..d {
            for j in i..d {
                let s: f64 = centered.iter().map(|c| c[i] * c[j]).sum::<f64>() / k;
                cov[(i, j)] = s;
                cov[(j, i)] = s;
            }
        }
        Ok(ClassGaussian {
            mean: mu,
            covariance: cov,
            count: points.len(),
        })
    }
}

/// Gaussian statistics for every class seen so far, keyed by class label.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianStats {
    pub classes: BTreeMap<usize, ClassGaussian>,
}

impl GaussianStats {
    pub fn get(&self, class: usize) -> Option<&ClassGaussian> {
        self.classes.get(&class)
    }

    pub fn merge(&mut self, other: GaussianStats) {
        self.classes.extend(other.classes);
    }

    /// MOS1 layout: header `[classes, d, (label, count)…]`, payload per class
    /// `mean (d)` then `covariance (d×d)`.
    pub fn to_container(&self) -> Container {
        let d = self.classes.values().next().map_or(0, |g| g.mean.len());
        let mut header = vec![self.classes.len() as u32, d as u32];
        let mut payload = Vec::new();
        for (&c, g) in &self.classes {
            header.push(c as u32);
            header.push(g.count as u32);
            payload.extend(g.mean.iter().map(|&v| v as f32));
            payload.extend(g.covariance.as_slice().iter().map(|&v| v as f32));
        }
        Container {
            kind: PayloadKind::GaussianStats,
            header,
            payload,
        }
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        c.expect_kind(PayloadKind::GaussianStats, path)?;
        let [n, d] = c.header_array::<2>(path)?;
        let (n, d) = (n as usize, d as usize);
        if c.header.len() != 2 + 2 * n || c.payload.len() != n * (d + d * d) {
            return Err(MosError::format(path, "gaussian stats sizes disagree with header"));
        }
        let mut classes = BTreeMap::new();
        for (i, chunk) in c.payload.chunks_exact(d + d * d).enumerate() {
            let mean = chunk[..d].iter().map(|&v| f64::from(v)).collect();
            let covariance = Matrix::from_vec(d, d, chunk[d..].iter().map(|&v| f64::from(v)).collect())?;
            classes.insert(
                c.header[2 + 2 * i] as usize,
                ClassGaussian {
                    mean,
                    covariance,
                    count: c.header[3 + 2 * i] as usize,
                },
            );
        }
        Ok(GaussianStats { classes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?, path)
    }
}

/// Per-class embedding statistics of `data` under `adapter`.
pub fn compute_gaussian_stats(data: &TaskData, backbone: &FrozenBackbone, adapter: &AdapterSet) -> Result<GaussianStats> {
    let mut classes = BTreeMap::new();
    for (class, points) in embeddings_by_class(data, backbone, adapter)? {
        classes.insert(class, ClassGaussian::from_points(&points)?);
    }
    Ok(GaussianStats { classes })
}
