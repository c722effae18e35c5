#![allow(dead_code)]

use mos_core::inference::{AdapterEmbedder, ClassTaskMap};
use mos_core::numerics::Rng;
use mos_core::training::PrototypeBank;
use mos_core::Result;

/// Embeddings looked up by `(instance, adapter)`; the instance id is `x[0]`.
pub struct Table {
    pub rows: Vec<Vec<Vec<f64>>>,
    pub adapters: usize,
}

impl AdapterEmbedder for Table {
    fn num_adapters(&self) -> usize {
        self.adapters
    }
    fn embed(&self, x: &[f64], adapter: usize) -> Result<Vec<f64>> {
        Ok(self.rows[x[0] as usize][adapter].clone())
    }
}

pub fn one_hot(n: usize, i: usize) -> Vec<f64> {
    (0..n).map(|k| if k == i { 1.0 } else { 0.0 }).collect()
}

pub fn gaussian_vec(rng: &mut Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.standard_normal()).collect()
}

/// A random stage: `b` tasks of 1 to 4 classes, a full prototype bank and `queries`
/// table rows, all in dimension `d`.
pub struct RandomStage {
    pub map: ClassTaskMap,
    pub bank: PrototypeBank,
    pub table: Table,
}

pub fn random_stage(rng: &mut Rng, b: usize, d: usize, queries: usize) -> RandomStage {
    let sizes: Vec<usize> = (0..b).map(|_| 1 + rng.below(4)).collect();
    let map = ClassTaskMap::from_task_sizes(&sizes);
    let mut bank = PrototypeBank::new();
    for a in 0..b {
        for c in 0..map.num_classes() {
            bank.insert(a, c, gaussian_vec(rng, d));
        }
    }
    let rows = (0..queries)
        .map(|_| (0..b).map(|_| gaussian_vec(rng, d)).collect())
        .collect();
    RandomStage {
        map,
        bank,
        table: Table { rows, adapters: b },
    }
}

/// Cosine nearest-class-mean by direct formula, ties to the lowest class.
pub fn brute_force_ncm(e: &[f64], prototypes: &[&[f64]]) -> usize {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut best = (f64::NEG_INFINITY, 0);
    for (c, p) in prototypes.iter().enumerate() {
        let mut dot = 0.0;
        for k in 0..e.len() {
            dot += e[k] * p[k];
        }
        let s = dot / (norm(e) * norm(p));
        if s > best.0 {
            best = (s, c);
        }
    }
    best.1
}
