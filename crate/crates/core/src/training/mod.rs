//! Per-task optimization of adapters and a task-local head, plus the statistics
//! extracted after each task (prototypes, Gaussian class statistics).

mod align;
mod prototypes;

use std::cell::Cell;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub use align::{align_classifier, extend_head};
pub use prototypes::{compute_gaussian_stats, extract_prototypes, ClassGaussian, GaussianStats, PrototypeBank};

use crate::adapters::{ema_merge_in_place, init_adapter, AdapterRegistry};
use crate::backbone::{AdapterSet, FrozenBackbone, TaskHead};
use crate::error::{MosError, Result};
use crate::numerics::{Matrix, Rng};
use crate::stream::Dataset;

/// Half-width of the uniform initialization of a fresh task head.
pub const HEAD_INIT_SCALE: f64 = 0.02;

fn d_epochs() -> usize {
    20
}
fn d_batch() -> usize {
    48
}
fn d_lr0() -> f64 {
    0.01
}
fn d_momentum() -> f64 {
    0.9
}
fn d_alpha() -> f64 {
    0.1
}
fn d_r() -> usize {
    16
}
fn d_multiplier() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr0")]
    pub lr0: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    /// Merge factor α.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Adapter bottleneck width.
    #[serde(default = "d_r")]
    pub r: usize,
    #[serde(default)]
    pub align_classifier: bool,
    #[serde(default = "d_multiplier")]
    pub align_multiplier: usize,
    #[serde(default)]
    pub seed: u64,
    /// Merge once per epoch instead of after every optimizer step.
    #[serde(default)]
    pub merge_per_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: d_epochs(),
            batch_size: d_batch(),
            lr0: d_lr0(),
            momentum: d_momentum(),
            alpha: d_alpha(),
            r: d_r(),
            align_classifier: false,
            align_multiplier: d_multiplier(),
            seed: 0,
            merge_per_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(MosError::Config(m.to_string()));
        if self.epochs < 1 {
            return fail("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail("lr0 must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail("alpha must lie in [0, 1]");
        }
        if self.r < 1 {
            return fail("adapter bottleneck r must be at least 1");
        }
        if self.align_classifier && self.align_multiplier < 1 {
            return fail("align_multiplier must be at least 1");
        }
        Ok(())
    }
}

/// Half-cosine decay from `lr0` at step 0 to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    let total = total_steps.max(1);
    let t = step.min(total) as f64 / total as f64;
    0.5 * lr0 * (1.0 + (PI * t).cos())
}

/// Heavy-ball SGD over a flat parameter vector: `v ← μv − lr·g; θ ← θ + v`.
#[derive(Debug, Clone)]
pub struct MomentumSgd {
    momentum: f64,
    velocity: Vec<f64>,
}

impl MomentumSgd {
    pub fn new(momentum: f64, len: usize) -> Self {
        MomentumSgd {
            momentum,
            velocity: vec![0.0; len],
        }
    }

    pub fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut f64>, grads: impl Iterator<Item = f64>, lr: f64) {
        for ((p, g), v) in params.zip(grads).zip(self.velocity.iter_mut()) {
            *v = self.momentum * *v - lr * g;
            *p += *v;
        }
    }
}

/// One task's training split, with a counter of how often training code read it.
#[derive(Debug)]
pub struct TaskData {
    pub task: usize,
    /// Classes of this task (`Y_b`), in label order.
    pub classes: Vec<usize>,
    pub data: Dataset,
    reads: Cell<u64>,
}

impl TaskData {
    pub fn new(task: usize, classes: Vec<usize>, data: Dataset) -> Result<Self> {
        if let Some(bad) = data.labels.iter().find(|l| !classes.contains(l)) {
            return Err(MosError::InvalidInput(format!(
                "label {bad} is not one of task {task}'s classes"
            )));
        }
        Ok(TaskData {
            task,
            classes,
            data,
            reads: Cell::new(0),
        })
    }

    /// Records a pass over the data and hands it out.
    pub fn read(&self) -> &Dataset {
        self.reads.set(self.reads.get() + 1);
        &self.data
    }

    pub fn reads(&self) -> u64 {
        self.reads.get()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The adapter as registered (after the final merge).
    pub adapter: AdapterSet,
    /// Task-local head; not used for inference.
    pub head: TaskHead,
    pub trace: Vec<LossRecord>,
}

impl TrainOutcome {
    /// Mean loss of each epoch, in order.
    pub fn epoch_losses(&self) -> Vec<f64> {
        epoch_means(&self.trace)
    }
}

pub fn epoch_means(trace: &[LossRecord]) -> Vec<f64> {
    let epochs = trace.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let losses: Vec<f64> = trace.iter().filter(|r| r.epoch == e).map(|r| r.loss).collect();
            losses.iter().sum::<f64>() / losses.len().max(1) as f64
        })
        .collect()
}

/// Predecessor adapters to merge into the one being trained.
#[derive(Debug, Clone, Copy)]
pub struct MergeWith<'a> {
    pub history: &'a [AdapterSet],
    pub alpha: f64,
    pub per_epoch: bool,
}

/// Optimizes `adapter` and `head` on `data` with momentum SGD and a per-step cosine
/// schedule, merging with `merge` predecessors after each step (or epoch).
pub fn fit(
    data: &TaskData,
    backbone: &FrozenBackbone,
    adapter: &mut AdapterSet,
    head: &mut TaskHead,
    config: &TrainConfig,
    merge: Option<MergeWith<'_>>,
    rng: &mut Rng,
) -> Result<Vec<LossRecord>> {
    config.validate()?;
    let n = data.data.len();
    if n == 0 {
        return Err(MosError::InvalidInput(format!("task {} has no training data", data.task)));
    }
    let merge = merge.filter(|m| !m.history.is_empty());
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let mut adapter_opt = MomentumSgd::new(config.momentum, adapter.parameter_count());
    let mut head_opt = MomentumSgd::new(config.momentum, head.weights.as_slice().len());
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(total_steps);

    let mut step = 0;
    for epoch in 0..config.epochs {
        let ds = data.read();
        rng.shuffle(&mut order);
        for batch in order.chunks(config.batch_size) {
            let inputs: Vec<&[f64]> = batch.iter().map(|&i| ds.features[i].as_slice()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| ds.labels[i]).collect();
            let (loss, grads) = backbone.backward(&inputs, &labels, adapter, head)?;
            let lr = cosine_lr(step, total_steps, config.lr0);
            adapter_opt.step(adapter.values_mut(), grads.adapter.values(), lr);
            head_opt.step(head.weights.as_mut_slice().iter_mut(), grads.head.as_slice().iter().copied(), lr);
            if let Some(m) = merge.filter(|m| !m.per_epoch) {
                ema_merge_in_place(adapter, m.history, m.alpha)?;
            }
            if !loss.is_finite() || !adapter.is_finite() {
                return Err(MosError::InvalidInput(format!(
                    "training diverged at step {step} (loss {loss})"
                )));
            }
            trace.push(LossRecord { step, epoch, lr, loss });
            step += 1;
        }
        if let Some(m) = merge.filter(|m| m.per_epoch) {
            ema_merge_in_place(adapter, m.history, m.alpha)?;
        }
    }
    Ok(trace)
}

fn init_head(embed_dim: usize, classes: Vec<usize>, rng: &mut Rng) -> TaskHead {
    let k = classes.len();
    TaskHead {
        weights: Matrix::from_fn(embed_dim, k, |_, _| rng.uniform_range(-HEAD_INIT_SCALE, HEAD_INIT_SCALE)),
        classes,
    }
}

/// Trains the adapter of the next task (index `registry.len()`) and registers it frozen.
///
/// With `use_merge`, every step is followed by a merge with all registered adapters;
/// the first task has no predecessors and is never merged.
pub fn train_task(
    data: &TaskData,
    backbone: &FrozenBackbone,
    registry: &mut AdapterRegistry,
    config: &TrainConfig,
    use_merge: bool,
) -> Result<TrainOutcome> {
    config.validate()?;
    let task = registry.len();
    if data.data.is_empty() {
        return Err(MosError::InvalidInput(format!("task {task} has no training data")));
    }
    let mut rng = Rng::new(Rng::derive_seed(config.seed, task as u64));
    let mut adapter = init_adapter(
        task,
        backbone.num_blocks(),
        backbone.embed_dim(),
        config.r,
        &mut rng,
    )?;
    let mut head = init_head(backbone.embed_dim(), data.classes.clone(), &mut rng);
    let history = registry.history();
    let merge = use_merge.then_some(MergeWith {
        history: &history,
        alpha: config.alpha,
        per_epoch: config.merge_per_epoch,
    });
    let trace = fit(data, backbone, &mut adapter, &mut head, config, merge, &mut rng)?;
    registry.freeze_and_register(adapter.clone())?;
    Ok(TrainOutcome { adapter, head, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::stream::Split;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.01), 0.01);
        assert!(cosine_lr(100, 100, 0.01).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.01) - 0.005).abs() < 1e-15);
        let lrs: Vec<f64> = (0..=100).map(|s| cosine_lr(s, 100, 0.01)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn momentum_zero_is_gradient_descent() {
        let mut params = vec![1.0, -2.0, 0.5];
        let grads = [0.3, -0.1, 2.0];
        let mut opt = MomentumSgd::new(0.0, 3);
        opt.step(params.iter_mut(), grads.iter().copied(), 0.1);
        let want: Vec<f64> = [1.0, -2.0, 0.5].iter().zip(grads).map(|(p, g)| p - 0.1 * g).collect();
        assert_eq!(params, want);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut p = vec![0.0];
        let mut opt = MomentumSgd::new(0.9, 1);
        opt.step(p.iter_mut(), [1.0].into_iter(), 0.1);
        opt.step(p.iter_mut(), [1.0].into_iter(), 0.1);
        // v1 = -0.1, v2 = -0.09 - 0.1
        assert!((p[0] - (-0.1 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { lr0: 0.0, ..Default::default() },
            TrainConfig { r: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(MosError::Config(_))));
        }
    }

    #[test]
    fn task_data_rejects_foreign_labels_and_counts_reads() {
        let ds = Dataset::new(vec![vec![0.0], vec![1.0]], vec![3, 4], Split::Train).unwrap();
        assert!(TaskData::new(0, vec![3], ds.clone()).is_err());
        let td = TaskData::new(0, vec![3, 4], ds).unwrap();
        assert_eq!(td.reads(), 0);
        td.read();
        td.read();
        assert_eq!(td.reads(), 2);
    }

    #[test]
    fn empty_task_is_rejected() {
        let bb = FrozenBackbone::build(&BackboneConfig::new(2, 2, 2, 1)).unwrap();
        let mut reg = AdapterRegistry::new(0.1).unwrap();
        let td = TaskData::new(0, vec![0], Dataset::new(vec![], vec![], Split::Train).unwrap()).unwrap();
        assert!(train_task(&td, &bb, &mut reg, &TrainConfig::default(), true).is_err());
        assert!(reg.is_empty());
    }
}
