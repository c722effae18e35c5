//! Frozen feature extractor with a bottleneck adapter beside each block's MLP.
//!
//! Block `ℓ` maps its input `x` to
//!
//! ```text
//! MLP(x) + ReLU(x · W_down) · W_up  [+ x when the identity residual is on]
//! MLP(x) = ReLU(x · W_in + b_in) · W_out + b_out
//! ```
//!
//! Only the adapters and the task head ever receive gradients.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Container, PayloadKind};
use crate::error::{MosError, Result};
use crate::numerics::{Matrix, Rng};

fn default_true() -> bool {
    true
}

fn default_init_scale() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    #[serde(default = "default_true")]
    pub use_identity_residual: bool,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    /// Load weights from this MOS1 file instead of drawing them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl BackboneConfig {
    pub fn new(input_dim: usize, embed_dim: usize, hidden_dim: usize, num_blocks: usize) -> Self {
        BackboneConfig {
            input_dim,
            embed_dim,
            hidden_dim,
            num_blocks,
            use_identity_residual: true,
            init_seed: 0,
            init_scale: default_init_scale(),
            checkpoint: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden_dim == 0 || self.num_blocks == 0 {
            return Err(MosError::Config(
                "backbone dimensions and block count must be at least 1".into(),
            ));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(MosError::Config("init_scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct MlpBlock {
    w_in: Matrix,
    b_in: Vec<f64>,
    w_out: Matrix,
    b_out: Vec<f64>,
}

/// The stand-in pretrained model. Weights are fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone {
    config: BackboneConfig,
    embed: Matrix,
    embed_bias: Vec<f64>,
    blocks: Vec<MlpBlock>,
}

/// One block's adapter: `W_down` is `d×r`, `W_up` is `r×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBlock {
    pub down: Matrix,
    pub up: Matrix,
}

/// Task-specific adapters for every block of the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub task_index: usize,
    pub blocks: Vec<AdapterBlock>,
}

impl AdapterSet {
    pub fn zeros(task_index: usize, num_blocks: usize, embed_dim: usize, bottleneck: usize) -> Self {
        AdapterSet {
            task_index,
            blocks: (0..num_blocks)
                .map(|_| AdapterBlock {
                    down: Matrix::zeros(embed_dim, bottleneck),
                    up: Matrix::zeros(bottleneck, embed_dim),
                })
                .collect(),
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.down.rows())
    }

    pub fn bottleneck(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.down.cols())
    }

    /// Number of stored weights, `L · 2dr`.
    pub fn parameter_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.down.as_slice().len() + b.up.as_slice().len())
            .sum()
    }

    /// All weights in storage order: per block, `W_down` then `W_up`, row-major.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.blocks
            .iter()
            .flat_map(|b| b.down.as_slice().iter().chain(b.up.as_slice()).copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.down.as_mut_slice().iter_mut().chain(b.up.as_mut_slice().iter_mut()))
    }

    pub fn same_shape(&self, other: &AdapterSet) -> bool {
        self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.down.shape() == b.down.shape() && a.up.shape() == b.up.shape())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    pub fn checksum(&self) -> String {
        checkpoint::digest(self.values())
    }

    pub fn to_container(&self) -> Container {
        Container {
            kind: PayloadKind::Adapter,
            header: vec![
                self.task_index as u32,
                self.num_blocks() as u32,
                self.embed_dim() as u32,
                self.bottleneck() as u32,
            ],
            payload: self.values().map(|v| v as f32).collect(),
        }
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        c.expect_kind(PayloadKind::Adapter, path)?;
        let [task, blocks, d, r] = c.header_array::<4>(path)?;
        let (blocks, d, r) = (blocks as usize, d as usize, r as usize);
        if c.payload.len() != blocks * 2 * d * r {
            return Err(MosError::format(path, "adapter payload length disagrees with header"));
        }
        let mut set = AdapterSet::zeros(task as usize, blocks, d, r);
        for (dst, src) in set.values_mut().zip(&c.payload) {
            *dst = f64::from(*src);
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?, path)
    }
}

/// Linear head over one task's classes; its columns follow `classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    pub weights: Matrix,
    pub classes: Vec<usize>,
}

impl TaskHead {
    pub fn new(weights: Matrix, classes: Vec<usize>) -> Result<Self> {
        if weights.cols() != classes.len() {
            return Err(MosError::dims(format!(
                "head has {} columns for {} classes",
                weights.cols(),
                classes.len()
            )));
        }
        Ok(TaskHead { weights, classes })
    }

    pub fn zeros(embed_dim: usize, classes: Vec<usize>) -> Self {
        TaskHead {
            weights: Matrix::zeros(embed_dim, classes.len()),
            classes,
        }
    }

    pub fn column_of(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }
}

/// Gradients of the loss with respect to every trainable value.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub adapter: AdapterSet,
    pub head: Matrix,
}

/// Intermediate values of one forward pass, enough to run the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    block_inputs: Vec<Vec<f64>>,
    mlp_pre: Vec<Vec<f64>>,
    adapter_pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Sign pattern of every ReLU input (true when active). Two passes with the
    /// same pattern lie on the same linear piece of the network.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.mlp_pre
            .iter()
            .chain(&self.adapter_pre)
            .flat_map(|v| v.iter().map(|&z| z > 0.0))
            .collect()
    }
}

fn relu(v: &mut [f64]) {
    v.iter_mut().for_each(|z| *z = z.max(0.0));
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

impl FrozenBackbone {
    /// Draws every weight i.i.d. uniform in `[-init_scale, init_scale]` from
    /// `Rng::new(init_seed)`, rounded to `f32` so checkpoints reproduce it bit for bit.
    /// When `config.checkpoint` is set the weights are loaded from it instead.
    pub fn build(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        if let Some(path) = &config.checkpoint {
            return Self::load(path, Some(config));
        }
        let mut rng = Rng::new(config.init_seed);
        let s = config.init_scale;
        let mut draw = |rows: usize, cols: usize| {
            Matrix::from_fn(rows, cols, |_, _| f64::from(rng.uniform_range(-s, s) as f32))
        };
        let (dim_in, d, h) = (config.input_dim, config.embed_dim, config.hidden_dim);
        let embed = draw(dim_in, d);
        let embed_bias = draw(1, d).into_vec();
        let blocks = (0..config.num_blocks)
            .map(|_| {
                let w_in = draw(d, h);
                let b_in = draw(1, h).into_vec();
                let w_out = draw(h, d);
                let b_out = draw(1, d).into_vec();
                MlpBlock { w_in, b_in, w_out, b_out }
            })
            .collect();
        Ok(FrozenBackbone {
            config: config.clone(),
            embed,
            embed_bias,
            blocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn num_blocks(&self) -> usize {
        self.config.num_blocks
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.embed
            .as_slice()
            .iter()
            .chain(&self.embed_bias)
            .chain(self.blocks.iter().flat_map(|b| {
                b.w_in
                    .as_slice()
                    .iter()
                    .chain(&b.b_in)
                    .chain(b.w_out.as_slice())
                    .chain(&b.b_out)
            }))
            .copied()
    }

    pub fn checksum(&self) -> String {
        checkpoint::digest(self.values())
    }

    fn check_adapters(&self, adapters: &AdapterSet) -> Result<()> {
        if adapters.num_blocks() != self.num_blocks() || adapters.embed_dim() != self.embed_dim() {
            return Err(MosError::dims(format!(
                "adapter set with {} blocks of width {} on a backbone with {} blocks of width {}",
                adapters.num_blocks(),
                adapters.embed_dim(),
                self.num_blocks(),
                self.embed_dim()
            )));
        }
        if adapters.blocks.iter().any(|b| b.up.shape() != (b.down.cols(), b.down.rows())) {
            return Err(MosError::dims("adapter W_up is not r×d"));
        }
        Ok(())
    }

    fn run(&self, x: &[f64], adapters: Option<&AdapterSet>) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(MosError::dims(format!(
                "input of length {} for backbone input dim {}",
                x.len(),
                self.input_dim()
            )));
        }
        if let Some(a) = adapters {
            self.check_adapters(a)?;
        }
        let mut h = self.embed.vec_mul(x)?;
        add_into(&mut h, &self.embed_bias);

        let n = self.blocks.len();
        let mut trace = ForwardTrace {
            block_inputs: Vec::with_capacity(n),
            mlp_pre: Vec::with_capacity(n),
            adapter_pre: Vec::with_capacity(n),
            output: Vec::new(),
        };
        for (l, block) in self.blocks.iter().enumerate() {
            let mut pre = block.w_in.vec_mul(&h)?;
            add_into(&mut pre, &block.b_in);
            let mut act = pre.clone();
            relu(&mut act);
            let mut out = block.w_out.vec_mul(&act)?;
            add_into(&mut out, &block.b_out);

            let adapter_pre = match adapters {
                Some(a) => {
                    let ab = &a.blocks[l];
                    let z = ab.down.vec_mul(&h)?;
                    let mut za = z.clone();
                    relu(&mut za);
                    add_into(&mut out, &ab.up.vec_mul(&za)?);
                    z
                }
                None => Vec::new(),
            };
            if self.config.use_identity_residual {
                add_into(&mut out, &h);
            }
            trace.block_inputs.push(h);
            trace.mlp_pre.push(pre);
            trace.adapter_pre.push(adapter_pre);
            h = out;
        }
        trace.output = h;
        Ok(trace)
    }

    /// Embedding `φ(x; adapters)`.
    pub fn forward(&self, x: &[f64], adapters: &AdapterSet) -> Result<Vec<f64>> {
        Ok(self.run(x, Some(adapters))?.output)
    }

    /// Embedding of the bare pretrained path, with no adapter branch at all.
    pub fn forward_frozen(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.run(x, None)?.output)
    }

    pub fn forward_trace(&self, x: &[f64], adapters: &AdapterSet) -> Result<ForwardTrace> {
        self.run(x, Some(adapters))
    }

    /// `Wᵀ φ(x; adapters)`.
    pub fn forward_logits(&self, x: &[f64], adapters: &AdapterSet, head: &TaskHead) -> Result<Vec<f64>> {
        if head.weights.rows() != self.embed_dim() {
            return Err(MosError::dims(format!(
                "head input dim {} for embedding dim {}",
                head.weights.rows(),
                self.embed_dim()
            )));
        }
        let emb = self.forward(x, adapters)?;
        head.weights.vec_mul(&emb)
    }

    /// Mean softmax cross-entropy over the batch and its exact gradient with respect
    /// to the adapters and the head. Labels are global class ids covered by `head`.
    pub fn backward(
        &self,
        inputs: &[&[f64]],
        labels: &[usize],
        adapters: &AdapterSet,
        head: &TaskHead,
    ) -> Result<(f64, Gradients)> {
        if inputs.is_empty() {
            return Err(MosError::InvalidInput("backward on an empty batch".into()));
        }
        if inputs.len() != labels.len() {
            return Err(MosError::dims("inputs and labels differ in length"));
        }
        if head.weights.rows() != self.embed_dim() {
            return Err(MosError::dims("head input dim differs from embedding dim"));
        }
        let k = head.classes.len();
        let mut grads = Gradients {
            adapter: AdapterSet::zeros(
                adapters.task_index,
                adapters.num_blocks(),
                adapters.embed_dim(),
                adapters.bottleneck(),
            ),
            head: Matrix::zeros(self.embed_dim(), k),
        };
        let scale = 1.0 / inputs.len() as f64;
        let mut loss = 0.0;

        for (x, &label) in inputs.iter().zip(labels) {
            let col = head.column_of(label).ok_or_else(|| {
                MosError::InvalidInput(format!("label {label} is not covered by the task head"))
            })?;
            let trace = self.run(x, Some(adapters))?;
            let emb = &trace.output;
            let logits = head.weights.vec_mul(emb)?;

            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            loss += (total.ln() + max - logits[col]) * scale;

            // dL/dlogits = softmax - onehot
            let mut delta: Vec<f64> = exps.iter().map(|e| e / total).collect();
            delta[col] -= 1.0;
            delta.iter_mut().for_each(|v| *v *= scale);

            grads.head.add_outer(emb, &delta, 1.0);
            let mut g = head.weights.mul_vec(&delta)?;

            for l in (0..self.blocks.len()).rev() {
                let block = &self.blocks[l];
                let ab = &adapters.blocks[l];
                let gb = &mut grads.adapter.blocks[l];
                let x_in = &trace.block_inputs[l];
                let a_pre = &trace.adapter_pre[l];
                let m_pre = &trace.mlp_pre[l];

                // adapter branch
                let a_act: Vec<f64> = a_pre.iter().map(|z| z.max(0.0)).collect();
                gb.up.add_outer(&a_act, &g, 1.0);
                let mut g_a = ab.up.mul_vec(&g)?;
                for (ga, z) in g_a.iter_mut().zip(a_pre) {
                    if *z <= 0.0 {
                        *ga = 0.0;
                    }
                }
                gb.down.add_outer(x_in, &g_a, 1.0);

                // frozen MLP branch transmits gradient only
                let mut g_m = block.w_out.mul_vec(&g)?;
                for (gm, z) in g_m.iter_mut().zip(m_pre) {
                    if *z <= 0.0 {
                        *gm = 0.0;
                    }
                }
                let mut g_in = block.w_in.mul_vec(&g_m)?;
                add_into(&mut g_in, &ab.down.mul_vec(&g_a)?);
                if self.config.use_identity_residual {
                    add_into(&mut g_in, &g);
                }
                g = g_in;
            }
        }
        Ok((loss, grads))
    }

    pub fn to_container(&self) -> Container {
        let c = &self.config;
        Container {
            kind: PayloadKind::Backbone,
            header: vec![
                c.input_dim as u32,
                c.embed_dim as u32,
                c.hidden_dim as u32,
                c.num_blocks as u32,
                u32::from(c.use_identity_residual),
            ],
            payload: self.values().map(|v| v as f32).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    /// Loads weights written by [`FrozenBackbone::save`]. When `expected` is given its
    /// dimensions must agree with the file.
    pub fn load(path: &Path, expected: Option<&BackboneConfig>) -> Result<Self> {
        let c = Container::read(path)?;
        c.expect_kind(PayloadKind::Backbone, path)?;
        let [dim_in, d, h, blocks, residual] = c.header_array::<5>(path)?;
        let mut config = BackboneConfig::new(dim_in as usize, d as usize, h as usize, blocks as usize);
        config.use_identity_residual = residual != 0;
        if let Some(want) = expected {
            if (want.input_dim, want.embed_dim, want.hidden_dim, want.num_blocks, want.use_identity_residual)
                != (
                    config.input_dim,
                    config.embed_dim,
                    config.hidden_dim,
                    config.num_blocks,
                    config.use_identity_residual,
                )
            {
                return Err(MosError::dims(format!(
                    "checkpoint {} does not match the configured backbone",
                    path.display()
                )));
            }
            config.init_seed = want.init_seed;
            config.init_scale = want.init_scale;
            config.checkpoint = want.checkpoint.clone();
        }
        config.validate()?;
        let (dim_in, d, h) = (config.input_dim, config.embed_dim, config.hidden_dim);
        let expected_len = dim_in * d + d + config.num_blocks * (d * h + h + h * d + d);
        if c.payload.len() != expected_len {
            return Err(MosError::format(path, "backbone payload length disagrees with header"));
        }
        let mut values = c.payload.iter().map(|v| f64::from(*v));
        let mut take = |rows: usize, cols: usize| {
            Matrix::from_fn(rows, cols, |_, _| values.next().unwrap_or(0.0))
        };
        let embed = take(dim_in, d);
        let embed_bias = take(1, d).into_vec();
        let blocks = (0..config.num_blocks)
            .map(|_| {
                let w_in = take(d, h);
                let b_in = take(1, h).into_vec();
                let w_out = take(h, d);
                let b_out = take(1, d).into_vec();
                MlpBlock { w_in, b_in, w_out, b_out }
            })
            .collect();
        Ok(FrozenBackbone {
            config,
            embed,
            embed_bias,
            blocks,
        })
    }

    #[cfg(test)]
    pub(crate) fn from_parts_for_test(
        config: BackboneConfig,
        embed: Matrix,
        embed_bias: Vec<f64>,
        mlp: Vec<(Matrix, Vec<f64>, Matrix, Vec<f64>)>,
    ) -> Self {
        FrozenBackbone {
            config,
            embed,
            embed_bias,
            blocks: mlp
                .into_iter()
                .map(|(w_in, b_in, w_out, b_out)| MlpBlock { w_in, b_in, w_out, b_out })
                .collect(),
        }
    }
}
