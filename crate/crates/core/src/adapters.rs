//! Adapter lifecycle: creation, merging with frozen predecessors, and the registry
//! of frozen per-task adapters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{AdapterBlock, AdapterSet};
use crate::error::{MosError, Result};
use crate::numerics::{Matrix, Rng};

/// Half-width of the uniform distribution used for fresh `W_down` entries.
pub const DOWN_INIT_SCALE: f64 = 0.02;

/// Fresh adapter: `W_down ~ U[-0.02, 0.02]`, `W_up = 0`, so the adapter starts as a no-op.
pub fn init_adapter(
    task_index: usize,
    num_blocks: usize,
    embed_dim: usize,
    bottleneck: usize,
    rng: &mut Rng,
) -> Result<AdapterSet> {
    if bottleneck == 0 {
        return Err(MosError::Config("adapter bottleneck r must be at least 1".into()));
    }
    let blocks = (0..num_blocks)
        .map(|_| AdapterBlock {
            down: Matrix::from_fn(embed_dim, bottleneck, |_, _| {
                rng.uniform_range(-DOWN_INIT_SCALE, DOWN_INIT_SCALE)
            }),
            up: Matrix::zeros(bottleneck, embed_dim),
        })
        .collect();
    Ok(AdapterSet { task_index, blocks })
}

/// `(1 - α)·current + (α / (b-1))·Σ history`, element-wise over every `W_down` and `W_up`.
///
/// `history` holds the `b-1` frozen adapters of earlier tasks. The predecessors are
/// averaged uniformly. The result keeps `current.task_index`.
pub fn ema_merge(current: &AdapterSet, history: &[AdapterSet], alpha: f64) -> Result<AdapterSet> {
    let mut out = current.clone();
    ema_merge_in_place(&mut out, history, alpha)?;
    Ok(out)
}

/// In-place form of [`ema_merge`], used after every optimizer step.
pub fn ema_merge_in_place(current: &mut AdapterSet, history: &[AdapterSet], alpha: f64) -> Result<()> {
    if history.is_empty() {
        return Err(MosError::InvalidInput(
            "adapter merge needs at least one frozen predecessor".into(),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(MosError::Config(format!("merge factor {alpha} outside [0, 1]")));
    }
    if let Some(bad) = history.iter().find(|h| !h.same_shape(current)) {
        return Err(MosError::dims(format!(
            "adapter {} differs in shape from the adapter being merged",
            bad.task_index
        )));
    }
    let keep = 1.0 - alpha;
    let share = alpha / history.len() as f64;
    for (l, block) in current.blocks.iter_mut().enumerate() {
        merge_matrix(&mut block.down, history.iter().map(|h| &h.blocks[l].down), keep, share);
        merge_matrix(&mut block.up, history.iter().map(|h| &h.blocks[l].up), keep, share);
    }
    Ok(())
}

fn merge_matrix<'a>(dst: &mut Matrix, history: impl Iterator<Item = &'a Matrix> + Clone, keep: f64, share: f64) {
    for (i, v) in dst.as_mut_slice().iter_mut().enumerate() {
        let sum: f64 = history.clone().map(|m| m.as_slice()[i]).sum();
        *v = keep * *v + share * sum;
    }
}

#[derive(Debug, Clone)]
struct FrozenEntry {
    adapter: AdapterSet,
    checksum: String,
}

/// Frozen adapters `𝒜_1 … 𝒜_{b-1}` in task order, plus the merge factor.
///
/// Task indices are zero-based: the adapter of the first task has index 0 and the
/// next registered adapter must carry index `len()`.
#[derive(Debug, Clone)]
pub struct AdapterRegistry {
    alpha: f64,
    history: Vec<FrozenEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryIndex {
    pub alpha: f64,
    pub bottleneck: usize,
    pub adapters: Vec<RegistryIndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryIndexEntry {
    pub task_index: usize,
    pub file: String,
    pub checksum: String,
    pub bytes: usize,
}

impl AdapterRegistry {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(MosError::Config(format!("merge factor {alpha} outside [0, 1]")));
        }
        Ok(AdapterRegistry {
            alpha,
            history: Vec::new(),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn get(&self, task_index: usize) -> Option<&AdapterSet> {
        self.history.get(task_index).map(|e| &e.adapter)
    }

    pub fn adapters(&self) -> impl Iterator<Item = &AdapterSet> + '_ {
        self.history.iter().map(|e| &e.adapter)
    }

    /// Snapshot of the frozen adapters, used as the merge operand.
    pub fn history(&self) -> Vec<AdapterSet> {
        self.adapters().cloned().collect()
    }

    pub fn freeze_and_register(&mut self, adapter: AdapterSet) -> Result<()> {
        if adapter.task_index != self.history.len() {
            return Err(MosError::Registry(format!(
                "expected task index {}, got {}",
                self.history.len(),
                adapter.task_index
            )));
        }
        if let Some(first) = self.history.first() {
            if !first.adapter.same_shape(&adapter) {
                return Err(MosError::dims("registered adapters must share one shape"));
            }
        }
        if !adapter.is_finite() {
            return Err(MosError::Registry("refusing to freeze non-finite adapter".into()));
        }
        let checksum = adapter.checksum();
        self.history.push(FrozenEntry { adapter, checksum });
        Ok(())
    }

    pub fn checksums(&self) -> Vec<String> {
        self.history.iter().map(|e| e.checksum.clone()).collect()
    }

    /// Recomputes every frozen adapter's digest and compares it with the one taken at
    /// registration.
    pub fn audit(&self) -> Result<()> {
        for e in &self.history {
            if e.adapter.checksum() != e.checksum {
                return Err(MosError::Registry(format!(
                    "frozen adapter {} changed after registration",
                    e.adapter.task_index
                )));
            }
        }
        Ok(())
    }

    /// Writes `adapter_<t>.mos` per task plus `registry.json` into `dir`.
    /// Returns the total number of adapter bytes written (excluding JSON).
    pub fn save(&self, dir: &Path) -> Result<usize> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.history.len());
        let mut total = 0;
        for e in &self.history {
            let file = format!("adapter_{}.mos", e.adapter.task_index);
            let container = e.adapter.to_container();
            container.write(&dir.join(&file))?;
            total += container.byte_len();
            entries.push(RegistryIndexEntry {
                task_index: e.adapter.task_index,
                file,
                checksum: e.checksum.clone(),
                bytes: container.byte_len(),
            });
        }
        let index = RegistryIndex {
            alpha: self.alpha,
            bottleneck: self.history.first().map_or(0, |e| e.adapter.bottleneck()),
            adapters: entries,
        };
        let mut json = serde_json::to_string_pretty(&index)?;
        json.push('\n');
        fs::write(dir.join("registry.json"), json)?;
        Ok(total)
    }

    /// Reads a registry written by [`AdapterRegistry::save`]. Adapters come back at
    /// `f32` precision, so their checksums are recomputed rather than trusted.
    pub fn load(dir: &Path) -> Result<Self> {
        let index: RegistryIndex = serde_json::from_str(&fs::read_to_string(dir.join("registry.json"))?)?;
        let mut reg = AdapterRegistry::new(index.alpha)?;
        for entry in &index.adapters {
            let adapter = AdapterSet::load(&dir.join(&entry.file))?;
            if adapter.task_index != entry.task_index {
                return Err(MosError::format(dir.join(&entry.file), "task index disagrees with registry.json"));
            }
            reg.freeze_and_register(adapter)?;
        }
        Ok(reg)
    }
}
