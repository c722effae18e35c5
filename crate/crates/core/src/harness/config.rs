use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{MosError, Result};
use crate::stream::{DataFormat, StreamSpec, SyntheticSpec};
use crate::training::TrainConfig;

/// Environment variable that replaces `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "MOS_OUT";

fn default_output_dir() -> PathBuf {
    PathBuf::from("mos_out")
}

/// Where the instances come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        dim: usize,
        per_class: usize,
        separation: f64,
        noise: f64,
    },
    Files {
        format: DataFormat,
        train: PathBuf,
        test: PathBuf,
    },
}

impl DatasetSource {
    pub fn synthetic(spec: &SyntheticSpec) -> Self {
        DatasetSource::Synthetic {
            dim: spec.dim,
            per_class: spec.per_class,
            separation: spec.separation,
            noise: spec.noise,
        }
    }
}

/// Pipeline switches. All default to off.
///
/// `use_retrieval` picks the second adapter by a single task prediction from the first;
/// with every flag off only the first adapter is used.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantFlags {
    #[serde(default)]
    pub use_merge: bool,
    #[serde(default)]
    pub use_retrieval: bool,
    #[serde(default)]
    pub use_self_refine: bool,
    #[serde(default)]
    pub use_ensemble: bool,
    #[serde(default)]
    pub use_alignment: bool,
    /// Use the true task of every test instance; retrieval is skipped.
    #[serde(default)]
    pub oracle_task_ids: bool,
}

impl VariantFlags {
    /// Every component on.
    pub fn full() -> Self {
        VariantFlags {
            use_merge: true,
            use_retrieval: true,
            use_self_refine: true,
            use_ensemble: true,
            use_alignment: false,
            oracle_task_ids: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub stream: StreamSpec,
    pub dataset: DatasetSource,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub variant: VariantFlags,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Drives data generation and training. `train.seed` is mixed into it.
    #[serde(default)]
    pub seed: u64,
    /// Evaluate only after the last task.
    #[serde(default)]
    pub final_stage_only: bool,
}

impl ExperimentConfig {
    /// The 10-task, 5-classes-per-task synthetic benchmark.
    pub fn standard_benchmark(seed: u64) -> Self {
        ExperimentConfig {
            stream: StreamSpec::new(50, 0, 5),
            dataset: DatasetSource::Synthetic {
                dim: 32,
                per_class: 60,
                separation: 10.0,
                noise: 1.0,
            },
            backbone: BackboneConfig {
                init_seed: 7,
                init_scale: 0.2,
                ..BackboneConfig::new(32, 32, 64, 2)
            },
            train: TrainConfig::default(),
            variant: VariantFlags::full(),
            output_dir: default_output_dir(),
            seed,
            final_stage_only: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Reads and validates a config file. A missing or unreadable file is a config error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MosError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.task_sizes()?;
        self.backbone.validate()?;
        self.train.validate()?;
        match &self.dataset {
            DatasetSource::Synthetic {
                dim,
                per_class,
                separation,
                noise,
            } => {
                if *dim != self.backbone.input_dim {
                    return Err(MosError::Config(format!(
                        "synthetic dim {dim} differs from backbone input_dim {}",
                        self.backbone.input_dim
                    )));
                }
                if *per_class < 2 || !(*separation > 0.0) || !(*noise >= 0.0) {
                    return Err(MosError::Config(
                        "synthetic data needs per_class ≥ 2, separation > 0 and noise ≥ 0".into(),
                    ));
                }
            }
            DatasetSource::Files { .. } => {}
        }
        Ok(())
    }

    /// Applies the command-line seed and the `MOS_OUT` override.
    pub fn with_overrides(mut self, seed: Option<u64>, output_dir: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(dir) = output_dir {
            self.output_dir = dir;
        }
        self
    }

    pub fn alignment_enabled(&self) -> bool {
        self.variant.use_alignment || self.train.align_classifier
    }
}

/// `MOS_OUT` if set and non-empty.
pub fn output_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(OUTPUT_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}
