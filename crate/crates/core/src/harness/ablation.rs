use serde::{Deserialize, Serialize};

use crate::error::{MosError, Result};
use crate::harness::config::{ExperimentConfig, VariantFlags};
use crate::harness::experiment::{run_naive_sequential, run_pipeline, EvalVariant};
use crate::harness::metrics::{average, MetricsReport};

pub const BASELINE: &str = "baseline";
pub const PLUS_MERGE: &str = "+merge";
pub const PLUS_SELF_REFINE: &str = "+self_refine";
pub const PLUS_ENSEMBLE: &str = "+ensemble";
pub const ORACLE: &str = "oracle";
pub const NAIVE: &str = "naive_sequential";

/// The ablation ladder in order, then the oracle-task bound.
///
/// Baseline uses only the first adapter. `+merge` trains with merging and picks the
/// second adapter by one task prediction; `+self_refine` iterates that prediction;
/// `+ensemble` adds the first adapter's logits. The oracle swaps retrieval for the
/// true task and keeps the ensemble.
pub fn ablation_variants(alignment: bool) -> Vec<EvalVariant> {
    let base = VariantFlags {
        use_alignment: alignment,
        ..Default::default()
    };
    let merge = VariantFlags {
        use_merge: true,
        use_retrieval: true,
        ..base
    };
    let refine = VariantFlags {
        use_self_refine: true,
        ..merge
    };
    let ensemble = VariantFlags {
        use_ensemble: true,
        ..refine
    };
    let oracle = VariantFlags {
        oracle_task_ids: true,
        ..ensemble
    };
    vec![
        EvalVariant::new(BASELINE, base),
        EvalVariant::new(PLUS_MERGE, merge),
        EvalVariant::new(PLUS_SELF_REFINE, refine),
        EvalVariant::new(PLUS_ENSEMBLE, ensemble),
        EvalVariant::new(ORACLE, oracle),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub last_accuracy: f64,
    pub average_accuracy: f64,
    pub last_retrieval_accuracy: f64,
    pub last_mean_iterations: f64,
}

impl AblationRow {
    fn from_report(r: &MetricsReport) -> Self {
        let last = r.stages.last().expect("validated report has stages");
        AblationRow {
            variant: r.variant.clone(),
            seed: r.seed,
            last_accuracy: r.last_accuracy,
            average_accuracy: r.average_accuracy,
            last_retrieval_accuracy: last.retrieval_accuracy,
            last_mean_iterations: last.mean_iterations,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AblationResult {
    pub reports: Vec<MetricsReport>,
}

impl AblationResult {
    pub fn rows(&self) -> Vec<AblationRow> {
        self.reports.iter().map(AblationRow::from_report).collect()
    }

    pub fn variants(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.reports {
            if !names.contains(&r.variant) {
                names.push(r.variant.clone());
            }
        }
        names
    }

    fn of(&self, variant: &str) -> Vec<&MetricsReport> {
        self.reports.iter().filter(|r| r.variant == variant).collect()
    }

    /// Mean `A_B` of `variant` over seeds.
    pub fn mean_last(&self, variant: &str) -> Option<f64> {
        let v: Vec<f64> = self.of(variant).iter().map(|r| r.last_accuracy).collect();
        (!v.is_empty()).then(|| average(&v))
    }

    /// Mean `Ā` of `variant` over seeds.
    pub fn mean_average(&self, variant: &str) -> Option<f64> {
        let v: Vec<f64> = self.of(variant).iter().map(|r| r.average_accuracy).collect();
        (!v.is_empty()).then(|| average(&v))
    }

    /// Per-stage accuracy of `variant`, averaged over seeds.
    pub fn mean_stage_accuracy(&self, variant: &str) -> Option<Vec<f64>> {
        let runs = self.of(variant);
        let first = runs.first()?;
        let stages = first.per_stage_accuracy.len();
        Some(
            (0..stages)
                .map(|s| average(&runs.iter().map(|r| r.per_stage_accuracy[s]).collect::<Vec<_>>()))
                .collect(),
        )
    }

    /// One line per variant: mean over seeds.
    pub fn summary_rows(&self) -> Vec<AblationRow> {
        self.variants()
            .iter()
            .map(|name| {
                let runs = self.of(name);
                let mean = |f: fn(&MetricsReport) -> f64| average(&runs.iter().map(|r| f(r)).collect::<Vec<_>>());
                AblationRow {
                    variant: name.clone(),
                    seed: runs.len() as u64,
                    last_accuracy: mean(|r| r.last_accuracy),
                    average_accuracy: mean(|r| r.average_accuracy),
                    last_retrieval_accuracy: mean(|r| r.stages.last().map_or(0.0, |s| s.retrieval_accuracy)),
                    last_mean_iterations: mean(|r| r.stages.last().map_or(0.0, |s| s.mean_iterations)),
                }
            })
            .collect()
    }
}

/// Runs the ablation ladder, the oracle bound and the naive sequential baseline for
/// every seed. Variants sharing a training regime share one training run.
pub fn run_ablation(config: &ExperimentConfig, seeds: &[u64]) -> Result<AblationResult> {
    config.validate()?;
    if seeds.is_empty() {
        return Err(MosError::Config("ablation needs at least one seed".into()));
    }
    let variants = ablation_variants(config.alignment_enabled());
    let (unmerged, merged): (Vec<EvalVariant>, Vec<EvalVariant>) =
        variants.into_iter().partition(|v| !v.flags.use_merge);
    let mut result = AblationResult::default();
    for &seed in seeds {
        let cfg = ExperimentConfig {
            seed,
            ..config.clone()
        };
        for (use_merge, group) in [(false, &unmerged), (true, &merged)] {
            let out = run_pipeline(&cfg, use_merge, group)?;
            result.reports.extend(out.runs.into_iter().map(|r| r.report));
        }
        result.reports.push(run_naive_sequential(&cfg)?.0);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_adds_one_component_at_a_time() {
        let v = ablation_variants(false);
        let names: Vec<&str> = v.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, [BASELINE, PLUS_MERGE, PLUS_SELF_REFINE, PLUS_ENSEMBLE, ORACLE]);
        assert_eq!(v[0].flags, VariantFlags::default());
        assert!(v[1].flags.use_merge && !v[1].flags.use_self_refine);
        assert!(v[2].flags.use_self_refine && !v[2].flags.use_ensemble);
        assert_eq!(v[3].flags, VariantFlags::full());
        assert!(v[4].flags.oracle_task_ids && v[4].flags.use_ensemble);
    }
}
