use serde::{Deserialize, Serialize};

use crate::error::{MosError, Result};

/// Results after one stage, over the test instances of every class seen so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    /// 1-based stage number.
    pub stage: usize,
    pub classes_seen: usize,
    pub test_instances: usize,
    /// Top-1 accuracy in percent.
    pub accuracy: f64,
    /// Fraction of instances whose selected adapter belongs to their own task.
    pub retrieval_accuracy: f64,
    pub mean_iterations: f64,
    pub cycle_rate: f64,
    pub max_iter_rate: f64,
    /// Accuracy of the replay-aligned linear head, when alignment is on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aligned_accuracy: Option<f64>,
}

/// Accounting that the run read only the current task's data and never touched
/// frozen parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    /// Passes over each task's training split, as seen after the last stage.
    pub reads_per_task: Vec<u64>,
    /// True when no stage read another stage's training data.
    pub exemplar_free: bool,
    /// Backbone checksum unchanged by training.
    pub backbone_unchanged: bool,
    /// Every registered adapter kept its checksum through later stages.
    pub history_unchanged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub seed: u64,
    pub num_tasks: usize,
    /// `A_b` in percent, one per evaluated stage.
    pub per_stage_accuracy: Vec<f64>,
    /// `A_B`.
    pub last_accuracy: f64,
    /// `Ā`, the plain mean of `per_stage_accuracy`.
    pub average_accuracy: f64,
    pub stages: Vec<StageMetrics>,
    pub adapter_parameters: usize,
    pub adapter_bytes: usize,
    pub backbone_checksum: String,
    pub adapter_checksums: Vec<String>,
    pub audit: AuditReport,
}

/// Mean of `values`, summed left to right.
pub fn average(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// `100·correct/total`, or 0 for an empty set.
pub fn percent(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    }
}

impl MetricsReport {
    /// Fills the summary fields from `stages`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_stages(
        variant: impl Into<String>,
        seed: u64,
        num_tasks: usize,
        stages: Vec<StageMetrics>,
        adapter_parameters: usize,
        adapter_bytes: usize,
        backbone_checksum: String,
        adapter_checksums: Vec<String>,
        audit: AuditReport,
    ) -> Result<Self> {
        let per_stage_accuracy: Vec<f64> = stages.iter().map(|s| s.accuracy).collect();
        let Some(&last_accuracy) = per_stage_accuracy.last() else {
            return Err(MosError::InvalidInput("a report needs at least one evaluated stage".into()));
        };
        let report = MetricsReport {
            variant: variant.into(),
            seed,
            num_tasks,
            average_accuracy: average(&per_stage_accuracy),
            last_accuracy,
            per_stage_accuracy,
            stages,
            adapter_parameters,
            adapter_bytes,
            backbone_checksum,
            adapter_checksums,
            audit,
        };
        report.validate()?;
        Ok(report)
    }

    /// Checks the internal consistency of a report read back from disk.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MosError::InvalidInput(format!("metrics report: {m}")));
        if self.per_stage_accuracy.is_empty() || self.stages.is_empty() {
            return bad("no evaluated stages");
        }
        if self.per_stage_accuracy.len() != self.stages.len() {
            return bad("per-stage accuracy and stage rows differ in length");
        }
        if self.stages.iter().zip(&self.per_stage_accuracy).any(|(s, a)| s.accuracy != *a) {
            return bad("per-stage accuracy disagrees with stage rows");
        }
        if self.per_stage_accuracy.iter().any(|a| !(0.0..=100.0).contains(a)) {
            return bad("accuracy outside [0, 100]");
        }
        if self.last_accuracy != *self.per_stage_accuracy.last().expect("non-empty") {
            return bad("last accuracy is not the final stage's");
        }
        if self.average_accuracy != average(&self.per_stage_accuracy) {
            return bad("average accuracy is not the mean of the stages");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stage(stage: usize, accuracy: f64) -> StageMetrics {
        StageMetrics {
            stage,
            classes_seen: 2 * stage,
            test_instances: 10 * stage,
            accuracy,
            retrieval_accuracy: 1.0,
            mean_iterations: 0.0,
            cycle_rate: 0.0,
            max_iter_rate: 0.0,
            aligned_accuracy: None,
        }
    }

    fn report(accs: &[f64]) -> Result<MetricsReport> {
        let stages = accs.iter().enumerate().map(|(i, &a)| stage(i + 1, a)).collect();
        MetricsReport::from_stages("x", 0, accs.len(), stages, 0, 0, String::new(), vec![], AuditReport::default())
    }

    #[test]
    fn average_of_three_stages() {
        let r = report(&[100.0, 90.0, 80.0]).unwrap();
        assert_eq!(r.average_accuracy, 90.0);
        assert_eq!(r.last_accuracy, 80.0);
    }

    #[test]
    fn single_stage_collapses() {
        let r = report(&[73.5]).unwrap();
        assert_eq!(r.last_accuracy, r.average_accuracy);
        assert_eq!(r.per_stage_accuracy, vec![73.5]);
    }

    #[test]
    fn empty_and_out_of_range_reports_rejected() {
        assert!(report(&[]).is_err());
        assert!(report(&[101.0]).is_err());
        let mut r = report(&[50.0, 60.0]).unwrap();
        r.average_accuracy += 1e-9;
        assert!(r.validate().is_err());
    }

    #[test]
    fn percent_of_nothing_is_zero() {
        assert_eq!(percent(0, 0), 0.0);
        assert_eq!(percent(1, 4), 25.0);
    }
}
