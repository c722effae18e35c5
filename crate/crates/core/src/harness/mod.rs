//! End-to-end runs: configuration, the staged pipeline, metrics, ablations, report
//! files and the gradient check suite.

pub mod ablation;
pub mod config;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod report;

pub use ablation::{ablation_variants, run_ablation, AblationResult, AblationRow};
pub use config::{DatasetSource, ExperimentConfig, VariantFlags};
pub use experiment::{run_experiment, run_naive_sequential, run_pipeline, EvalVariant, PipelineOutput};
pub use gradcheck::{run_gradcheck, GradcheckReport};
pub use metrics::{AuditReport, MetricsReport, StageMetrics};
pub use report::{emit_ablation, emit_report, emit_run, read_report};
