use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;
use crate::harness::ablation::AblationResult;
use crate::harness::config::ExperimentConfig;
use crate::harness::experiment::{DiagnosticRow, PipelineOutput, TaskLoss};
use crate::harness::metrics::MetricsReport;

pub const METRICS_FILE: &str = "metrics.json";
pub const STAGES_FILE: &str = "stages.csv";
pub const CURVE_FILE: &str = "curve.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const LOSS_FILE: &str = "loss.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_SUMMARY_FILE: &str = "ablation_summary.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Serialize)]
struct CurvePoint {
    stage: usize,
    classes_seen: usize,
    accuracy: f64,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline. Key order follows field order, floats use the
/// shortest representation that reads back to the same value.
pub fn metrics_json(report: &MetricsReport) -> Result<String> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    Ok(text)
}

/// Writes `metrics.json`, the per-stage table, the accuracy curve and the per-instance
/// diagnostics. Reports without evaluated stages are rejected before anything is written.
pub fn emit_report(report: &MetricsReport, diagnostics: &[DiagnosticRow], dir: &Path) -> Result<()> {
    report.validate()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(METRICS_FILE), metrics_json(report)?)?;
    write_csv(&dir.join(STAGES_FILE), &report.stages)?;
    let curve: Vec<CurvePoint> = report
        .stages
        .iter()
        .map(|s| CurvePoint {
            stage: s.stage,
            classes_seen: s.classes_seen,
            accuracy: s.accuracy,
        })
        .collect();
    write_csv(&dir.join(CURVE_FILE), &curve)?;
    write_csv(&dir.join(DIAGNOSTICS_FILE), diagnostics)?;
    Ok(())
}

pub fn write_losses(losses: &[TaskLoss], path: &Path) -> Result<()> {
    write_csv(path, losses)
}

/// Full artifact set of a single run: report files, loss trace, the resolved config and
/// checkpoints of the backbone, adapters (with registry index) and class statistics.
pub fn emit_run(config: &ExperimentConfig, output: &PipelineOutput, dir: &Path) -> Result<()> {
    let run = output
        .runs
        .first()
        .ok_or_else(|| crate::MosError::InvalidInput("pipeline produced no runs".into()))?;
    emit_report(&run.report, &run.diagnostics, dir)?;
    write_losses(&output.losses, &dir.join(LOSS_FILE))?;
    let mut resolved = serde_json::to_string_pretty(config)?;
    resolved.push('\n');
    fs::write(dir.join("config.json"), resolved)?;

    let ckpt = dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt)?;
    output.backbone.save(&ckpt.join("backbone.mos"))?;
    output.registry.save(&ckpt.join("adapters"))?;
    if !output.stats.classes.is_empty() {
        output.stats.save(&ckpt.join("gaussian_stats.mos"))?;
    }
    Ok(())
}

/// Per-seed rows, per-variant means, and each report under `reports/<variant>_seed<s>.json`.
pub fn emit_ablation(result: &AblationResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(&dir.join(ABLATION_FILE), &result.rows())?;
    write_csv(&dir.join(ABLATION_SUMMARY_FILE), &result.summary_rows())?;
    let reports = dir.join("reports");
    fs::create_dir_all(&reports)?;
    for r in &result.reports {
        let name = format!("{}_seed{}.json", r.variant.trim_start_matches('+'), r.seed);
        fs::write(reports.join(name), metrics_json(r)?)?;
    }
    Ok(())
}

/// Reads and checks `metrics.json` from a run directory.
pub fn read_report(dir: &Path) -> Result<MetricsReport> {
    let path: PathBuf = dir.join(METRICS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| crate::MosError::format(&path, e.to_string()))?;
    let report: MetricsReport = serde_json::from_str(&text)?;
    report.validate()?;
    Ok(report)
}

/// Human-readable table of a report.
pub fn render_report(report: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "variant {}  seed {}  tasks {}", report.variant, report.seed, report.num_tasks);
    let _ = writeln!(s, "{:>5} {:>7} {:>9} {:>9} {:>8} {:>7}", "stage", "classes", "acc %", "retrieval", "iters", "cycles");
    for st in &report.stages {
        let _ = writeln!(
            s,
            "{:>5} {:>7} {:>9.2} {:>9.3} {:>8.3} {:>7.3}",
            st.stage, st.classes_seen, st.accuracy, st.retrieval_accuracy, st.mean_iterations, st.cycle_rate
        );
    }
    let _ = writeln!(s, "A_B {:.2}  mean {:.2}", report.last_accuracy, report.average_accuracy);
    let _ = writeln!(
        s,
        "adapters {} values, {} bytes; exemplar-free {}; frozen state intact {}",
        report.adapter_parameters,
        report.adapter_bytes,
        report.audit.exemplar_free,
        report.audit.backbone_unchanged && report.audit.history_unchanged
    );
    s
}

pub fn render_ablation(result: &AblationResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<18} {:>6} {:>9} {:>9} {:>9}", "variant", "seeds", "A_B %", "mean %", "retrieval");
    for r in result.summary_rows() {
        let _ = writeln!(
            s,
            "{:<18} {:>6} {:>9.2} {:>9.2} {:>9.3}",
            r.variant, r.seed, r.last_accuracy, r.average_accuracy, r.last_retrieval_accuracy
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::metrics::{AuditReport, StageMetrics};

    fn report() -> MetricsReport {
        let stages = [100.0, 90.0, 80.0]
            .iter()
            .enumerate()
            .map(|(i, &a)| StageMetrics {
                stage: i + 1,
                classes_seen: 2 * (i + 1),
                test_instances: 10,
                accuracy: a,
                retrieval_accuracy: 0.5,
                mean_iterations: 0.25,
                cycle_rate: 0.0,
                max_iter_rate: 0.0,
                aligned_accuracy: None,
            })
            .collect();
        MetricsReport::from_stages("mos", 1, 3, stages, 12, 100, "ab".into(), vec!["c".into()], AuditReport::default())
            .unwrap()
    }

    #[test]
    fn report_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let r = report();
        emit_report(&r, &[], dir.path()).unwrap();
        assert_eq!(read_report(dir.path()).unwrap(), r);
        let curve = fs::read_to_string(dir.path().join(CURVE_FILE)).unwrap();
        assert_eq!(curve, "stage,classes_seen,accuracy\n1,2,100.0\n2,4,90.0\n3,6,80.0\n");
        assert!(render_report(&r).contains("A_B 80.00  mean 90.00"));
    }

    #[test]
    fn empty_report_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = report();
        r.stages.clear();
        r.per_stage_accuracy.clear();
        assert!(emit_report(&r, &[], &dir.path().join("out")).is_err());
        assert!(!dir.path().join("out").exists());
    }

    #[test]
    fn json_is_stable() {
        let r = report();
        assert_eq!(metrics_json(&r).unwrap(), metrics_json(&r.clone()).unwrap());
        assert!(metrics_json(&r).unwrap().starts_with("{\n  \"variant\": \"mos\",\n  \"seed\": 1,"));
    }
}
