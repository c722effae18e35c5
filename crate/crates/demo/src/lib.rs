//! Browser bindings: Gaussian feature replay, adapter merging and a small
//! class-incremental run. Each export returns plain numbers or a JSON string, so the
//! same functions are tested natively.

use mos_core::adapters::ema_merge;
use mos_core::backbone::{AdapterSet, BackboneConfig};
use mos_core::harness::{run_naive_sequential, run_pipeline, DatasetSource, EvalVariant, ExperimentConfig, VariantFlags};
use mos_core::numerics::{sample_gaussian, sampling_factor, Matrix, Rng};
use mos_core::stream::StreamSpec;
use mos_core::training::TrainConfig;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// `n` draws from a 2-d Gaussian, flattened as `x0, y0, x1, y1, …`. A covariance that
/// does not factor is sampled from its diagonal. Returns an empty vector on bad input.
#[wasm_bindgen]
pub fn replay_samples(mean_x: f64, mean_y: f64, var_x: f64, cov_xy: f64, var_y: f64, n: usize, seed: u64) -> Vec<f64> {
    if ![mean_x, mean_y, var_x, cov_xy, var_y].iter().all(|v| v.is_finite()) {
        return Vec::new();
    }
    let sigma = Matrix::from_rows(&[&[var_x, cov_xy], &[cov_xy, var_y]]);
    let Ok(factor) = sampling_factor(&sigma) else {
        return Vec::new();
    };
    let mut rng = Rng::new(seed);
    sample_gaussian(&[mean_x, mean_y], &factor, n, &mut rng)
        .map(|pts| pts.into_iter().flatten().collect())
        .unwrap_or_default()
}

/// Value of one adapter weight over `steps` merges with predecessors whose weights are
/// `history`, starting from `start`. Element 0 is `start`.
#[wasm_bindgen]
pub fn merge_trajectory(start: f64, history: Vec<f64>, alpha: f64, steps: usize) -> Vec<f64> {
    let scalar = |task: usize, v: f64| {
        let mut a = AdapterSet::zeros(task, 1, 1, 1);
        a.blocks[0].down[(0, 0)] = v;
        a
    };
    let frozen: Vec<AdapterSet> = history.iter().enumerate().map(|(t, &v)| scalar(t, v)).collect();
    let mut current = scalar(frozen.len(), start);
    let mut out = vec![start];
    for _ in 0..steps {
        match ema_merge(&current, &frozen, alpha) {
            Ok(next) => current = next,
            Err(_) => break,
        }
        out.push(current.blocks[0].down[(0, 0)]);
    }
    out
}

#[derive(Serialize)]
struct Curve {
    name: String,
    accuracy: Vec<f64>,
    retrieval: Vec<f64>,
    mean_iterations: Vec<f64>,
}

#[derive(Serialize)]
struct StreamResult {
    classes_seen: Vec<usize>,
    curves: Vec<Curve>,
}

fn demo_config(tasks: usize, classes_per_task: usize, separation: f64, noise: f64, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        stream: StreamSpec::new(tasks * classes_per_task, 0, classes_per_task),
        dataset: DatasetSource::Synthetic {
            dim: 8,
            per_class: 30,
            separation,
            noise,
        },
        backbone: BackboneConfig {
            init_seed: 7,
            init_scale: 0.3,
            ..BackboneConfig::new(8, 16, 16, 1)
        },
        train: TrainConfig {
            epochs: 5,
            batch_size: 16,
            r: 4,
            ..TrainConfig::default()
        },
        variant: VariantFlags::full(),
        output_dir: "unused".into(),
        seed,
        final_stage_only: false,
    }
}

fn stream_json(tasks: usize, classes_per_task: usize, separation: f64, noise: f64, seed: u64) -> Result<String, String> {
    if !(1..=10).contains(&tasks) || !(1..=10).contains(&classes_per_task) {
        return Err("tasks and classes per task must lie in 1..=10".into());
    }
    let config = demo_config(tasks, classes_per_task, separation, noise, seed);
    config.validate().map_err(|e| e.to_string())?;
    let variants = [
        EvalVariant::new("first adapter only", VariantFlags::default()),
        EvalVariant::new("MOS", VariantFlags::full()),
    ];
    let unmerged = run_pipeline(&config, false, &variants[..1]).map_err(|e| e.to_string())?;
    let merged = run_pipeline(&config, true, &variants[1..]).map_err(|e| e.to_string())?;
    let (naive, _) = run_naive_sequential(&config).map_err(|e| e.to_string())?;

    let mut reports: Vec<_> = unmerged.runs.into_iter().chain(merged.runs).map(|r| r.report).collect();
    reports.push(naive);
    let classes_seen = reports[0].stages.iter().map(|s| s.classes_seen).collect();
    let curves = reports
        .into_iter()
        .map(|r| Curve {
            name: r.variant,
            accuracy: r.per_stage_accuracy,
            retrieval: r.stages.iter().map(|s| s.retrieval_accuracy).collect(),
            mean_iterations: r.stages.iter().map(|s| s.mean_iterations).collect(),
        })
        .collect();
    serde_json::to_string(&StreamResult { classes_seen, curves }).map_err(|e| e.to_string())
}

/// Trains a small synthetic stream and returns per-stage curves as JSON:
/// `{"classes_seen": [..], "curves": [{"name", "accuracy", "retrieval", "mean_iterations"}]}`,
/// or `{"error": ".."}`.
#[wasm_bindgen]
pub fn run_stream(tasks: usize, classes_per_task: usize, separation: f64, noise: f64, seed: u64) -> String {
    stream_json(tasks, classes_per_task, separation, noise, seed)
        .unwrap_or_else(|e| serde_json::json!({ "error": e }).to_string())
}
