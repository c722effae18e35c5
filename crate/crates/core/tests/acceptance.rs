//! One line per acceptance criterion, then a single assertion over all of them.
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

mod common;

use std::time::Instant;

use common::{brute_force_ncm, gaussian_vec, one_hot, random_stage, Table};
use mos_core::adapters::{ema_merge, init_adapter, AdapterRegistry};
use mos_core::backbone::{AdapterSet, BackboneConfig, FrozenBackbone};
use mos_core::checkpoint::PREAMBLE_BYTES;
use mos_core::harness::ablation::{BASELINE, NAIVE, ORACLE, PLUS_ENSEMBLE, PLUS_MERGE, PLUS_SELF_REFINE};
use mos_core::harness::report::emit_run;
use mos_core::harness::{run_ablation, run_experiment, run_gradcheck, ExperimentConfig};
use mos_core::inference::{infer_task_id, predict_with_adapter, ClassTaskMap, Retriever, TerminalReason};
use mos_core::numerics::{argmax, sample_gaussian, sampling_factor, Matrix, Rng};
use mos_core::stream::{Dataset, Split};
use mos_core::training::{train_task, PrototypeBank, TaskData, TrainConfig};

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> Outcome {
    println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    Outcome { name, passed, detail }
}

fn gradient_exactness() -> Outcome {
    let start = Instant::now();
    let r = run_gradcheck(100, 2024).expect("gradcheck runs");
    let secs = start.elapsed().as_secs_f64();
    outcome(
        "gradient exactness",
        r.passed() && r.problems == 100 && secs < 120.0,
        format!(
            "{} configs, {} entries, {} failures, {} skipped at ReLU kinks, max rel err {:.2e}, max abs err {:.2e}, {secs:.1}s",
            r.problems, r.entries_checked, r.failures, r.entries_skipped, r.max_relative_error, r.max_abs_error
        ),
    )
}

fn ema_oracle() -> Outcome {
    let mut rng = Rng::new(1000);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (l, d, r) = (1 + rng.below(3), 1 + rng.below(8), 1 + rng.below(5));
        let random = |rng: &mut Rng, t| {
            let mut a = AdapterSet::zeros(t, l, d, r);
            a.values_mut().for_each(|v| *v = rng.standard_normal());
            a
        };
        let history: Vec<AdapterSet> = (0..1 + rng.below(6)).map(|t| random(&mut rng, t)).collect();
        let current = random(&mut rng, history.len());
        let alpha = rng.uniform();
        let merged: Vec<f64> = ema_merge(&current, &history, alpha).unwrap().values().collect();
        let hist: Vec<Vec<f64>> = history.iter().map(|h| h.values().collect()).collect();
        let cur: Vec<f64> = current.values().collect();
        for i in 0..cur.len() {
            let mut sum = 0.0;
            for h in &hist {
                sum += h[i];
            }
            let want = (1.0 - alpha) * cur[i] + alpha / hist.len() as f64 * sum;
            mismatches += usize::from(want.to_bits() != merged[i].to_bits());
        }
    }

    // a full merged training stage leaves every registered adapter untouched
    let bb = FrozenBackbone::build(&BackboneConfig {
        init_scale: 0.3,
        ..BackboneConfig::new(4, 6, 6, 2)
    })
    .unwrap();
    let config = TrainConfig {
        epochs: 3,
        batch_size: 8,
        r: 3,
        ..TrainConfig::default()
    };
    let mut registry = AdapterRegistry::new(config.alpha).unwrap();
    let mut rng = Rng::new(5);
    let mut intact = true;
    for t in 0..4 {
        let classes = vec![2 * t, 2 * t + 1];
        let features: Vec<Vec<f64>> = (0..20).map(|_| gaussian_vec(&mut rng, 4)).collect();
        let labels = (0..20).map(|i| classes[i % 2]).collect();
        let data = TaskData::new(t, classes, Dataset::new(features, labels, Split::Train).unwrap()).unwrap();
        let before = registry.checksums();
        train_task(&data, &bb, &mut registry, &config, true).unwrap();
        intact &= registry.checksums()[..t] == before[..];
    }
    intact &= registry.audit().is_ok();
    outcome(
        "EMA merge oracle",
        mismatches == 0 && intact,
        format!("1000 triples, {mismatches} bitwise mismatches; history checksums intact: {intact}"),
    )
}

fn self_refine_termination() -> Outcome {
    let mut rng = Rng::new(10_000);
    let (mut over_budget, mut inconsistent, mut cycles) = (0, 0, 0);
    for _ in 0..10_000 {
        let b = 2 + rng.below(11);
        let dim = 1 + rng.below(4);
        let stage = random_stage(&mut rng, b, dim, 1);
        let r = Retriever::new(&stage.table, &stage.bank, &stage.map).unwrap();
        let (j, trace) = r.self_refine(&[0.0], b).unwrap();
        over_budget += usize::from(trace.evaluations > b);
        cycles += usize::from(trace.reason == TerminalReason::CycleDetected);
        if trace.reason == TerminalReason::FixedPoint {
            inconsistent += usize::from(infer_task_id(&r.predict(&[0.0], j).unwrap(), &stage.map).unwrap() != j);
        }
    }

    // adapter 0 → task a, adapter a → task c, adapter c → task a
    let mut wrong_cycles = 0;
    for _ in 0..1000 {
        let b = 2 + rng.below(11);
        let a = 1 + rng.below(b - 1);
        let c = (a + 1 + rng.below(b - 1)) % b;
        let map = ClassTaskMap::from_task_sizes(&vec![2; b]);
        let k = map.num_classes();
        let mut bank = PrototypeBank::new();
        for ad in 0..b {
            for class in 0..k {
                bank.insert(ad, class, one_hot(k, class));
            }
        }
        let mut row: Vec<Vec<f64>> = (0..b).map(|t| one_hot(k, 2 * t)).collect();
        row[0] = one_hot(k, 2 * a);
        row[a] = one_hot(k, 2 * c);
        row[c] = one_hot(k, 2 * a + 1);
        let table = Table { rows: vec![row], adapters: b };
        let r = Retriever::new(&table, &bank, &map).unwrap();
        let first = r.self_refine(&[0.0], b).unwrap();
        let second = r.self_refine(&[0.0], b).unwrap();
        let expected_visits = if c == 0 { vec![a, 0] } else { vec![a, c] };
        let ok = first == second
            && first.1.reason == TerminalReason::CycleDetected
            && first.0 == a
            && first.1.visited == expected_visits;
        wrong_cycles += usize::from(!ok);
    }
    outcome(
        "self-refine termination",
        over_budget == 0 && inconsistent == 0 && wrong_cycles == 0,
        format!(
            "10000 banks: {over_budget} over budget, {inconsistent} inconsistent fixed points, {cycles} natural cycles; \
             1000 constructed 2-cycles, {wrong_cycles} mishandled"
        ),
    )
}

fn floor_rule() -> Outcome {
    let mut checked = 0usize;
    let mut wrong = 0usize;
    for size in 1..=1000 {
        for tasks in 1..=1000 / size {
            let map = ClassTaskMap::from_task_sizes(&vec![size; tasks]);
            let mut logits = vec![0.0; size * tasks];
            for c in 0..size * tasks {
                logits[c] = 1.0;
                wrong += usize::from(infer_task_id(&logits, &map).unwrap() != c / size);
                logits[c] = 0.0;
                checked += 1;
            }
        }
    }
    outcome(
        "floor-rule equivalence",
        wrong == 0,
        format!("{checked} (split, class) pairs with |Y| ≤ 1000, {wrong} disagreements"),
    )
}

fn nearest_class_mean() -> Outcome {
    let mut rng = Rng::new(31);
    let mut wrong = 0;
    for _ in 0..1000 {
        let b = 1 + rng.below(5);
        let dim = 2 + rng.below(8);
        let stage = random_stage(&mut rng, b, dim, 1);
        let a = rng.below(b);
        let logits = predict_with_adapter(&stage.table, &[0.0], a, &stage.bank, &stage.map).unwrap();
        let protos: Vec<&[f64]> = (0..stage.map.num_classes()).map(|c| stage.bank.get(a, c).unwrap()).collect();
        wrong += usize::from(argmax(&logits) != Some(brute_force_ncm(&stage.table.rows[0][a], &protos)));
    }
    outcome(
        "nearest-class-mean oracle",
        wrong == 0,
        format!("1000 queries, {wrong} disagreements"),
    )
}

fn ablation_and_oracle() -> Vec<Outcome> {
    let start = Instant::now();
    let seeds: Vec<u64> = (0..5).collect();
    let result = run_ablation(&ExperimentConfig::standard_benchmark(0), &seeds).expect("ablation runs");
    let secs = start.elapsed().as_secs_f64();
    let m = |v: &str| result.mean_last(v).expect("variant present");
    let ladder = [BASELINE, PLUS_MERGE, PLUS_SELF_REFINE, PLUS_ENSEMBLE];
    let ordered = ladder.windows(2).all(|w| m(w[0]) <= m(w[1]) + 1.0);
    let gap = m(PLUS_ENSEMBLE) - m(NAIVE);
    let ladder_text: Vec<String> = ladder.iter().map(|v| format!("{v} {:.2}", m(v))).collect();
    let ablation = outcome(
        "directional ablation",
        ordered && gap >= 2.0 && secs < 600.0,
        format!(
            "mean A_B {}; naive {:.2}; gap {gap:.2}; {secs:.1}s",
            ladder_text.join(", "),
            m(NAIVE)
        ),
    );

    let oracle = result.mean_stage_accuracy(ORACLE).unwrap();
    let refined = result.mean_stage_accuracy(PLUS_ENSEMBLE).unwrap();
    let dominated = oracle.iter().zip(&refined).all(|(o, s)| o >= s);
    let bound = outcome(
        "oracle-task upper bound",
        dominated && m(ORACLE) >= 95.0,
        format!(
            "oracle ≥ self-refined at every stage: {dominated}; oracle A_B {:.2}",
            m(ORACLE)
        ),
    );

    let audited = result.reports.iter().all(|r| r.audit.exemplar_free && r.audit.backbone_unchanged);
    let audit = outcome(
        "exemplar-free audit",
        audited,
        format!("{} runs, each stage read only its own training data", result.reports.len()),
    );
    vec![ablation, bound, audit]
}

fn gaussian_replay() -> Outcome {
    let mut rng = Rng::new(8);
    let d = 8;
    let a = Matrix::from_fn(d, d, |_, _| rng.standard_normal());
    let mut sigma = a.matmul(&a.transpose()).unwrap();
    for i in 0..d {
        sigma[(i, i)] += 0.5;
    }
    let mu = gaussian_vec(&mut rng, d);
    let n = 10_000;
    let samples = sample_gaussian(&mu, &sampling_factor(&sigma).unwrap(), n, &mut rng).unwrap();
    let mean: Vec<f64> = (0..d).map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n as f64).collect();
    let worst_mean = (0..d)
        .map(|j| (mean[j] - mu[j]).abs() / (4.0 * sigma[(j, j)].sqrt() / (n as f64).sqrt()))
        .fold(0.0, f64::max);
    let mut cov = Matrix::zeros(d, d);
    for s in &samples {
        let c: Vec<f64> = s.iter().zip(&mean).map(|(x, m)| x - m).collect();
        cov.add_outer(&c, &c, 1.0 / n as f64);
    }
    let mut diff = cov.clone();
    diff.as_mut_slice().iter_mut().zip(sigma.as_slice()).for_each(|(x, s)| *x -= s);
    let rel = diff.frobenius_norm() / sigma.frobenius_norm();
    outcome(
        "Gaussian replay fidelity",
        worst_mean < 1.0 && rel < 0.05,
        format!("worst mean error {worst_mean:.3} of the 4σ/√n bound; covariance relative error {:.2}%", 100.0 * rel),
    )
}

fn files_under(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn determinism_and_storage() -> Vec<Outcome> {
    let tmp = tempfile::tempdir().unwrap();
    let config = ExperimentConfig::standard_benchmark(3);
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    let mut last = None;
    for dir in &dirs {
        let out = run_experiment(&config).unwrap();
        emit_run(&config, &out, dir).unwrap();
        last = Some(out);
    }
    let (fa, fb) = (files_under(&dirs[0]), files_under(&dirs[1]));
    let same_names = fa.iter().map(|p| p.strip_prefix(&dirs[0]).unwrap()).eq(fb.iter().map(|p| p.strip_prefix(&dirs[1]).unwrap()));
    let differing = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| std::fs::read(x).unwrap() != std::fs::read(y).unwrap())
        .count();
    let determinism = outcome(
        "determinism",
        same_names && differing == 0,
        format!("{} files compared (metrics.json, CSVs, checkpoints), {differing} differ", fa.len()),
    );

    let out = last.unwrap();
    let adapters_dir = dirs[0].join("checkpoints/adapters");
    let on_disk: u64 = files_under(&adapters_dir)
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e == "mos"))
        .map(|p| std::fs::metadata(p).unwrap().len())
        .sum();
    let b = out.registry.len();
    let (l, d, r) = (config.backbone.num_blocks, config.backbone.embed_dim, config.train.r);
    let values = b * l * 2 * d * r;
    let headers = b * (PREAMBLE_BYTES + 4 * 4);
    let storage = outcome(
        "storage accounting",
        on_disk as usize == 4 * values + headers && out.runs[0].report.adapter_bytes == 4 * values + headers,
        format!("B·L·2dr = {b}·{l}·2·{d}·{r} = {values} values; {on_disk} bytes = 4·{values} + {headers} header bytes"),
    );

    // an independently initialized adapter of the same shape costs the same
    let mut rng = Rng::new(0);
    let one = init_adapter(0, l, d, r, &mut rng).unwrap().to_container().byte_len();
    assert_eq!(one * b, 4 * values + headers);
    vec![determinism, storage]
}

#[test]
fn acceptance() {
    let mut outcomes = vec![
        gradient_exactness(),
        ema_oracle(),
        self_refine_termination(),
        floor_rule(),
        nearest_class_mean(),
    ];
    outcomes.extend(ablation_and_oracle());
    outcomes.push(gaussian_replay());
    outcomes.extend(determinism_and_storage());

    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| format!("{}: {}", o.name, o.detail))
        .collect();
    println!("{} of {} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
