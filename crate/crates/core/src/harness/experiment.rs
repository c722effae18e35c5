use serde::Serialize;

use crate::adapters::{init_adapter, AdapterRegistry};
use crate::backbone::{FrozenBackbone, TaskHead};
use crate::error::{MosError, Result};
use crate::harness::config::{DatasetSource, ExperimentConfig, VariantFlags};
use crate::harness::metrics::{percent, AuditReport, MetricsReport, StageMetrics};
use crate::inference::{AdapterModel, Retriever, Selection, TerminalReason};
use crate::numerics::{argmax, Rng};
use crate::stream::{load_dataset, make_splits, synthetic_cil_dataset, Dataset, Split, Splits, SyntheticSpec};
use crate::training::{
    align_classifier, compute_gaussian_stats, extend_head, extract_prototypes, fit, train_task, GaussianStats,
    LossRecord, PrototypeBank, TaskData, TrainConfig,
};

const DATA_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const ALIGN_STREAM: u64 = 2;
const NAIVE_STREAM: u64 = 3;

/// Relabelled train/test data and the task split they follow. Class `c` of the
/// relabelled data is the `c`-th class of the shuffled order, so every task owns a
/// contiguous label range.
#[derive(Debug, Clone)]
pub struct PreparedStream {
    pub splits: Splits,
    pub train: Dataset,
    pub test: Dataset,
}

impl PreparedStream {
    pub fn task_data(&self) -> Result<Vec<TaskData>> {
        (0..self.splits.num_tasks())
            .map(|t| {
                let classes = self.splits.task_labels(t);
                let data = self.train.subset(&classes);
                TaskData::new(t, classes, data)
            })
            .collect()
    }

    /// Test instances of the first `stages` tasks.
    pub fn seen_test(&self, stages: usize) -> Dataset {
        let classes: Vec<usize> = (0..stages).flat_map(|t| self.splits.task_labels(t)).collect();
        self.test.subset(&classes)
    }
}

pub fn prepare_stream(config: &ExperimentConfig) -> Result<PreparedStream> {
    let splits = make_splits(&config.stream)?;
    let n = config.stream.total_classes;
    let (train, test) = match &config.dataset {
        DatasetSource::Synthetic {
            dim,
            per_class,
            separation,
            noise,
        } => {
            let spec = SyntheticSpec {
                dim: *dim,
                per_class: *per_class,
                separation: *separation,
                noise: *noise,
            };
            let mut rng = Rng::new(Rng::derive_seed(config.seed, DATA_STREAM));
            synthetic_cil_dataset(n, &spec, &mut rng)?
        }
        DatasetSource::Files { format, train, test } => (
            load_dataset(train, *format, n, Split::Train)?,
            load_dataset(test, *format, n, Split::Test)?,
        ),
    };
    for ds in [&train, &test] {
        if !ds.is_empty() && ds.dim() != config.backbone.input_dim {
            return Err(MosError::Config(format!(
                "data has {} features but the backbone expects {}",
                ds.dim(),
                config.backbone.input_dim
            )));
        }
    }
    Ok(PreparedStream {
        train: splits.relabel_dataset(&train)?,
        test: splits.relabel_dataset(&test)?,
        splits,
    })
}

/// Training settings of a run: `train.seed` mixed with the run seed, alignment folded in.
pub fn effective_train_config(config: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        seed: Rng::derive_seed(config.seed, config.train.seed ^ TRAIN_STREAM),
        align_classifier: config.alignment_enabled(),
        ..config.train.clone()
    }
}

/// A named evaluation rule applied to the same trained stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalVariant {
    pub name: String,
    pub flags: VariantFlags,
}

impl EvalVariant {
    pub fn new(name: impl Into<String>, flags: VariantFlags) -> Self {
        EvalVariant {
            name: name.into(),
            flags,
        }
    }

    /// Name derived from the flags, e.g. `merge+self_refine+ensemble`.
    pub fn from_flags(flags: VariantFlags) -> Self {
        let parts: Vec<&str> = [
            (flags.use_merge, "merge"),
            (flags.use_retrieval, "retrieval"),
            (flags.use_self_refine, "self_refine"),
            (flags.use_ensemble, "ensemble"),
            (flags.use_alignment, "alignment"),
            (flags.oracle_task_ids, "oracle"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        let name = if parts.is_empty() { "baseline".to_string() } else { parts.join("+") };
        EvalVariant { name, flags }
    }

    pub fn selection(&self, true_task: usize, stages: usize) -> Selection {
        let f = &self.flags;
        if f.oracle_task_ids {
            Selection::Oracle(true_task)
        } else if f.use_self_refine {
            Selection::SelfRefine { max_iter: stages }
        } else if f.use_retrieval {
            Selection::OneShot
        } else {
            Selection::FirstAdapter
        }
    }
}

/// One test instance at one stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticRow {
    pub stage: usize,
    pub instance: usize,
    pub label: usize,
    pub true_task: usize,
    pub initial_task: usize,
    pub final_task: usize,
    pub iterations: usize,
    pub reason: String,
    pub top1_first: usize,
    pub top1_selected: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskLoss {
    pub task: usize,
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

impl TaskLoss {
    fn new(task: usize, r: &LossRecord) -> Self {
        TaskLoss {
            task,
            step: r.step,
            epoch: r.epoch,
            lr: r.lr,
            loss: r.loss,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub report: MetricsReport,
    pub diagnostics: Vec<DiagnosticRow>,
}

/// Everything a pipeline produced: trained state plus one run per evaluation variant.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub backbone: FrozenBackbone,
    pub registry: AdapterRegistry,
    pub bank: PrototypeBank,
    pub stats: GaussianStats,
    pub aligned_head: Option<TaskHead>,
    pub losses: Vec<TaskLoss>,
    pub runs: Vec<VariantRun>,
}

struct StageTally {
    stage: usize,
    classes_seen: usize,
    total: usize,
    correct: usize,
    retrieved: usize,
    iterations: usize,
    cycles: usize,
    max_iters: usize,
}

impl StageTally {
    fn finish(self, aligned_accuracy: Option<f64>) -> StageMetrics {
        let n = self.total.max(1) as f64;
        StageMetrics {
            stage: self.stage,
            classes_seen: self.classes_seen,
            test_instances: self.total,
            accuracy: percent(self.correct, self.total),
            retrieval_accuracy: self.retrieved as f64 / n,
            mean_iterations: self.iterations as f64 / n,
            cycle_rate: self.cycles as f64 / n,
            max_iter_rate: self.max_iters as f64 / n,
            aligned_accuracy,
        }
    }
}

fn evaluate_variant<E: crate::inference::AdapterEmbedder>(
    retriever: &Retriever<'_, E>,
    variant: &EvalVariant,
    test: &Dataset,
    splits: &Splits,
    stages: usize,
    rows: &mut Vec<DiagnosticRow>,
) -> Result<StageTally> {
    let mut tally = StageTally {
        stage: stages,
        classes_seen: splits.map.prefix(stages)?.num_classes(),
        total: test.len(),
        correct: 0,
        retrieved: 0,
        iterations: 0,
        cycles: 0,
        max_iters: 0,
    };
    for (i, (x, &label)) in test.features.iter().zip(&test.labels).enumerate() {
        let true_task = splits.map.task_of(label).expect("relabelled classes are mapped");
        let p = retriever.classify(x, variant.selection(true_task, stages), variant.flags.use_ensemble)?;
        tally.correct += usize::from(p.class == label);
        tally.retrieved += usize::from(p.final_task == true_task);
        let (iterations, reason) = match &p.trace {
            Some(t) => (t.iterations, t.reason.as_str()),
            None => (0, "none"),
        };
        tally.iterations += iterations;
        if let Some(t) = &p.trace {
            tally.cycles += usize::from(t.reason == TerminalReason::CycleDetected);
            tally.max_iters += usize::from(t.reason == TerminalReason::MaxIter);
        }
        rows.push(DiagnosticRow {
            stage: stages,
            instance: i,
            label,
            true_task,
            initial_task: p.initial_task,
            final_task: p.final_task,
            iterations,
            reason: reason.to_string(),
            top1_first: p.top1_first,
            top1_selected: p.top1_selected,
            predicted: p.class,
        });
    }
    Ok(tally)
}

fn aligned_accuracy(backbone: &FrozenBackbone, registry: &AdapterRegistry, head: &TaskHead, test: &Dataset) -> Result<f64> {
    let first = registry.get(0).ok_or_else(|| MosError::Registry("no adapters registered".into()))?;
    let mut correct = 0;
    for (x, &label) in test.features.iter().zip(&test.labels) {
        let logits = backbone.forward_logits(x, first, head)?;
        correct += usize::from(argmax(&logits).map(|c| head.classes[c]) == Some(label));
    }
    Ok(percent(correct, test.len()))
}

fn reads(tasks: &[TaskData]) -> Vec<u64> {
    tasks.iter().map(TaskData::reads).collect()
}

/// Trains every task once (with or without merging) and evaluates each of `variants`
/// after every stage. Adapters and prototypes are frozen once a stage ends, so all
/// variants see the same model.
pub fn run_pipeline(config: &ExperimentConfig, use_merge: bool, variants: &[EvalVariant]) -> Result<PipelineOutput> {
    config.validate()?;
    if variants.is_empty() {
        return Err(MosError::Config("no evaluation variants given".into()));
    }
    let stream = prepare_stream(config)?;
    let tasks = stream.task_data()?;
    let num_tasks = tasks.len();
    let train = effective_train_config(config);

    let backbone = FrozenBackbone::build(&config.backbone)?;
    let backbone_checksum = backbone.checksum();
    let mut registry = AdapterRegistry::new(train.alpha)?;
    let mut bank = PrototypeBank::new();
    let mut stats = GaussianStats::default();
    let mut aligned_head = train
        .align_classifier
        .then(|| TaskHead::zeros(backbone.embed_dim(), Vec::new()));
    let mut align_rng = Rng::new(Rng::derive_seed(train.seed, ALIGN_STREAM));
    let mut losses = Vec::new();
    let mut tallies: Vec<Vec<StageMetrics>> = vec![Vec::new(); variants.len()];
    let mut diagnostics: Vec<Vec<DiagnosticRow>> = vec![Vec::new(); variants.len()];
    let mut audit = AuditReport {
        exemplar_free: true,
        history_unchanged: true,
        ..Default::default()
    };

    for b in 0..num_tasks {
        let stage = b + 1;
        let td = &tasks[b];
        let before = reads(&tasks);
        let history_before = registry.checksums();

        let outcome = train_task(td, &backbone, &mut registry, &train, use_merge).map_err(|e| e.at_stage(stage))?;
        losses.extend(outcome.trace.iter().map(|r| TaskLoss::new(b, r)));

        for a in 0..=b {
            let adapter = registry.get(a).expect("registered");
            extract_prototypes(td, &backbone, adapter, &mut bank).map_err(|e| e.at_stage(stage))?;
        }
        // the new adapter never sees old data: old classes keep their own task's prototype
        for t in 0..b {
            for c in stream.splits.task_labels(t) {
                let p = bank.get(t, c).expect("extracted at its own stage").to_vec();
                bank.insert(b, c, p);
            }
        }

        if let Some(head) = aligned_head.as_mut() {
            let first = registry.get(0).expect("registered");
            stats.merge(compute_gaussian_stats(td, &backbone, first).map_err(|e| e.at_stage(stage))?);
            extend_head(head, &td.classes);
            align_classifier(head, &stats, &train, &mut align_rng).map_err(|e| e.at_stage(stage))?;
        }

        let after = reads(&tasks);
        let others_touched = (0..num_tasks).any(|t| t != b && after[t] != before[t]);
        audit.exemplar_free &= !others_touched;
        audit.history_unchanged &= registry.checksums()[..b] == history_before[..];

        if config.final_stage_only && stage < num_tasks {
            continue;
        }
        let map = stream.splits.map.prefix(stage)?;
        let model = AdapterModel::new(&backbone, &registry);
        let retriever = Retriever::new(&model, &bank, &map).map_err(|e| e.at_stage(stage))?;
        let test = stream.seen_test(stage);
        let aligned = match &aligned_head {
            Some(head) => Some(aligned_accuracy(&backbone, &registry, head, &test).map_err(|e| e.at_stage(stage))?),
            None => None,
        };
        for (v, variant) in variants.iter().enumerate() {
            let tally = evaluate_variant(&retriever, variant, &test, &stream.splits, stage, &mut diagnostics[v])
                .map_err(|e| e.at_stage(stage))?;
            tallies[v].push(tally.finish(aligned));
        }
    }

    audit.reads_per_task = reads(&tasks);
    audit.backbone_unchanged = backbone.checksum() == backbone_checksum;
    registry.audit()?;
    let adapter_parameters: usize = registry.adapters().map(|a| a.parameter_count()).sum();
    let adapter_bytes: usize = registry.adapters().map(|a| a.to_container().byte_len()).sum();

    let mut runs = Vec::with_capacity(variants.len());
    for ((variant, stages), diagnostics) in variants.iter().zip(tallies).zip(diagnostics) {
        let report = MetricsReport::from_stages(
            variant.name.clone(),
            config.seed,
            num_tasks,
            stages,
            adapter_parameters,
            adapter_bytes,
            backbone_checksum.clone(),
            registry.checksums(),
            audit.clone(),
        )?;
        runs.push(VariantRun { report, diagnostics });
    }
    Ok(PipelineOutput {
        backbone,
        registry,
        bank,
        stats,
        aligned_head,
        losses,
        runs,
    })
}

/// The configured variant, trained and evaluated once.
pub fn run_experiment(config: &ExperimentConfig) -> Result<PipelineOutput> {
    let variant = EvalVariant::from_flags(config.variant);
    run_pipeline(config, config.variant.use_merge, &[variant])
}

/// Sequential fine-tuning of a single shared adapter with one linear head over all
/// classes seen so far, trained on the current task only. No merging, no prototypes,
/// no retrieval: the reference point for forgetting.
pub fn run_naive_sequential(config: &ExperimentConfig) -> Result<(MetricsReport, Vec<TaskLoss>)> {
    config.validate()?;
    let stream = prepare_stream(config)?;
    let tasks = stream.task_data()?;
    let num_tasks = tasks.len();
    let train = effective_train_config(config);
    let backbone = FrozenBackbone::build(&config.backbone)?;
    let backbone_checksum = backbone.checksum();

    let mut rng = Rng::new(Rng::derive_seed(train.seed, NAIVE_STREAM));
    let mut adapter = init_adapter(0, backbone.num_blocks(), backbone.embed_dim(), train.r, &mut rng)?;
    let mut head = TaskHead::zeros(backbone.embed_dim(), Vec::new());
    let mut losses = Vec::new();
    let mut stages = Vec::new();
    let mut exemplar_free = true;

    for (b, td) in tasks.iter().enumerate() {
        let stage = b + 1;
        let before = reads(&tasks);
        extend_head(&mut head, &td.classes);
        let mut task_rng = Rng::new(Rng::derive_seed(train.seed, (NAIVE_STREAM << 32) | b as u64));
        let trace = fit(td, &backbone, &mut adapter, &mut head, &train, None, &mut task_rng)
            .map_err(|e| e.at_stage(stage))?;
        losses.extend(trace.iter().map(|r| TaskLoss::new(b, r)));
        let after = reads(&tasks);
        exemplar_free &= (0..num_tasks).all(|t| t == b || after[t] == before[t]);

        if config.final_stage_only && stage < num_tasks {
            continue;
        }
        let test = stream.seen_test(stage);
        let mut correct = 0;
        let mut first_task = 0;
        for (x, &label) in test.features.iter().zip(&test.labels) {
            let logits = backbone.forward_logits(x, &adapter, &head).map_err(|e| e.at_stage(stage))?;
            correct += usize::from(argmax(&logits).map(|c| head.classes[c]) == Some(label));
            first_task += usize::from(stream.splits.map.task_of(label) == Some(0));
        }
        stages.push(StageMetrics {
            stage,
            classes_seen: head.classes.len(),
            test_instances: test.len(),
            accuracy: percent(correct, test.len()),
            retrieval_accuracy: first_task as f64 / test.len().max(1) as f64,
            mean_iterations: 0.0,
            cycle_rate: 0.0,
            max_iter_rate: 0.0,
            aligned_accuracy: None,
        });
    }
    let audit = AuditReport {
        reads_per_task: reads(&tasks),
        exemplar_free,
        backbone_unchanged: backbone.checksum() == backbone_checksum,
        history_unchanged: true,
    };
    let report = MetricsReport::from_stages(
        "naive_sequential",
        config.seed,
        num_tasks,
        stages,
        adapter.parameter_count(),
        adapter.to_container().byte_len(),
        backbone_checksum,
        vec![adapter.checksum()],
        audit,
    )?;
    Ok((report, losses))
}
