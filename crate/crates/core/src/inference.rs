//! Test-time adapter retrieval.
//!
//! A query is first classified with the first task's adapter; the task owning the
//! winning class names the next adapter to try. Re-embedding with that adapter and
//! re-reading the task repeats until the task is self-consistent, a task repeats,
//! or the evaluation budget runs out. The final prediction sums the cosine logits
//! of the first adapter and the retrieved one.

use serde::Serialize;

use crate::adapters::AdapterRegistry;
use crate::backbone::FrozenBackbone;
use crate::error::{MosError, Result};
use crate::numerics::{argmax, cosine_similarity};
use crate::training::PrototypeBank;

/// Class → task lookup. Tasks partition the labels `0..num_classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTaskMap {
    task_of: Vec<usize>,
    tasks: Vec<Vec<usize>>,
}

impl ClassTaskMap {
    /// Consecutive label ranges: task 0 owns `0..sizes[0]`, task 1 the next `sizes[1]`, ….
    pub fn from_task_sizes(sizes: &[usize]) -> Self {
        let mut tasks = Vec::with_capacity(sizes.len());
        let mut task_of = Vec::new();
        for (t, &n) in sizes.iter().enumerate() {
            let start = task_of.len();
            tasks.push((start..start + n).collect());
            task_of.extend(std::iter::repeat_n(t, n));
        }
        ClassTaskMap { task_of, tasks }
    }

    /// Arbitrary class lists per task; they must partition `0..n` for some `n`.
    pub fn from_tasks(tasks: Vec<Vec<usize>>) -> Result<Self> {
        let n: usize = tasks.iter().map(Vec::len).sum();
        let mut task_of = vec![usize::MAX; n];
        for (t, classes) in tasks.iter().enumerate() {
            for &c in classes {
                match task_of.get_mut(c) {
                    Some(slot) if *slot == usize::MAX => *slot = t,
                    Some(_) => return Err(MosError::InvalidInput(format!("class {c} appears in two tasks"))),
                    None => return Err(MosError::InvalidInput(format!("class {c} outside 0..{n}"))),
                }
            }
        }
        Ok(ClassTaskMap { task_of, tasks })
    }

    pub fn num_classes(&self) -> usize {
        self.task_of.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task_of(&self, class: usize) -> Option<usize> {
        self.task_of.get(class).copied()
    }

    pub fn classes_of(&self, task: usize) -> &[usize] {
        &self.tasks[task]
    }

    /// The map as it stands after the first `b` tasks. Their classes must be the
    /// labels `0..|𝒴_b|`, which holds for streams built by `make_splits`.
    pub fn prefix(&self, b: usize) -> Result<ClassTaskMap> {
        if b == 0 || b > self.tasks.len() {
            return Err(MosError::InvalidInput(format!("stage {b} of {}", self.tasks.len())));
        }
        ClassTaskMap::from_tasks(self.tasks[..b].to_vec())
    }
}

/// Task of the highest logit (lowest class index on ties).
pub fn infer_task_id(logits: &[f64], map: &ClassTaskMap) -> Result<usize> {
    if logits.len() != map.num_classes() {
        return Err(MosError::dims(format!(
            "{} logits for {} seen classes",
            logits.len(),
            map.num_classes()
        )));
    }
    let best = argmax(logits).ok_or_else(|| MosError::InvalidInput("no finite logit".into()))?;
    Ok(map.task_of[best])
}

/// Source of `φ(x; 𝒜_a)` for each retained adapter `a`.
pub trait AdapterEmbedder {
    fn num_adapters(&self) -> usize;
    fn embed(&self, x: &[f64], adapter: usize) -> Result<Vec<f64>>;
}

/// The frozen backbone combined with the first `num_adapters` registered adapters.
#[derive(Debug, Clone, Copy)]
pub struct AdapterModel<'a> {
    pub backbone: &'a FrozenBackbone,
    pub registry: &'a AdapterRegistry,
    pub num_adapters: usize,
}

impl<'a> AdapterModel<'a> {
    pub fn new(backbone: &'a FrozenBackbone, registry: &'a AdapterRegistry) -> Self {
        AdapterModel {
            backbone,
            registry,
            num_adapters: registry.len(),
        }
    }
}

impl AdapterEmbedder for AdapterModel<'_> {
    fn num_adapters(&self) -> usize {
        self.num_adapters
    }

    fn embed(&self, x: &[f64], adapter: usize) -> Result<Vec<f64>> {
        let set = self
            .registry
            .get(adapter)
            .filter(|_| adapter < self.num_adapters)
            .ok_or_else(|| MosError::Registry(format!("no adapter {adapter}")))?;
        self.backbone.forward(x, set)
    }
}

/// Cosine logits of an embedding against adapter `adapter`'s prototypes of classes
/// `0..num_classes`.
pub fn cosine_logits(embedding: &[f64], adapter: usize, bank: &PrototypeBank, num_classes: usize) -> Result<Vec<f64>> {
    (0..num_classes)
        .map(|class| {
            let p = bank
                .get(adapter, class)
                .ok_or(MosError::MissingPrototype { adapter, class })?;
            cosine_similarity(p, embedding)
        })
        .collect()
}

/// `f(x | 𝒜_adapter)` over every class of `map`.
pub fn predict_with_adapter<E: AdapterEmbedder + ?Sized>(
    embedder: &E,
    x: &[f64],
    adapter: usize,
    bank: &PrototypeBank,
    map: &ClassTaskMap,
) -> Result<Vec<f64>> {
    let emb = embedder.embed(x, adapter)?;
    cosine_logits(&emb, adapter, bank, map.num_classes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    FixedPoint,
    CycleDetected,
    MaxIter,
}

impl TerminalReason {
    pub fn as_str(self) -> &'static str {
        match self {
            TerminalReason::FixedPoint => "fixed_point",
            TerminalReason::CycleDetected => "cycle_detected",
            TerminalReason::MaxIter => "max_iter",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RefineTrace {
    /// Task ids in the order they were predicted; the first is read off adapter 0.
    pub visited: Vec<usize>,
    pub reason: TerminalReason,
    /// Number of times the current task was replaced.
    pub iterations: usize,
    /// Distinct adapters whose embedding was computed.
    pub evaluations: usize,
}

/// How the second adapter of a prediction is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// Always the first task's adapter.
    FirstAdapter,
    /// The task read off the first adapter's prediction, without refinement.
    OneShot,
    /// Iterate until self-consistent, with at most `max_iter` adapter evaluations.
    SelfRefine { max_iter: usize },
    /// The given (true) task.
    Oracle(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    /// Task read off the first adapter.
    pub initial_task: usize,
    /// Adapter used for the second part.
    pub final_task: usize,
    pub trace: Option<RefineTrace>,
    /// Winner of the first adapter alone.
    pub top1_first: usize,
    /// Winner of the selected adapter alone.
    pub top1_selected: usize,
    pub first_logits: Vec<f64>,
    pub selected_logits: Vec<f64>,
}

/// Retrieval over a fixed stage: `map` covers the seen classes and `bank` holds a
/// prototype of every seen class under each of the `map.num_tasks()` adapters.
pub struct Retriever<'a, E: AdapterEmbedder + ?Sized> {
    embedder: &'a E,
    bank: &'a PrototypeBank,
    map: &'a ClassTaskMap,
}

struct Memo {
    logits: Vec<Option<Vec<f64>>>,
    evaluations: usize,
}

impl<'a, E: AdapterEmbedder + ?Sized> Retriever<'a, E> {
    pub fn new(embedder: &'a E, bank: &'a PrototypeBank, map: &'a ClassTaskMap) -> Result<Self> {
        let b = map.num_tasks();
        if b == 0 {
            return Err(MosError::InvalidInput("retrieval needs at least one task".into()));
        }
        if embedder.num_adapters() < b {
            return Err(MosError::Registry(format!(
                "{} adapters for {b} tasks",
                embedder.num_adapters()
            )));
        }
        for a in 0..b {
            if let Some(class) = (0..map.num_classes()).find(|&c| bank.get(a, c).is_none()) {
                return Err(MosError::MissingPrototype { adapter: a, class });
            }
        }
        Ok(Retriever { embedder, bank, map })
    }

    pub fn num_tasks(&self) -> usize {
        self.map.num_tasks()
    }

    pub fn predict(&self, x: &[f64], adapter: usize) -> Result<Vec<f64>> {
        predict_with_adapter(self.embedder, x, adapter, self.bank, self.map)
    }

    fn memo(&self) -> Memo {
        Memo {
            logits: vec![None; self.num_tasks()],
            evaluations: 0,
        }
    }

    fn logits<'m>(&self, x: &[f64], adapter: usize, memo: &'m mut Memo) -> Result<&'m [f64]> {
        if memo.logits[adapter].is_none() {
            memo.logits[adapter] = Some(self.predict(x, adapter)?);
            memo.evaluations += 1;
        }
        Ok(memo.logits[adapter].as_deref().expect("just filled"))
    }

    fn refine(&self, x: &[f64], max_iter: usize, memo: &mut Memo) -> Result<(usize, RefineTrace)> {
        let budget = max_iter.max(1);
        let mut i = infer_task_id(self.logits(x, 0, memo)?, self.map)?;
        let mut visited = vec![i];
        let finish = |task: usize, visited: Vec<usize>, reason, memo: &Memo| {
            let iterations = visited.len() - 1;
            Ok((
                task,
                RefineTrace {
                    visited,
                    reason,
                    iterations,
                    evaluations: memo.evaluations,
                },
            ))
        };
        loop {
            if memo.logits[i].is_none() && memo.evaluations >= budget {
                return finish(i, visited, TerminalReason::MaxIter, memo);
            }
            let j = infer_task_id(self.logits(x, i, memo)?, self.map)?;
            if j == i {
                return finish(i, visited, TerminalReason::FixedPoint, memo);
            }
            if visited.contains(&j) {
                // the revisited task opens the cycle
                return finish(j, visited, TerminalReason::CycleDetected, memo);
            }
            visited.push(j);
            i = j;
        }
    }

    /// Self-refined task retrieval starting from the first adapter's prediction.
    ///
    /// Never computes more than `min(max_iter, B)` adapter embeddings: results are
    /// memoized per adapter and every step either stops or visits a new task.
    pub fn self_refine(&self, x: &[f64], max_iter: usize) -> Result<(usize, RefineTrace)> {
        self.refine(x, max_iter, &mut self.memo())
    }

    pub fn classify(&self, x: &[f64], selection: Selection, ensemble: bool) -> Result<Prediction> {
        let mut memo = self.memo();
        let initial_task = infer_task_id(self.logits(x, 0, &mut memo)?, self.map)?;
        let (final_task, trace) = match selection {
            Selection::FirstAdapter => (0, None),
            Selection::OneShot => (initial_task, None),
            Selection::SelfRefine { max_iter } => {
                let (j, t) = self.refine(x, max_iter, &mut memo)?;
                (j, Some(t))
            }
            Selection::Oracle(task) => {
                if task >= self.num_tasks() {
                    return Err(MosError::InvalidInput(format!("oracle task {task} not yet seen")));
                }
                (task, None)
            }
        };
        let first_logits = self.logits(x, 0, &mut memo)?.to_vec();
        let selected_logits = self.logits(x, final_task, &mut memo)?.to_vec();
        let top1_first = argmax(&first_logits).unwrap_or(0);
        let top1_selected = argmax(&selected_logits).unwrap_or(0);
        let class = if ensemble {
            let summed: Vec<f64> = first_logits.iter().zip(&selected_logits).map(|(a, b)| a + b).collect();
            argmax(&summed).unwrap_or(0)
        } else {
            top1_selected
        };
        Ok(Prediction {
            class,
            initial_task,
            final_task,
            trace,
            top1_first,
            top1_selected,
            first_logits,
            selected_logits,
        })
    }

    /// `argmax(f(x|𝒜_1) + f(x|𝒜_j))` with `j` from [`Retriever::self_refine`] (budget `B`).
    pub fn ensemble_predict(&self, x: &[f64]) -> Result<(usize, Prediction)> {
        let p = self.classify(x, Selection::SelfRefine { max_iter: self.num_tasks() }, true)?;
        Ok((p.class, p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Embeds by table lookup; ignores `x` except for its first coordinate as a row key.
    struct Table {
        rows: Vec<Vec<Vec<f64>>>,
    }

    impl AdapterEmbedder for Table {
        fn num_adapters(&self) -> usize {
            self.rows[0].len()
        }
        fn embed(&self, x: &[f64], adapter: usize) -> Result<Vec<f64>> {
            Ok(self.rows[x[0] as usize][adapter].clone())
        }
    }

    fn one_hot(n: usize, i: usize) -> Vec<f64> {
        (0..n).map(|k| if k == i { 1.0 } else { 0.0 }).collect()
    }

    /// Two tasks of two classes; every adapter's prototypes are the one-hot basis.
    fn two_task_bank() -> (PrototypeBank, ClassTaskMap) {
        let mut bank = PrototypeBank::new();
        for a in 0..2 {
            for c in 0..4 {
                bank.insert(a, c, one_hot(4, c));
            }
        }
        (bank, ClassTaskMap::from_task_sizes(&[2, 2]))
    }

    #[test]
    fn equal_split_lookup_matches_floor() {
        let map = ClassTaskMap::from_task_sizes(&[10; 10]);
        let mut logits = vec![0.0; 100];
        logits[17] = 1.0;
        assert_eq!(infer_task_id(&logits, &map).unwrap(), 1);
        logits[17] = 0.0;
        logits[0] = 1.0;
        assert_eq!(infer_task_id(&logits, &map).unwrap(), 0);
    }

    #[test]
    fn unequal_split_lookup() {
        let map = ClassTaskMap::from_task_sizes(&[100, 50, 50]);
        let mut logits = vec![0.0; 200];
        logits[120] = 1.0;
        assert_eq!(infer_task_id(&logits, &map).unwrap(), 1);
        assert!(infer_task_id(&logits[..10], &map).is_err());
    }

    #[test]
    fn map_partition_checks() {
        assert!(ClassTaskMap::from_tasks(vec![vec![0, 1], vec![1]]).is_err());
        assert!(ClassTaskMap::from_tasks(vec![vec![0, 5]]).is_err());
        let m = ClassTaskMap::from_tasks(vec![vec![1], vec![0, 2]]).unwrap();
        assert_eq!(m.task_of(0), Some(1));
        assert!(m.prefix(1).unwrap_err().to_string().contains("outside"));
        let m = ClassTaskMap::from_task_sizes(&[3, 2, 4]);
        assert_eq!(m.prefix(2).unwrap(), ClassTaskMap::from_task_sizes(&[3, 2]));
    }

    #[test]
    fn exact_prototype_match_scores_one() {
        let (bank, map) = two_task_bank();
        let table = Table { rows: vec![vec![one_hot(4, 3), one_hot(4, 3)]] };
        let logits = predict_with_adapter(&table, &[0.0], 0, &bank, &map).unwrap();
        assert_eq!(logits, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn immediate_fixed_point() {
        let (bank, map) = two_task_bank();
        let table = Table { rows: vec![vec![one_hot(4, 1), one_hot(4, 3)]] };
        let r = Retriever::new(&table, &bank, &map).unwrap();
        let (j, trace) = r.self_refine(&[0.0], 2).unwrap();
        assert_eq!(j, 0);
        assert_eq!(trace.reason, TerminalReason::FixedPoint);
        assert_eq!(trace.iterations, 0);
        assert_eq!(trace.evaluations, 1);
    }

    #[test]
    fn one_refinement_step() {
        let (bank, map) = two_task_bank();
        // adapter 0 points at class 2 (task 1), adapter 1 agrees
        let table = Table { rows: vec![vec![one_hot(4, 2), one_hot(4, 3)]] };
        let r = Retriever::new(&table, &bank, &map).unwrap();
        let (j, trace) = r.self_refine(&[0.0], 2).unwrap();
        assert_eq!(j, 1);
        assert_eq!(trace.visited, vec![1]);
        assert_eq!(trace.reason, TerminalReason::FixedPoint);
        assert_eq!(trace.evaluations, 2);
    }

    #[test]
    fn two_cycle_returns_first_visited() {
        let (bank, map) = two_task_bank();
        // adapter 0 → task 1, adapter 1 → task 0
        let table = Table { rows: vec![vec![one_hot(4, 2), one_hot(4, 0)]] };
        let r = Retriever::new(&table, &bank, &map).unwrap();
        let (j, trace) = r.self_refine(&[0.0], 2).unwrap();
        assert_eq!(trace.reason, TerminalReason::CycleDetected);
        assert_eq!(trace.visited, vec![1, 0]);
        assert_eq!(j, 1);
        assert!(trace.evaluations <= 2);
    }

    #[test]
    fn budget_exhaustion() {
        let (bank, map) = two_task_bank();
        let table = Table { rows: vec![vec![one_hot(4, 2), one_hot(4, 3)]] };
        let r = Retriever::new(&table, &bank, &map).unwrap();
        let (j, trace) = r.self_refine(&[0.0], 1).unwrap();
        assert_eq!((j, trace.reason, trace.evaluations), (1, TerminalReason::MaxIter, 1));
    }

    #[test]
    fn ensemble_sums_parts() {
        let mut bank = PrototypeBank::new();
        for a in 0..2 {
            bank.insert(a, 0, vec![1.0, 0.0]);
            bank.insert(a, 1, vec![0.0, 1.0]);
        }
        let map = ClassTaskMap::from_task_sizes(&[1, 1]);
        // part 1 favours class 0 (0.9 vs 0.44); its task 0 is a fixed point
        let e0 = vec![0.9, 0.44];
        let table = Table { rows: vec![vec![e0.clone(), vec![0.0, 1.0]]] };
        let r = Retriever::new(&table, &bank, &map).unwrap();
        let (y, p) = r.ensemble_predict(&[0.0]).unwrap();
        assert_eq!((y, p.final_task), (0, 0));

        // b = 1: ensemble equals the single-adapter argmax
        let map1 = ClassTaskMap::from_task_sizes(&[2]);
        let r1 = Retriever::new(&table, &bank, &map1).unwrap();
        let (y1, _) = r1.ensemble_predict(&[0.0]).unwrap();
        assert_eq!(Some(y1), argmax(&r1.predict(&[0.0], 0).unwrap()));
    }

    #[test]
    fn missing_coverage_is_reported() {
        let mut bank = PrototypeBank::new();
        bank.insert(0, 0, vec![1.0]);
        let map = ClassTaskMap::from_task_sizes(&[2]);
        let table = Table { rows: vec![vec![vec![1.0]]] };
        assert!(matches!(
            Retriever::new(&table, &bank, &map),
            Err(MosError::MissingPrototype { adapter: 0, class: 1 })
        ));
    }
}
