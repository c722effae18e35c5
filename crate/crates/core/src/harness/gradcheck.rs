//! Central finite differences against the analytic adapter and head gradients.

use serde::Serialize;

use crate::backbone::{AdapterSet, BackboneConfig, FrozenBackbone, TaskHead};
use crate::error::Result;
use crate::numerics::{Matrix, Rng};

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOLERANCE: f64 = 1e-5;
pub const ABS_FLOOR: f64 = 1e-8;

/// One randomly drawn problem.
#[derive(Debug, Clone)]
pub struct GradProblem {
    pub backbone: FrozenBackbone,
    pub adapter: AdapterSet,
    pub head: TaskHead,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl GradProblem {
    /// D ≤ 16, d ≤ 32, h ≤ 32, r ≤ 8, L ≤ 3, 2 to 5 classes, batch ≤ 8.
    pub fn random(rng: &mut Rng) -> Result<Self> {
        let dim = |rng: &mut Rng, max: usize| 1 + rng.below(max);
        let config = BackboneConfig {
            use_identity_residual: rng.uniform() < 0.5,
            init_seed: rng.next_u64(),
            init_scale: rng.uniform_range(0.1, 0.5),
            checkpoint: None,
            ..BackboneConfig::new(dim(rng, 16), dim(rng, 32), dim(rng, 32), dim(rng, 3))
        };
        let backbone = FrozenBackbone::build(&config)?;
        let (d, r) = (config.embed_dim, dim(rng, 8));
        let mut adapter = AdapterSet::zeros(0, config.num_blocks, d, r);
        adapter.values_mut().for_each(|v| *v = rng.uniform_range(-0.3, 0.3));
        let k = 2 + rng.below(4);
        let first_class = rng.below(20);
        let head = TaskHead::new(
            Matrix::from_fn(d, k, |_, _| rng.uniform_range(-0.5, 0.5)),
            (first_class..first_class + k).collect(),
        )?;
        let batch = dim(rng, 8);
        let inputs = (0..batch)
            .map(|_| (0..config.input_dim).map(|_| rng.standard_normal()).collect())
            .collect();
        let labels = (0..batch).map(|_| first_class + rng.below(k)).collect();
        Ok(GradProblem {
            backbone,
            adapter,
            head,
            inputs,
            labels,
        })
    }

    fn batch(&self) -> Vec<&[f64]> {
        self.inputs.iter().map(Vec::as_slice).collect()
    }

    /// Mean softmax cross-entropy, computed independently of the backward pass.
    pub fn loss(&self, adapter: &AdapterSet, head: &TaskHead) -> Result<f64> {
        let mut total = 0.0;
        for (x, &y) in self.inputs.iter().zip(&self.labels) {
            let z = self.backbone.forward_logits(x, adapter, head)?;
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - z[head.column_of(y).expect("label in head")];
        }
        Ok(total / self.inputs.len() as f64)
    }

    fn patterns(&self, adapter: &AdapterSet) -> Result<Vec<Vec<bool>>> {
        self.inputs
            .iter()
            .map(|x| Ok(self.backbone.forward_trace(x, adapter)?.activation_pattern()))
            .collect()
    }
}

/// True when `analytic` and `numeric` agree to the relative tolerance or the absolute floor.
pub fn entry_matches(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= ABS_FLOOR || diff <= REL_TOLERANCE * analytic.abs().max(numeric.abs())
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub problems: usize,
    pub entries_checked: usize,
    /// Adapter entries whose perturbation flipped a ReLU and were not compared.
    pub entries_skipped: usize,
    pub failures: usize,
    pub max_relative_error: f64,
    pub max_abs_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.entries_checked > 0
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        self.entries_checked += 1;
        self.failures += usize::from(!entry_matches(analytic, numeric));
        let abs = (analytic - numeric).abs();
        self.max_abs_error = self.max_abs_error.max(abs);
        if abs > ABS_FLOOR {
            self.max_relative_error = self.max_relative_error.max(relative_error(analytic, numeric));
        }
    }
}

/// Compares every adapter and head gradient entry of `p` with central differences.
pub fn check_problem(p: &GradProblem, report: &mut GradcheckReport) -> Result<()> {
    let (_, grads) = p.backbone.backward(&p.batch(), &p.labels, &p.adapter, &p.head)?;
    let base_pattern = p.patterns(&p.adapter)?;

    let analytic: Vec<f64> = grads.adapter.values().collect();
    let mut adapter = p.adapter.clone();
    for (i, &g) in analytic.iter().enumerate() {
        let original = adapter.values().nth(i).expect("index in range");
        let mut eval = |value: f64| -> Result<(f64, bool)> {
            *adapter.values_mut().nth(i).expect("index in range") = value;
            let kinked = p.patterns(&adapter)? != base_pattern;
            Ok((p.loss(&adapter, &p.head)?, kinked))
        };
        let (plus, k1) = eval(original + FD_STEP)?;
        let (minus, k2) = eval(original - FD_STEP)?;
        *adapter.values_mut().nth(i).expect("index in range") = original;
        if k1 || k2 {
            report.entries_skipped += 1;
            continue;
        }
        report.record(g, (plus - minus) / (2.0 * FD_STEP));
    }

    let mut head = p.head.clone();
    for i in 0..head.weights.as_slice().len() {
        let original = head.weights.as_slice()[i];
        head.weights.as_mut_slice()[i] = original + FD_STEP;
        let plus = p.loss(&p.adapter, &head)?;
        head.weights.as_mut_slice()[i] = original - FD_STEP;
        let minus = p.loss(&p.adapter, &head)?;
        head.weights.as_mut_slice()[i] = original;
        report.record(grads.head.as_slice()[i], (plus - minus) / (2.0 * FD_STEP));
    }
    report.problems += 1;
    Ok(())
}

/// Checks `problems` random configurations drawn from `seed`.
pub fn run_gradcheck(problems: usize, seed: u64) -> Result<GradcheckReport> {
    let mut rng = Rng::new(seed);
    let mut report = GradcheckReport::default();
    for _ in 0..problems {
        let p = GradProblem::random(&mut rng)?;
        check_problem(&p, &mut report)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerance_rule() {
        assert!(entry_matches(1.0, 1.0 + 5e-6));
        assert!(!entry_matches(1.0, 1.0 + 2e-5));
        assert!(entry_matches(1e-12, 5e-9));
        assert!(!entry_matches(0.0, 2e-8));
    }

    #[test]
    fn a_few_problems_pass() {
        let r = run_gradcheck(3, 11).unwrap();
        assert_eq!(r.problems, 3);
        assert!(r.passed(), "{r:?}");
    }
}
