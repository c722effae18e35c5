use crate::backbone::TaskHead;
use crate::error::{MosError, Result};
use crate::numerics::{sample_gaussian, sampling_factor, Matrix, Rng};
use crate::training::{cosine_lr, GaussianStats, MomentumSgd, TrainConfig};

/// Epochs of the head fine-tune on replayed features.
pub const ALIGN_EPOCHS: usize = 5;
/// The fine-tune runs at `lr0 / ALIGN_LR_DIVISOR`.
pub const ALIGN_LR_DIVISOR: f64 = 10.0;

/// Appends zero columns for `new_classes` not already covered by `head`.
pub fn extend_head(head: &mut TaskHead, new_classes: &[usize]) {
    let added: Vec<usize> = new_classes
        .iter()
        .copied()
        .filter(|c| head.column_of(*c).is_none())
        .collect();
    if added.is_empty() {
        return;
    }
    let d = head.weights.rows();
    let old_k = head.classes.len();
    let mut w = Matrix::zeros(d, old_k + added.len());
    for i in 0..d {
        w.row_mut(i)[..old_k].copy_from_slice(head.weights.row(i));
    }
    head.weights = w;
    head.classes.extend(added);
}

/// Fine-tunes a linear head over all seen classes on features replayed from the stored
/// class Gaussians. Adapters are not involved. A no-op unless `config.align_classifier`.
///
/// Each class contributes `align_multiplier × batch_size` samples. Classes whose
/// covariance does not factor are sampled per dimension from the diagonal.
pub fn align_classifier(head: &mut TaskHead, stats: &GaussianStats, config: &TrainConfig, rng: &mut Rng) -> Result<()> {
    if !config.align_classifier {
        return Ok(());
    }
    config.validate()?;
    let per_class = config.align_multiplier * config.batch_size;
    let mut features: Vec<Vec<f64>> = Vec::with_capacity(per_class * head.classes.len());
    let mut columns: Vec<usize> = Vec::with_capacity(features.capacity());
    for (col, &class) in head.classes.iter().enumerate() {
        let g = stats
            .get(class)
            .ok_or_else(|| MosError::InvalidInput(format!("no stored statistics for class {class}")))?;
        if g.mean.len() != head.weights.rows() {
            return Err(MosError::dims("class statistics and head differ in dimension"));
        }
        let factor = sampling_factor(&g.covariance)?;
        for x in sample_gaussian(&g.mean, &factor, per_class, rng)? {
            features.push(x);
            columns.push(col);
        }
    }
    if features.is_empty() {
        return Ok(());
    }

    let n = features.len();
    let k = head.classes.len();
    let lr0 = config.lr0 / ALIGN_LR_DIVISOR;
    let total_steps = ALIGN_EPOCHS * n.div_ceil(config.batch_size);
    let mut opt = MomentumSgd::new(config.momentum, head.weights.as_slice().len());
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for _ in 0..ALIGN_EPOCHS {
        rng.shuffle(&mut order);
        for batch in order.chunks(config.batch_size) {
            let mut grad = Matrix::zeros(head.weights.rows(), k);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let logits = head.weights.vec_mul(&features[i])?;
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                let mut delta: Vec<f64> = exps.iter().map(|e| e / total * scale).collect();
                delta[columns[i]] -= scale;
                grad.add_outer(&features[i], &delta, 1.0);
            }
            let lr = cosine_lr(step, total_steps, lr0);
            opt.step(head.weights.as_mut_slice().iter_mut(), grad.as_slice().iter().copied(), lr);
            step += 1;
        }
    }
    Ok(())
}
