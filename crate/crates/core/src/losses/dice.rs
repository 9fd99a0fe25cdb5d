//! Soft DICE surrogate `(2/K) Σ_c Σ_j l·p / Σ_j (l² + p²)`.

use ndarray::Array2;

use super::{check_shapes, softmax_backward, LabelMatrix, LossEvaluation};
use crate::error::Result;

/// DICE similarity (to be maximized) and its gradient with respect to the
/// logits. A class whose labels and posteriors are all zero counts as a
/// perfect match (per-class DICE of 1).
pub fn dice_similarity(posteriors: &Array2<f64>, labels: &LabelMatrix) -> Result<LossEvaluation> {
    let (n, k) = check_shapes(posteriors, labels)?;
    let l = labels.rows();
    let scale = 2.0 / k as f64;
    let mut value = 0.0;
    let mut grad_p = Array2::zeros((n, k));
    for c in 0..k {
        let mut overlap = 0.0;
        let mut mass = 0.0;
        for j in 0..n {
            let (lab, p) = (l[[j, c]], posteriors[[j, c]]);
            overlap += lab * p;
            mass += lab * lab + p * p;
        }
        if mass == 0.0 {
            value += scale * 0.5;
            continue;
        }
        value += scale * overlap / mass;
        for j in 0..n {
            let (lab, p) = (l[[j, c]], posteriors[[j, c]]);
            grad_p[[j, c]] = scale * (lab * mass - 2.0 * overlap * p) / (mass * mass);
        }
    }
    Ok(LossEvaluation {
        value,
        grad_logits: softmax_backward(posteriors, &grad_p),
        terms: None,
    })
}

/// `1 − dice_similarity`, the minimization target used for training.
pub fn dice_loss(posteriors: &Array2<f64>, labels: &LabelMatrix) -> Result<LossEvaluation> {
    let sim = dice_similarity(posteriors, labels)?;
    Ok(LossEvaluation {
        value: 1.0 - sim.value,
        grad_logits: -sim.grad_logits,
        terms: None,
    })
}
