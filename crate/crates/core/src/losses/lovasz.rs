//! Jaccard distance as a set function of mispredictions and its Lovász
//! extension, giving the Lovász-Softmax loss.

use ndarray::Array2;

use super::{check_shapes, softmax_backward, LabelMatrix, LossEvaluation};
use crate::error::{Error, Result};

/// Jaccard distance `|M| / |gt ∪ pred|` of a misprediction set `M = gt ⊕ pred`.
/// Zero when both ground truth and prediction are empty.
pub fn jaccard_distance_set(mispredictions: &[bool], ground_truth: &[bool], predictions: &[bool]) -> f64 {
    assert_eq!(mispredictions.len(), ground_truth.len());
    assert_eq!(ground_truth.len(), predictions.len());
    let errors = mispredictions.iter().filter(|m| **m).count();
    let union = ground_truth
        .iter()
        .zip(predictions)
        .filter(|(g, p)| **g || **p)
        .count();
    if union == 0 {
        0.0
    } else {
        errors as f64 / union as f64
    }
}

/// First differences of the Jaccard distance over growing prefixes of
/// `sorted_gt`: entry `i` is `JD({u_1..u_i}) − JD({u_1..u_{i−1}})`, where the
/// prefix is read as the set of mispredicted samples.
pub fn lovasz_grad(sorted_gt: &[bool]) -> Vec<f64> {
    let positives = sorted_gt.iter().filter(|g| **g).count() as f64;
    let mut grad = Vec::with_capacity(sorted_gt.len());
    let (mut missed, mut false_alarms) = (0.0, 0.0);
    let mut previous = 0.0;
    for &g in sorted_gt {
        if g {
            missed += 1.0;
        } else {
            false_alarms += 1.0;
        }
        let intersection = positives - missed;
        let union = positives + false_alarms;
        let jd = 1.0 - intersection / union;
        grad.push(jd - previous);
        previous = jd;
    }
    grad
}

/// Lovász-Softmax loss `1/(K·N) Σ_c Σ_j m_jc · g_j(m_c)` with misprediction
/// `m = 1 − p` on the labeled class and `m = p` elsewhere. Requires one-hot labels.
pub fn lovasz_softmax(posteriors: &Array2<f64>, labels: &LabelMatrix) -> Result<LossEvaluation> {
    let (n, k) = check_shapes(posteriors, labels)?;
    let classes: Vec<usize> = (0..n)
        .map(|j| labels.label(j).ok_or(Error::NotOneHot(j)))
        .collect::<Result<_>>()?;
    let scale = 1.0 / (k * n) as f64;

    let mut value = 0.0;
    let mut grad_p = Array2::zeros((n, k));
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for c in 0..k {
        let miss: Vec<f64> = (0..n)
            .map(|j| {
                let p = posteriors[[j, c]];
                if classes[j] == c {
                    1.0 - p
                } else {
                    p
                }
            })
            .collect();
        order.clear();
        order.extend(0..n);
        order.sort_by(|&a, &b| miss[b].total_cmp(&miss[a]));
        let sorted_gt: Vec<bool> = order.iter().map(|&j| classes[j] == c).collect();
        let g = lovasz_grad(&sorted_gt);
        for (&j, gj) in order.iter().zip(&g) {
            value += scale * miss[j] * gj;
            let sign = if classes[j] == c { -1.0 } else { 1.0 };
            grad_p[[j, c]] = scale * gj * sign;
        }
    }
    Ok(LossEvaluation {
        value,
        grad_logits: softmax_backward(posteriors, &grad_p),
        terms: None,
    })
}
