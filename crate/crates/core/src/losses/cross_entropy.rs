//! Cross-entropy, its class/sample weighted form, the focal (modulated) loss
//! and the weighted focal loss. All four are evaluated by one kernel:
//!
//! `L = −1/(K·N) · Σ_j Σ_c w_jc · (1 − p_jc)^γ · l_jc · ln p_jc`
//!
//! with `w ≡ 1` and `γ = 0` for plain cross-entropy.

use ndarray::Array2;

use super::{check_shapes, ln_clamped, ln_clamped_grad, softmax_backward, LabelMatrix, LossEvaluation};
use crate::error::{Error, Result};

/// Weighting and modulation settings for the weighted losses.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSpec {
    /// Explicit per-class weights. When absent they are derived from the
    /// batch class counts as `Σ_k n_k / (n_c + 1e-8)`.
    pub class_weights: Option<Vec<f64>>,
    /// Explicit per-sample weights. When absent they are derived from
    /// `border_distances` if given, and are zero otherwise.
    pub sample_weights: Option<Vec<f64>>,
    pub gamma_mod: f64,
    pub w_mo: f64,
    pub sigma_mo: f64,
    /// Distances of each sample to the nearest and second-nearest class border.
    pub border_distances: Option<(Vec<f64>, Vec<f64>)>,
}

impl Default for WeightSpec {
    fn default() -> Self {
        WeightSpec {
            class_weights: None,
            sample_weights: None,
            gamma_mod: 2.0,
            w_mo: 10.0,
            sigma_mo: 5.0,
            border_distances: None,
        }
    }
}

impl WeightSpec {
    fn validate(&self) -> Result<()> {
        if !(self.gamma_mod >= 0.0) {
            return Err(Error::Domain(format!("gamma_mod {} must be >= 0", self.gamma_mod)));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::Domain("class weights must be positive".into()));
            }
        }
        Ok(())
    }

    fn resolve_class_weights(&self, class_counts: &[usize], k: usize) -> Result<Vec<f64>> {
        let w = match &self.class_weights {
            Some(w) => w.clone(),
            None => class_weights_from_counts(class_counts),
        };
        if w.len() != k {
            return Err(Error::ShapeMismatch(format!("{} class weights for {k} classes", w.len())));
        }
        Ok(w)
    }

    fn resolve_sample_weights(&self, n: usize) -> Result<Vec<f64>> {
        let w = match (&self.sample_weights, &self.border_distances) {
            (Some(w), _) => w.clone(),
            (None, Some((d1, d2))) => {
                if d1.len() != d2.len() {
                    return Err(Error::ShapeMismatch("border distance vectors differ in length".into()));
                }
                d1.iter()
                    .zip(d2)
                    .map(|(&a, &b)| morphological_weight(a, b, self.w_mo, self.sigma_mo))
                    .collect()
            }
            (None, None) => vec![0.0; n],
        };
        if w.len() != n {
            return Err(Error::ShapeMismatch(format!("{} sample weights for {n} samples", w.len())));
        }
        Ok(w)
    }
}

/// Inverse-frequency class weights `Σ_k n_k / (n_c + 1e-8)`.
pub fn class_weights_from_counts(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    counts
        .iter()
        .map(|&n| total as f64 / (n as f64 + 1e-8))
        .collect()
}

/// Border-distance sample weight `w_mo · exp(−(d1 + d2)² / (2 σ_mo²))`.
pub fn morphological_weight(d1: f64, d2: f64, w_mo: f64, sigma_mo: f64) -> f64 {
    w_mo * (-(d1 + d2).powi(2) / (2.0 * sigma_mo * sigma_mo)).exp()
}

/// Class-balanced weight from the effective number `n > 1` of a class with
/// `count` samples: `(1 − β) / (1 − β^count)` with `β = (n − 1)/n`.
pub fn class_balanced_weight(effective_number: f64, count: usize) -> Result<f64> {
    if count == 0 {
        return Err(Error::Domain("class count must be at least 1".into()));
    }
    if !(effective_number > 1.0) || !effective_number.is_finite() {
        return Err(Error::Domain(format!(
            "effective number {effective_number} must be a finite value above 1"
        )));
    }
    let beta = (effective_number - 1.0) / effective_number;
    Ok((1.0 - beta) / (1.0 - beta.powi(count as i32)))
}

fn modulated_cross_entropy(
    posteriors: &Array2<f64>,
    labels: &LabelMatrix,
    weight: impl Fn(usize, usize) -> f64,
    gamma: f64,
) -> Result<LossEvaluation> {
    let (n, k) = check_shapes(posteriors, labels)?;
    let scale = 1.0 / (k * n) as f64;
    let l = labels.rows();
    let mut value = 0.0;
    let mut grad_p = Array2::zeros((n, k));
    for j in 0..n {
        for c in 0..k {
            let lab = l[[j, c]];
            if lab == 0.0 {
                continue;
            }
            let p = posteriors[[j, c]];
            let w = weight(j, c) * lab;
            let log_p = ln_clamped(p);
            let rest = (1.0 - p).max(0.0);
            let modulation = rest.powf(gamma);
            value -= scale * w * modulation * log_p;
            // d/dp [(1-p)^γ ln p] = (1-p)^γ / p − γ (1-p)^(γ−1) ln p
            let mut d = modulation * ln_clamped_grad(p);
            if gamma != 0.0 {
                d -= gamma * rest.max(super::LN_FLOOR).powf(gamma - 1.0) * log_p;
            }
            grad_p[[j, c]] = -scale * w * d;
        }
    }
    Ok(LossEvaluation {
        value,
        grad_logits: softmax_backward(posteriors, &grad_p),
        terms: None,
    })
}

/// Softmax cross-entropy, `−1/(K·N) Σ l ln p`.
pub fn cross_entropy(posteriors: &Array2<f64>, labels: &LabelMatrix) -> Result<LossEvaluation> {
    modulated_cross_entropy(posteriors, labels, |_, _| 1.0, 0.0)
}

/// Cross-entropy with per-term weight `w_c + w_j` (class weight plus sample weight).
pub fn weighted_cross_entropy(
    posteriors: &Array2<f64>,
    labels: &LabelMatrix,
    weights: &WeightSpec,
    class_counts: &[usize],
) -> Result<LossEvaluation> {
    weights.validate()?;
    let (n, k) = check_shapes(posteriors, labels)?;
    let class_w = weights.resolve_class_weights(class_counts, k)?;
    let sample_w = weights.resolve_sample_weights(n)?;
    modulated_cross_entropy(posteriors, labels, |j, c| class_w[c] + sample_w[j], 0.0)
}

/// Focal loss with modulation factor `gamma_mod`.
pub fn focal(posteriors: &Array2<f64>, labels: &LabelMatrix, gamma_mod: f64) -> Result<LossEvaluation> {
    if !(gamma_mod >= 0.0) {
        return Err(Error::Domain(format!("gamma_mod {gamma_mod} must be >= 0")));
    }
    modulated_cross_entropy(posteriors, labels, |_, _| 1.0, gamma_mod)
}

/// Focal loss with per-class weights; the modulation factor is `weights.gamma_mod`.
pub fn weighted_focal(
    posteriors: &Array2<f64>,
    labels: &LabelMatrix,
    weights: &WeightSpec,
    class_counts: &[usize],
) -> Result<LossEvaluation> {
    weights.validate()?;
    let (_, k) = check_shapes(posteriors, labels)?;
    let class_w = weights.resolve_class_weights(class_counts, k)?;
    modulated_cross_entropy(posteriors, labels, |_, c| class_w[c], weights.gamma_mod)
}
