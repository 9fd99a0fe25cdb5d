//! Classification objectives evaluated on softmax posteriors.
//!
//! Every loss returns its value together with the gradient with respect to the
//! pre-softmax outputs (logits). Losses first compute the gradient with respect
//! to the posteriors and then chain it through the softmax Jacobian with
//! [`softmax_backward`].

mod cross_entropy;
mod dice;
mod efe;
mod lovasz;

pub use cross_entropy::{
    class_balanced_weight, class_weights_from_counts, cross_entropy, focal, morphological_weight,
    weighted_cross_entropy, weighted_focal, WeightSpec,
};
pub use dice::{dice_loss, dice_similarity};
pub use efe::{efe_decompose, efe_loss, vfe_decompose, EfeDecomposition, EfeTerms, VfeDecomposition};
pub use lovasz::{jaccard_distance_set, lovasz_grad, lovasz_softmax};

use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

/// Logarithms are evaluated on arguments clamped to at least this value.
pub const LN_FLOOR: f64 = 1e-12;

pub(crate) fn ln_clamped(x: f64) -> f64 {
    x.max(LN_FLOOR).ln()
}

/// Derivative of [`ln_clamped`].
pub(crate) fn ln_clamped_grad(x: f64) -> f64 {
    if x > LN_FLOOR {
        1.0 / x
    } else {
        0.0
    }
}

/// Value of a loss and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEvaluation {
    pub value: f64,
    pub grad_logits: Array2<f64>,
    /// Separate terms of the expected-free-energy loss; `None` for the others.
    pub terms: Option<EfeTerms>,
}

/// Vectorized reference labels, one row per sample: a one-hot row when the
/// label is known, a uniform `1/K` row when it is not.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    rows: Array2<f64>,
}

impl LabelMatrix {
    pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Self> {
        let mut rows = Array2::zeros((labels.len(), num_classes));
        for (j, &l) in labels.iter().enumerate() {
            if l >= num_classes {
                return Err(Error::Domain(format!("label {l} out of range for {num_classes} classes")));
            }
            rows[[j, l]] = 1.0;
        }
        Ok(LabelMatrix { rows })
    }

    pub fn uniform(num_samples: usize, num_classes: usize) -> Self {
        LabelMatrix {
            rows: Array2::from_elem((num_samples, num_classes), 1.0 / num_classes as f64),
        }
    }

    /// Accepts a matrix whose rows are each exactly one-hot or exactly uniform.
    pub fn from_rows(rows: Array2<f64>) -> Result<Self> {
        let k = rows.ncols();
        for (j, row) in rows.axis_iter(Axis(0)).enumerate() {
            let uniform = row.iter().all(|&v| v == 1.0 / k as f64);
            if !uniform && one_hot_index(row).is_none() {
                return Err(Error::Domain(format!("label row {j} is neither one-hot nor uniform")));
            }
        }
        Ok(LabelMatrix { rows })
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        LabelMatrix {
            rows: self.rows.select(Axis(0), indices),
        }
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn num_samples(&self) -> usize {
        self.rows.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.rows.ncols()
    }

    /// Class index of a one-hot row.
    pub fn label(&self, row: usize) -> Option<usize> {
        one_hot_index(self.rows.row(row))
    }

    /// Per-class number of one-hot rows.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for j in 0..self.num_samples() {
            if let Some(c) = self.label(j) {
                counts[c] += 1;
            }
        }
        counts
    }
}

fn one_hot_index(row: ArrayView1<f64>) -> Option<usize> {
    let mut hot = None;
    for (c, &v) in row.iter().enumerate() {
        if v == 1.0 && hot.is_none() {
            hot = Some(c);
        } else if v != 0.0 {
            return None;
        }
    }
    hot
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Array2<f64>) -> Result<Array2<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
    Ok(out)
}

/// Chains a gradient with respect to softmax outputs back to the logits:
/// `∂L/∂z_k = p_k (∂L/∂p_k − Σ_c p_c ∂L/∂p_c)`.
pub fn softmax_backward(posteriors: &Array2<f64>, grad_posteriors: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(posteriors.raw_dim());
    for ((p, g), mut o) in posteriors
        .axis_iter(Axis(0))
        .zip(grad_posteriors.axis_iter(Axis(0)))
        .zip(out.axis_iter_mut(Axis(0)))
    {
        let inner: f64 = p.iter().zip(g.iter()).map(|(p, g)| p * g).sum();
        for ((o, p), g) in o.iter_mut().zip(p.iter()).zip(g.iter()) {
            *o = p * (g - inner);
        }
    }
    out
}

pub(crate) fn check_shapes(posteriors: &Array2<f64>, labels: &LabelMatrix) -> Result<(usize, usize)> {
    if posteriors.dim() != labels.rows().dim() {
        return Err(Error::ShapeMismatch(format!(
            "posteriors {:?} vs labels {:?}",
            posteriors.dim(),
            labels.rows().dim()
        )));
    }
    let (n, k) = posteriors.dim();
    if n == 0 || k == 0 {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    Ok((n, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_examples() {
        let p = softmax(&array![[0.0, 0.0, 0.0]]).unwrap();
        for v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&array![[2f64.ln(), 0.0]]).unwrap();
        assert!((p[[0, 0]] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[[0, 1]] - 1.0 / 3.0).abs() < 1e-15);
        let p = softmax(&array![[1000.0, 0.0]]).unwrap();
        assert!((p[[0, 0]] - 1.0).abs() < 1e-15 && p[[0, 1]] < 1e-300);
        assert!(softmax(&array![[f64::NAN, 0.0]]).is_err());
    }

    #[test]
    fn softmax_is_monotone() {
        let p = softmax(&array![[0.3, -1.2, 0.9, 0.9]]).unwrap();
        assert!(p[[0, 1]] < p[[0, 0]] && p[[0, 0]] < p[[0, 2]]);
        assert_eq!(p[[0, 2]], p[[0, 3]]);
    }

    #[test]
    fn label_rows_validated() {
        assert!(LabelMatrix::from_rows(array![[0.0, 1.0], [0.5, 0.5]]).is_ok());
        assert!(LabelMatrix::from_rows(array![[0.3, 0.7]]).is_err());
        assert!(LabelMatrix::one_hot(&[0, 3], 3).is_err());
        let l = LabelMatrix::one_hot(&[0, 2, 2], 3).unwrap();
        assert_eq!(l.class_counts(), vec![1, 0, 2]);
        assert_eq!(LabelMatrix::uniform(2, 4).label(0), None);
    }
}
