//! Expected-free-energy classification loss and the free-energy decompositions
//! it is built from.
//!
//! The loss has two terms per sample:
//!
//! * uncertainty `−Σ_c l_c · p_c · ln p_c`
//! * expected complexity `Σ_{c∈cand} a_c ln(a_c/p_c) + S_a ln(S_a/S_p)`, where
//!   `S_a`/`S_p` pool the prior/posterior mass of the non-candidate classes.
//!
//! Both are scaled by `1/(K·N)`. The candidate sets come from the Kelly step of
//! the same iteration and are held fixed while differentiating.

use ndarray::Array2;

use super::{check_shapes, ln_clamped, ln_clamped_grad, softmax_backward, LabelMatrix, LossEvaluation, LN_FLOOR};
use crate::error::{Error, Result};
use crate::kelly::ProbabilityVector;

/// The two terms of the expected-free-energy loss, already scaled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfeTerms {
    pub uncertainty: f64,
    pub expected_complexity: f64,
}

/// Expected-free-energy loss and its logit gradient.
///
/// `priors` holds one prior row per sample; `candidate_sets[j]` lists the
/// candidate classes of sample `j`.
pub fn efe_loss(
    posteriors: &Array2<f64>,
    labels: &LabelMatrix,
    priors: &Array2<f64>,
    candidate_sets: &[Vec<usize>],
) -> Result<LossEvaluation> {
    let (n, k) = check_shapes(posteriors, labels)?;
    if priors.dim() != (n, k) {
        return Err(Error::ShapeMismatch(format!("priors {:?} for batch ({n}, {k})", priors.dim())));
    }
    if candidate_sets.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} candidate sets for {n} samples",
            candidate_sets.len()
        )));
    }
    let scale = 1.0 / (k * n) as f64;
    let l = labels.rows();
    let mut uncertainty = 0.0;
    let mut complexity = 0.0;
    let mut grad_p = Array2::zeros((n, k));
    let mut is_candidate = vec![false; k];

    for j in 0..n {
        for c in 0..k {
            let lab = l[[j, c]];
            if lab == 0.0 {
                continue;
            }
            let p = posteriors[[j, c]];
            uncertainty -= scale * lab * p * ln_clamped(p);
            // d/dp [p ln p] with the clamped logarithm
            let d = ln_clamped(p) + p * ln_clamped_grad(p);
            grad_p[[j, c]] -= scale * lab * d;
        }

        is_candidate.iter_mut().for_each(|b| *b = false);
        for &c in &candidate_sets[j] {
            if c >= k {
                return Err(Error::Domain(format!("candidate class {c} out of range")));
            }
            is_candidate[c] = true;
        }
        let (mut rest_prior, mut rest_post) = (0.0, 0.0);
        for c in 0..k {
            let (a, p) = (priors[[j, c]], posteriors[[j, c]]);
            if is_candidate[c] {
                let p = p.max(LN_FLOOR);
                complexity += scale * a * (a / p).ln();
                grad_p[[j, c]] -= scale * a / p;
            } else {
                rest_prior += a;
                rest_post += p;
            }
        }
        if rest_prior > 0.0 {
            let rest_post = rest_post.max(LN_FLOOR);
            complexity += scale * rest_prior * (rest_prior / rest_post).ln();
            let d = -scale * rest_prior / rest_post;
            for c in (0..k).filter(|&c| !is_candidate[c]) {
                grad_p[[j, c]] += d;
            }
        }
    }

    Ok(LossEvaluation {
        value: uncertainty + complexity,
        grad_logits: softmax_backward(posteriors, &grad_p),
        terms: Some(EfeTerms {
            uncertainty,
            expected_complexity: complexity,
        }),
    })
}

/// Terms of the variational free energy of one categorical belief.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VfeDecomposition {
    pub complexity: f64,
    pub accuracy: f64,
    pub entropy: f64,
    pub cross_entropy: f64,
}

impl VfeDecomposition {
    /// Complexity minus accuracy.
    pub fn free_energy(&self) -> f64 {
        self.complexity - self.accuracy
    }

    /// The same quantity through the entropy route: cross-entropy minus entropy.
    pub fn free_energy_via_entropy(&self) -> f64 {
        self.cross_entropy - self.entropy
    }
}

/// Splits the variational free energy of the state distribution `p(s)`
/// against its approximation `q(s)` and the likelihood `q(o|s)`.
pub fn vfe_decompose(
    state_dist: &ProbabilityVector,
    approx_state_dist: &ProbabilityVector,
    approx_likelihood: &[f64],
) -> Result<VfeDecomposition> {
    let k = state_dist.len();
    if approx_state_dist.len() != k || approx_likelihood.len() != k {
        return Err(Error::ShapeMismatch("distributions differ in length".into()));
    }
    if approx_likelihood.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
        return Err(Error::Domain("likelihood entries must lie in (0, 1]".into()));
    }
    let mut out = VfeDecomposition {
        complexity: 0.0,
        accuracy: 0.0,
        entropy: 0.0,
        cross_entropy: 0.0,
    };
    for s in 0..k {
        let (p, q, lik) = (state_dist[s], approx_state_dist[s], approx_likelihood[s]);
        out.complexity += p * (p.ln() - q.ln());
        out.accuracy += p * lik.ln();
        out.entropy -= p * p.ln();
        out.cross_entropy -= p * (q.ln() + lik.ln());
    }
    Ok(out)
}

/// Expected complexity and uncertainty of the expected free energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfeDecomposition {
    pub expected_complexity: f64,
    pub uncertainty: f64,
}

/// Splits the expected free energy of predicted observations `q(o|π)` against
/// preferred observations `p(o)`, weighting the entropy of `q` by the state
/// distribution.
pub fn efe_decompose(
    preferred_obs: &ProbabilityVector,
    predicted_obs: &ProbabilityVector,
    state_dist: &ProbabilityVector,
) -> Result<EfeDecomposition> {
    if preferred_obs.len() != predicted_obs.len() {
        return Err(Error::ShapeMismatch("observation distributions differ in length".into()));
    }
    let expected_complexity = preferred_obs
        .values()
        .iter()
        .zip(predicted_obs.values())
        .map(|(p, q)| p * (p.ln() - q.ln()))
        .sum();
    let entropy: f64 = predicted_obs.values().iter().map(|q| -q * q.ln()).sum();
    let state_mass: f64 = state_dist.values().iter().sum();
    Ok(EfeDecomposition {
        expected_complexity,
        uncertainty: state_mass * entropy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kelly::{candidate_labels, kelly_objective_value};
    use ndarray::array;

    fn pv(v: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn matching_prior_has_no_complexity() {
        let p = array![[0.5, 0.5]];
        let l = LabelMatrix::one_hot(&[0], 2).unwrap();
        let e = efe_loss(&p, &l, &p, &[vec![0]]).unwrap();
        let t = e.terms.unwrap();
        assert_eq!(t.expected_complexity, 0.0);
        assert!((t.uncertainty - (-0.5 * 0.5 * 0.5f64.ln())).abs() < 1e-15);
        assert!((t.uncertainty - 0.1733).abs() < 1e-4);
    }

    #[test]
    fn complexity_equals_scaled_kelly_objective() {
        let prior = pv(&[0.6, 0.3, 0.1]);
        let post = pv(&[0.2, 0.3, 0.5]);
        let sol = candidate_labels(&prior, &post, None).unwrap();
        let kelly = kelly_objective_value(&sol, &prior, &post);
        let p = Array2::from_shape_vec((1, 3), post.values().to_vec()).unwrap();
        let a = Array2::from_shape_vec((1, 3), prior.values().to_vec()).unwrap();
        let l = LabelMatrix::one_hot(&[0], 3).unwrap();
        let e = efe_loss(&p, &l, &a, &[sol.candidates.clone()]).unwrap();
        let c = e.terms.unwrap().expected_complexity;
        assert!((c - kelly / 3.0).abs() < 1e-12);
        assert!((c - 0.1661).abs() < 1e-4);
    }

    #[test]
    fn candidate_count_mismatch() {
        let p = array![[0.5, 0.5], [0.5, 0.5]];
        let l = LabelMatrix::uniform(2, 2);
        assert!(efe_loss(&p, &l, &p, &[vec![0]]).is_err());
    }

    #[test]
    fn vfe_examples() {
        let p = pv(&[0.5, 0.5]);
        let d = vfe_decompose(&p, &p, &[0.9, 0.4]).unwrap();
        assert_eq!(d.complexity, 0.0);
        let d = vfe_decompose(&p, &pv(&[0.25, 0.75]), &[1.0, 1.0]).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((d.complexity - expected).abs() < 1e-15);
        assert!((d.complexity - 0.1438).abs() < 1e-4);
        assert!((d.free_energy() - d.free_energy_via_entropy()).abs() < 1e-12);
        assert!(vfe_decompose(&p, &p, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn efe_decompose_examples() {
        let q = pv(&[0.1, 0.2, 0.3, 0.4]);
        let s = ProbabilityVector::uniform(4);
        assert_eq!(efe_decompose(&q, &q, &s).unwrap().expected_complexity, 0.0);
        let u = ProbabilityVector::uniform(4);
        assert!((efe_decompose(&q, &u, &s).unwrap().uncertainty - 4f64.ln()).abs() < 1e-15);
        let d = efe_decompose(&pv(&[1.0, 0.0]), &pv(&[0.5, 0.5]), &pv(&[0.5, 0.5])).unwrap();
        assert!((d.expected_complexity - 2f64.ln()).abs() < 1e-6);
    }
}
