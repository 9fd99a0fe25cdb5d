//! Generalized (multi-outcome) Kelly allocation for one sample.
//!
//! Each class is a horse: the prior is its win probability and the network's
//! posterior is the bettors' collective belief. The optimal allocation has a
//! closed form once the set of backed classes (the candidate labels) is known,
//! and that set is found greedily by admitting classes in descending order of
//! `prior / posterior` while the ratio beats the unspent fraction.
//!
//! The growth objective used throughout is the one the bettor maximizes,
//! `G(g) = Σ_c a_c · ln(1 − Σ_k g_k + g_c / p_c)`.

use crate::error::{Error, Result};

/// Entries are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before renormalizing.
pub const PROB_FLOOR: f64 = 1e-8;

/// Accepted deviation of the raw input sum from 1.
const SUM_TOLERANCE: f64 = 1e-6;

/// Largest class count the exhaustive grid oracle accepts.
pub const ORACLE_MAX_CLASSES: usize = 4;

/// A categorical distribution with every entry strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    /// Validates `values` (finite, non-negative, summing to 1 within 1e-6),
    /// clamps each entry to `[1e-8, 1 - 1e-8]` and renormalizes.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidProbability("empty vector".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidProbability(format!(
                "entry {v} is negative or non-finite"
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidProbability(format!(
                "entries sum to {sum}, expected 1"
            )));
        }
        Ok(Self::clamped(values))
    }

    fn clamped(mut values: Vec<f64>) -> Self {
        for v in values.iter_mut() {
            *v = v.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        }
        let sum: f64 = values.iter().sum();
        for v in values.iter_mut() {
            *v /= sum;
        }
        ProbabilityVector(values)
    }

    pub fn uniform(k: usize) -> Self {
        ProbabilityVector(vec![1.0 / k as f64; k])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Reorders entries so that entry `i` of the result is entry `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        ProbabilityVector(perm.iter().map(|&i| self.0[i]).collect())
    }
}

impl std::ops::Index<usize> for ProbabilityVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Optimal Kelly allocation for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct KellySolution {
    /// Candidate classes in ascending index order.
    pub candidates: Vec<usize>,
    pub fractions: Vec<f64>,
    pub unspent: f64,
    pub log_growth: f64,
    /// The greedy pass admitted nothing and the reference label was inserted.
    pub fallback: bool,
}

impl KellySolution {
    pub fn is_candidate(&self, class: usize) -> bool {
        self.candidates.binary_search(&class).is_ok()
    }
}

fn check_pair(prior: &ProbabilityVector, posterior: &ProbabilityVector) -> Result<usize> {
    if prior.len() != posterior.len() {
        return Err(Error::ShapeMismatch(format!(
            "prior has {} classes, posterior has {}",
            prior.len(),
            posterior.len()
        )));
    }
    Ok(prior.len())
}

/// Expected log-growth of the bankroll for the given allocation.
pub fn log_growth(
    fractions: &[f64],
    prior: &ProbabilityVector,
    posterior: &ProbabilityVector,
) -> Result<f64> {
    let k = check_pair(prior, posterior)?;
    if fractions.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "{} fractions for {k} classes",
            fractions.len()
        )));
    }
    if fractions.iter().any(|g| !g.is_finite() || *g < 0.0) {
        return Err(Error::InfeasibleFractions(
            "fractions must be finite and non-negative".into(),
        ));
    }
    let total: f64 = fractions.iter().sum();
    if total >= 1.0 {
        return Err(Error::InfeasibleFractions(format!(
            "fractions sum to {total}, must stay below 1"
        )));
    }
    let kept = 1.0 - total;
    let mut growth = 0.0;
    for c in 0..k {
        let bracket = kept + fractions[c] / posterior[c];
        if bracket <= 0.0 {
            return Err(Error::InfeasibleFractions(format!(
                "payoff bracket for class {c} is {bracket}"
            )));
        }
        growth += prior[c] * bracket.ln();
    }
    Ok(growth)
}

/// Prior mass over posterior mass of the classes not (yet) backed.
fn unspent_ratio(prior: &ProbabilityVector, posterior: &ProbabilityVector, backed: &[bool]) -> f64 {
    let (mut sa, mut sp) = (0.0, 0.0);
    for (c, _) in backed.iter().enumerate().filter(|(_, b)| !**b) {
        sa += prior[c];
        sp += posterior[c];
    }
    sa / sp
}

/// Determines the candidate labels of one sample and their optimal allocation.
///
/// Classes are visited in descending order of `prior / posterior` (ties by
/// ascending class index) and admitted while the ratio strictly exceeds the
/// current unspent fraction. If nothing is admitted, `reference_label` is
/// inserted; without one this fails with [`Error::MissingReference`].
pub fn candidate_labels(
    prior: &ProbabilityVector,
    posterior: &ProbabilityVector,
    reference_label: Option<usize>,
) -> Result<KellySolution> {
    let k = check_pair(prior, posterior)?;
    if k < 2 {
        return Err(Error::InvalidProbability("need at least two classes".into()));
    }
    if let Some(r) = reference_label {
        if r >= k {
            return Err(Error::Domain(format!("reference label {r} out of range for {k} classes")));
        }
    }

    let ratio: Vec<f64> = (0..k).map(|c| prior[c] / posterior[c]).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| ratio[j].total_cmp(&ratio[i]));

    let mut backed = vec![false; k];
    let mut unspent = 1.0;
    for &c in &order {
        if ratio[c] > unspent {
            backed[c] = true;
            unspent = unspent_ratio(prior, posterior, &backed);
        } else {
            break;
        }
    }
    debug_assert!(backed.iter().any(|b| !b), "the last class can never be admitted");

    let fallback = !backed.iter().any(|b| *b);
    let mut fractions = vec![0.0; k];
    if fallback {
        let r = reference_label.ok_or(Error::MissingReference)?;
        backed[r] = true;
        let s = unspent_ratio(prior, posterior, &backed);
        fractions[r] = (prior[r] - posterior[r] * s).max(0.0);
        unspent = 1.0 - fractions[r];
    } else {
        for c in (0..k).filter(|&c| backed[c]) {
            fractions[c] = prior[c] - posterior[c] * unspent;
        }
    }

    let candidates: Vec<usize> = (0..k).filter(|&c| backed[c]).collect();
    let log_growth = log_growth(&fractions, prior, posterior)?;
    Ok(KellySolution {
        candidates,
        fractions,
        unspent,
        log_growth,
        fallback,
    })
}

/// Minimized Kelly objective in the coarsened form: candidates contribute
/// `a ln(a/p)` each and all other classes are pooled into one outcome.
pub fn kelly_objective_value(
    solution: &KellySolution,
    prior: &ProbabilityVector,
    posterior: &ProbabilityVector,
) -> f64 {
    let mut value = 0.0;
    let (mut rest_prior, mut rest_post) = (0.0, 0.0);
    for c in 0..prior.len() {
        if solution.is_candidate(c) {
            value += prior[c] * (prior[c] / posterior[c]).ln();
        } else {
            rest_prior += prior[c];
            rest_post += posterior[c];
        }
    }
    if rest_prior > 0.0 {
        value += rest_prior * (rest_prior / rest_post).ln();
    }
    value
}

/// Grid maximizer of [`log_growth`].
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub fractions: Vec<f64>,
    pub value: f64,
}

/// Exhaustive search of the grid `{g = step·n : n ∈ ℕ^K, Σ g < 1}` for the
/// allocation with the largest log-growth.
///
/// Every grid point is visited. Points are enumerated level by level on the
/// total stake `t = Σ n`, and for a fixed level the per-class logarithms are
/// tabulated once, so the inner enumeration only adds table entries.
pub fn brute_force_oracle(
    prior: &ProbabilityVector,
    posterior: &ProbabilityVector,
    grid_step: f64,
) -> Result<OracleResult> {
    let k = check_pair(prior, posterior)?;
    if k > ORACLE_MAX_CLASSES {
        return Err(Error::DimensionTooLarge(k));
    }
    if !(grid_step > 0.0 && grid_step <= 0.1) {
        return Err(Error::Domain(format!("grid step {grid_step} outside (0, 0.1]")));
    }
    let levels = ((1.0 - 1e-12) / grid_step).floor() as usize;

    let mut best = OracleResult {
        fractions: vec![0.0; k],
        value: f64::NEG_INFINITY,
    };
    let mut table = vec![vec![0.0; levels + 1]; k];
    let mut counts = vec![0usize; k];
    for total in 0..=levels {
        let kept = 1.0 - total as f64 * grid_step;
        for (c, row) in table.iter_mut().enumerate() {
            for (n, slot) in row.iter_mut().enumerate().take(total + 1) {
                *slot = prior[c] * (kept + n as f64 * grid_step / posterior[c]).ln();
            }
        }
        let mut search = LevelSearch {
            table: &table,
            best_value: f64::NEG_INFINITY,
            best_counts: vec![0; k],
        };
        search.enumerate(0, total, 0.0, &mut counts);
        if search.best_value > best.value {
            best.value = search.best_value;
            best.fractions = search
                .best_counts
                .iter()
                .map(|&n| n as f64 * grid_step)
                .collect();
        }
    }
    Ok(best)
}

struct LevelSearch<'a> {
    table: &'a [Vec<f64>],
    best_value: f64,
    best_counts: Vec<usize>,
}

/// `max_n a[n] + b[r − n]` with `r = a.len() − 1`.
fn max_pair_sum(a: &[f64], b: &[f64]) -> f64 {
    const LANES: usize = 8;
    let r = a.len() - 1;
    let mut lanes = [f64::NEG_INFINITY; LANES];
    let whole = a.len() / LANES * LANES;
    for start in (0..whole).step_by(LANES) {
        for l in 0..LANES {
            let v = a[start + l] + b[r - start - l];
            lanes[l] = if v > lanes[l] { v } else { lanes[l] };
        }
    }
    let mut best = lanes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for n in whole..a.len() {
        best = best.max(a[n] + b[r - n]);
    }
    best
}

impl LevelSearch<'_> {
    fn enumerate(&mut self, class: usize, remaining: usize, partial: f64, counts: &mut [usize]) {
        let k = self.table.len();
        if class + 2 == k {
            // the last two classes split `remaining` between them
            let first = &self.table[class][..=remaining];
            let second = &self.table[class + 1][..=remaining];
            let split_max = max_pair_sum(first, second);
            let value = partial + split_max;
            if value > self.best_value {
                let n = (0..=remaining)
                    .find(|&n| first[n] + second[remaining - n] == split_max)
                    .expect("maximum is attained");
                counts[class] = n;
                counts[class + 1] = remaining - n;
                self.best_value = value;
                self.best_counts.copy_from_slice(counts);
            }
            return;
        }
        for n in 0..=remaining {
            counts[class] = n;
            self.enumerate(class + 1, remaining - n, partial + self.table[class][n], counts);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn empty_bet_has_zero_growth() {
        let g = log_growth(&[0.0; 3], &pv(&[0.2, 0.5, 0.3]), &pv(&[0.6, 0.1, 0.3])).unwrap();
        assert_eq!(g, 0.0);
    }

    #[test]
    fn growth_direct_evaluation() {
        let g = log_growth(&[0.8, 0.0], &pv(&[0.9, 0.1]), &pv(&[0.5, 0.5])).unwrap();
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((g - expected).abs() < 1e-7, "{g} vs {expected}");
        assert!((g - 0.3681).abs() < 1e-4);
    }

    #[test]
    fn infeasible_fractions_rejected() {
        let a = pv(&[0.5, 0.5]);
        assert!(matches!(
            log_growth(&[0.6, 0.4], &a, &a),
            Err(Error::InfeasibleFractions(_))
        ));
        assert!(matches!(
            log_growth(&[-0.1, 0.0], &a, &a),
            Err(Error::InfeasibleFractions(_))
        ));
    }

    #[test]
    fn worked_three_class_example() {
        let prior = pv(&[0.6, 0.3, 0.1]);
        let post = pv(&[0.2, 0.3, 0.5]);
        let sol = candidate_labels(&prior, &post, None).unwrap();
        assert_eq!(sol.candidates, vec![0, 1]);
        assert!(!sol.fallback);
        for (g, e) in sol.fractions.iter().zip([0.56, 0.24, 0.0]) {
            assert!((g - e).abs() < 1e-7, "{:?}", sol.fractions);
        }
        assert!((sol.unspent - 0.2).abs() < 1e-7);
        let expected = 0.6 * 3f64.ln() + 0.1 * 0.2f64.ln();
        assert!((sol.log_growth - expected).abs() < 1e-7);
        assert!((kelly_objective_value(&sol, &prior, &post) - sol.log_growth).abs() < 1e-12);
    }

    #[test]
    fn two_class_example_stops_on_equality() {
        let sol = candidate_labels(&pv(&[0.9, 0.1]), &pv(&[0.5, 0.5]), None).unwrap();
        assert_eq!(sol.candidates, vec![0]);
        assert!((sol.fractions[0] - 0.8).abs() < 1e-7);
        assert_eq!(sol.fractions[1], 0.0);
        assert!((sol.unspent - 0.2).abs() < 1e-7);
    }

    #[test]
    fn matching_beliefs_fall_back_to_reference() {
        let u = ProbabilityVector::uniform(3);
        let sol = candidate_labels(&u, &u, Some(2)).unwrap();
        assert!(sol.fallback);
        assert_eq!(sol.candidates, vec![2]);
        assert_eq!(sol.fractions, vec![0.0; 3]);
        assert_eq!(sol.unspent, 1.0);
        assert_eq!(kelly_objective_value(&sol, &u, &u), 0.0);
        assert!(matches!(candidate_labels(&u, &u, None), Err(Error::MissingReference)));
    }

    #[test]
    fn oracle_agrees_with_closed_form_examples() {
        // Fair odds make the maximizer non-unique (only g0 - g1 matters), so compare values.
        let o = brute_force_oracle(&pv(&[0.9, 0.1]), &pv(&[0.5, 0.5]), 0.001).unwrap();
        let best = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((o.value - best).abs() < 1e-6, "{}", o.value);
        assert!((o.fractions[0] - o.fractions[1] - 0.8).abs() <= 0.002);

        let o = brute_force_oracle(&pv(&[0.6, 0.3, 0.1]), &pv(&[0.2, 0.3, 0.5]), 0.005).unwrap();
        assert!((o.value - 0.4982).abs() < 1e-3);

        let a = pv(&[0.1, 0.2, 0.3, 0.4]);
        let o = brute_force_oracle(&a, &a, 0.01).unwrap();
        assert!(o.value.abs() < 1e-4);
        assert!(o.fractions.iter().all(|g| g.abs() <= 0.02));
    }

    #[test]
    fn oracle_rejects_large_dimension() {
        let u = ProbabilityVector::uniform(5);
        assert!(matches!(brute_force_oracle(&u, &u, 0.05), Err(Error::DimensionTooLarge(5))));
    }

    #[test]
    fn clamping_keeps_open_interval() {
        let p = pv(&[1.0, 0.0]);
        assert!(p.values().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!((p.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(ProbabilityVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbabilityVector::new(vec![f64::NAN, 1.0]).is_err());
    }
}
