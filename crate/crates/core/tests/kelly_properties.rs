use efe_core::kelly::{brute_force_oracle, kelly_objective_value, log_growth};
use efe_core::{candidate_labels, Error, ProbabilityVector};
use proptest::prelude::*;

fn distribution(k: usize) -> impl Strategy<Value = ProbabilityVector> {
    prop::collection::vec(0.05f64..1.0, k).prop_map(|raw| {
        let total: f64 = raw.iter().sum();
        ProbabilityVector::new(raw.iter().map(|v| v / total).collect()).unwrap()
    })
}

fn pair(max_k: usize) -> impl Strategy<Value = (ProbabilityVector, ProbabilityVector)> {
    (2..=max_k).prop_flat_map(|k| (distribution(k), distribution(k)))
}

fn permutation(k: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..k).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn kkt_separation_and_conservation((prior, post) in pair(8)) {
        let sol = candidate_labels(&prior, &post, Some(0)).unwrap();
        prop_assert!(!sol.fallback);
        let s = sol.unspent;
        prop_assert!(s > 0.0 && s <= 1.0);
        for c in 0..prior.len() {
            let ratio = prior[c] / post[c];
            if sol.is_candidate(c) {
                prop_assert!(ratio > s, "candidate {c}: {ratio} <= {s}");
                prop_assert!(sol.fractions[c] > 0.0);
                prop_assert!((sol.fractions[c] - (prior[c] - post[c] * s)).abs() < 1e-15);
            } else {
                prop_assert!(ratio <= s, "non-candidate {c}: {ratio} > {s}");
                prop_assert_eq!(sol.fractions[c], 0.0);
            }
        }
        let total: f64 = sol.fractions.iter().sum();
        prop_assert!((total + s - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn objective_identity_and_sign((prior, post) in pair(8)) {
        let sol = candidate_labels(&prior, &post, Some(1)).unwrap();
        let value = kelly_objective_value(&sol, &prior, &post);
        let growth = log_growth(&sol.fractions, &prior, &post).unwrap();
        prop_assert!((value - growth).abs() <= 1e-12);
        prop_assert!((sol.log_growth - growth).abs() <= 1e-12);
        prop_assert!(value >= 0.0);
    }

    #[test]
    fn no_feasible_perturbation_does_better(
        (prior, post) in pair(6),
        raw in prop::collection::vec(0.0f64..1.0, 6),
        budget in 0.0f64..0.999,
    ) {
        let k = prior.len();
        let sol = candidate_labels(&prior, &post, None).unwrap();
        let total: f64 = raw[..k].iter().sum::<f64>().max(1e-12);
        let other: Vec<f64> = raw[..k].iter().map(|v| budget * v / total).collect();
        let g = log_growth(&other, &prior, &post).unwrap();
        prop_assert!(sol.log_growth >= g - 1e-12, "{} < {g}", sol.log_growth);
    }

    #[test]
    fn permutation_equivariance((prior, post, perm) in pair(7).prop_flat_map(|(a, p)| {
        let k = a.len();
        (Just(a), Just(p), permutation(k))
    })) {
        let base = candidate_labels(&prior, &post, Some(0)).unwrap();
        let moved = candidate_labels(&prior.permuted(&perm), &post.permuted(&perm), Some(0)).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            prop_assert_eq!(moved.is_candidate(i), base.is_candidate(src));
            prop_assert!((moved.fractions[i] - base.fractions[src]).abs() <= 1e-12);
        }
        prop_assert!((moved.unspent - base.unspent).abs() <= 1e-12);
    }

    #[test]
    fn empty_greedy_set_only_for_matching_beliefs(p in (2usize..6).prop_flat_map(distribution), r in 0usize..6) {
        let r = r % p.len();
        let sol = candidate_labels(&p, &p, Some(r)).unwrap();
        prop_assert!(sol.fallback);
        prop_assert_eq!(&sol.candidates, &vec![r]);
        prop_assert!(sol.fractions.iter().all(|g| *g >= 0.0));
        prop_assert!((sol.fractions.iter().sum::<f64>() + sol.unspent - 1.0).abs() <= 1e-12);
        prop_assert!(matches!(candidate_labels(&p, &p, None), Err(Error::MissingReference)));
    }

    #[test]
    fn coarse_grid_never_beats_closed_form((prior, post) in pair(4)) {
        let sol = candidate_labels(&prior, &post, Some(0)).unwrap();
        let grid = brute_force_oracle(&prior, &post, 0.02).unwrap();
        prop_assert!(grid.value <= sol.log_growth + 1e-12);
        prop_assert!(sol.log_growth - grid.value < 0.02);
    }
}

#[test]
fn oracle_rejects_five_classes() {
    let p = ProbabilityVector::uniform(5);
    assert!(matches!(brute_force_oracle(&p, &p, 0.1), Err(Error::DimensionTooLarge(5))));
}

#[test]
fn probability_vector_contract() {
    assert!(ProbabilityVector::new(vec![0.5, 0.6]).is_err());
    assert!(ProbabilityVector::new(vec![1.5, -0.5]).is_err());
    assert!(ProbabilityVector::new(vec![f64::NAN, 1.0]).is_err());
    let clamped = ProbabilityVector::new(vec![1.0, 0.0]).unwrap();
    assert!(clamped[1] > 0.0 && clamped[0] < 1.0);
    assert!((clamped.values().iter().sum::<f64>() - 1.0).abs() < 1e-15);
}
