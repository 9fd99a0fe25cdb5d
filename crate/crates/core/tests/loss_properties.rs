use efe_core::gradcheck::{central_difference, relative_error_with_floor, DEFAULT_STEP, NOISE_FLOOR};
use efe_core::kelly::kelly_objective_value;
use efe_core::losses::{
    class_balanced_weight, cross_entropy, dice_loss, dice_similarity, efe_loss, focal, lovasz_softmax, softmax,
    vfe_decompose, weighted_cross_entropy, weighted_focal, LossEvaluation, WeightSpec,
};
use efe_core::trainer::candidate_sets;
use efe_core::{candidate_labels, LabelMatrix, ProbabilityVector, Result};
use ndarray::Array2;
use proptest::prelude::*;

/// Batch of logits, one-hot labels and priors for `k` classes and `n` samples.
#[derive(Debug, Clone)]
struct Batch {
    logits: Array2<f64>,
    labels: Vec<usize>,
    priors: Array2<f64>,
}

fn batch() -> impl Strategy<Value = Batch> {
    (2usize..=4, prop::sample::select(vec![1usize, 2, 8])).prop_flat_map(|(k, n)| {
        (
            prop::collection::vec(-2.0f64..2.0, n * k),
            prop::collection::vec(0..k, n),
            prop::collection::vec(0.05f64..1.0, n * k),
        )
            .prop_map(move |(z, labels, raw)| {
                let mut priors = Array2::from_shape_vec((n, k), raw).unwrap();
                for mut row in priors.rows_mut() {
                    let s = row.sum();
                    row.mapv_inplace(|v| v / s);
                }
                Batch {
                    logits: Array2::from_shape_vec((n, k), z).unwrap(),
                    labels,
                    priors,
                }
            })
    })
}

/// Checks the logit gradient of `loss` against central differences.
fn check<F>(b: &Batch, loss: F) -> f64
where
    F: Fn(&Array2<f64>) -> Result<LossEvaluation>,
{
    let post = softmax(&b.logits).unwrap();
    let analytic = loss(&post).unwrap().grad_logits;
    let shape = b.logits.dim();
    let numeric = central_difference(
        |z| {
            let z = Array2::from_shape_vec(shape, z.to_vec()).unwrap();
            loss(&softmax(&z).unwrap()).unwrap().value
        },
        b.logits.as_slice().unwrap(),
        DEFAULT_STEP,
    );
    relative_error_with_floor(analytic.as_slice().unwrap(), &numeric, NOISE_FLOOR)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cross_entropy_family_gradients(b in batch(), gamma in 0.0f64..3.0) {
        let k = b.logits.ncols();
        let l = LabelMatrix::one_hot(&b.labels, k).unwrap();
        let counts = l.class_counts();
        let spec = WeightSpec {
            gamma_mod: gamma,
            border_distances: Some((vec![1.0; b.labels.len()], vec![0.5; b.labels.len()])),
            ..WeightSpec::default()
        };
        prop_assert!(check(&b, |p| cross_entropy(p, &l)) <= 1e-5);
        prop_assert!(check(&b, |p| focal(p, &l, gamma)) <= 1e-5);
        prop_assert!(check(&b, |p| weighted_cross_entropy(p, &l, &spec, &counts)) <= 1e-5);
        prop_assert!(check(&b, |p| weighted_focal(p, &l, &spec, &counts)) <= 1e-5);
    }

    #[test]
    fn metric_loss_gradients(b in batch()) {
        let l = LabelMatrix::one_hot(&b.labels, b.logits.ncols()).unwrap();
        prop_assert!(check(&b, |p| dice_similarity(p, &l)) <= 1e-5);
        prop_assert!(check(&b, |p| dice_loss(p, &l)) <= 1e-5);
        prop_assert!(check(&b, |p| lovasz_softmax(p, &l)) <= 1e-5);
    }

    #[test]
    fn efe_gradient_with_fixed_candidates(b in batch(), uniform in any::<bool>()) {
        let (n, k) = b.logits.dim();
        let l = if uniform { LabelMatrix::uniform(n, k) } else { LabelMatrix::one_hot(&b.labels, k).unwrap() };
        let post = softmax(&b.logits).unwrap();
        let reference = (!uniform).then_some(b.labels.as_slice());
        let sets = candidate_sets(&post, &b.priors, reference).unwrap();
        prop_assert!(check(&b, |p| efe_loss(p, &l, &b.priors, &sets)) <= 1e-5);
    }

    #[test]
    fn gradients_sum_to_zero_per_row(b in batch()) {
        let k = b.logits.ncols();
        let l = LabelMatrix::one_hot(&b.labels, k).unwrap();
        let post = softmax(&b.logits).unwrap();
        let sets = candidate_sets(&post, &b.priors, Some(&b.labels)).unwrap();
        for g in [
            cross_entropy(&post, &l).unwrap().grad_logits,
            focal(&post, &l, 2.0).unwrap().grad_logits,
            dice_loss(&post, &l).unwrap().grad_logits,
            lovasz_softmax(&post, &l).unwrap().grad_logits,
            efe_loss(&post, &l, &b.priors, &sets).unwrap().grad_logits,
        ] {
            for row in g.rows() {
                prop_assert!(row.sum().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn efe_complexity_is_scaled_kelly_objective(b in batch()) {
        let (n, k) = b.logits.dim();
        let l = LabelMatrix::one_hot(&b.labels, k).unwrap();
        let post = softmax(&b.logits).unwrap();
        let mut total = 0.0;
        let mut sets = Vec::new();
        for j in 0..n {
            let a = ProbabilityVector::new(b.priors.row(j).to_vec()).unwrap();
            let p = ProbabilityVector::new(post.row(j).to_vec()).unwrap();
            let sol = candidate_labels(&a, &p, Some(b.labels[j])).unwrap();
            total += kelly_objective_value(&sol, &a, &p);
            sets.push(sol.candidates);
        }
        // the loss sees the clamped rows the Kelly step saw
        let clamped_post = Array2::from_shape_fn((n, k), |(j, c)| ProbabilityVector::new(post.row(j).to_vec()).unwrap()[c]);
        let clamped_prior = Array2::from_shape_fn((n, k), |(j, c)| ProbabilityVector::new(b.priors.row(j).to_vec()).unwrap()[c]);
        let terms = efe_loss(&clamped_post, &l, &clamped_prior, &sets).unwrap().terms.unwrap();
        prop_assert!((terms.expected_complexity - total / (k * n) as f64).abs() <= 1e-12);
        prop_assert!(terms.expected_complexity >= 0.0);
        prop_assert!(terms.uncertainty >= 0.0);
    }

    #[test]
    fn vfe_identity(
        raw in prop::collection::vec((0.05f64..1.0, 0.05f64..1.0, 0.01f64..1.0), 2..6)
    ) {
        let norm = |v: Vec<f64>| { let s: f64 = v.iter().sum(); ProbabilityVector::new(v.iter().map(|x| x / s).collect()).unwrap() };
        let p = norm(raw.iter().map(|t| t.0).collect());
        let q = norm(raw.iter().map(|t| t.1).collect());
        let lik: Vec<f64> = raw.iter().map(|t| t.2).collect();
        let d = vfe_decompose(&p, &q, &lik).unwrap();
        prop_assert!((d.free_energy() - d.free_energy_via_entropy()).abs() <= 1e-12);
        prop_assert!(d.complexity >= -1e-15);
    }

    #[test]
    fn unit_weights_reduce_to_unweighted(b in batch()) {
        let k = b.logits.ncols();
        let l = LabelMatrix::one_hot(&b.labels, k).unwrap();
        let post = softmax(&b.logits).unwrap();
        let unit = WeightSpec { class_weights: Some(vec![1.0; k]), ..WeightSpec::default() };
        let counts = l.class_counts();
        prop_assert_eq!(weighted_cross_entropy(&post, &l, &unit, &counts).unwrap(), cross_entropy(&post, &l).unwrap());
        prop_assert_eq!(focal(&post, &l, 0.0).unwrap(), cross_entropy(&post, &l).unwrap());
        let unit_focal = WeightSpec { gamma_mod: 0.0, ..unit };
        prop_assert_eq!(weighted_focal(&post, &l, &unit_focal, &counts).unwrap(), cross_entropy(&post, &l).unwrap());
    }
}

#[test]
fn class_balanced_examples() {
    assert!((class_balanced_weight(2.0, 2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert!((class_balanced_weight(7.5, 1).unwrap() - 1.0).abs() < 1e-15);
    assert!((class_balanced_weight(1e6, 4).unwrap() - 0.25).abs() < 1e-4);
    assert!(class_balanced_weight(3.0, 0).is_err());
}
