//! Oracle suites run by `efe verify`: grid search against the closed-form
//! Kelly solution, finite differences against every analytic gradient, and
//! exhaustive set-function checks of the Jaccard distance and its Lovász
//! extension.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gradcheck::{central_difference, relative_error_with_floor, DEFAULT_STEP, NOISE_FLOOR};
use crate::kelly::{brute_force_oracle, candidate_labels, kelly_objective_value, log_growth, ProbabilityVector};
use crate::losses::{self, jaccard_distance_set, LabelMatrix, LossEvaluation, WeightSpec};
use crate::network::{self, LayerSpec};
use crate::seeds;
use crate::trainer::candidate_sets;

pub const GRID_STEP: f64 = 0.005;
pub const GRID_GAP_TOLERANCE: f64 = 1e-3;
pub const CONSERVATION_TOLERANCE: f64 = 1e-9;
pub const IDENTITY_TOLERANCE: f64 = 1e-12;
pub const GRADIENT_TOLERANCE: f64 = 1e-5;
pub const LOVASZ_MAX_SAMPLES: usize = 4;
pub const CONVEXITY_TOLERANCE: f64 = 1e-12;
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Kelly,
    Gradients,
    Lovasz,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kelly" => Ok(Suite::Kelly),
            "gradients" => Ok(Suite::Gradients),
            "lovasz" => Ok(Suite::Lovasz),
            "all" => Ok(Suite::All),
            _ => Err(Error::Domain(format!("unknown suite `{s}`"))),
        }
    }
}

/// Outcome of one checked property: the worst observed error and its bound.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub worst: f64,
    pub threshold: f64,
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: worst {:.3e} (bound {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.threshold
        )
    }
}

/// Tracks the worst error of a property over many instances.
struct Tracker {
    name: String,
    worst: f64,
    threshold: f64,
    failed: bool,
}

impl Tracker {
    fn new(name: impl Into<String>, threshold: f64) -> Self {
        Tracker {
            name: name.into(),
            worst: 0.0,
            threshold,
            failed: false,
        }
    }

    /// Records an error that must not exceed the threshold.
    fn bound(&mut self, error: f64) {
        self.worst = self.worst.max(error);
        if !(error <= self.threshold) {
            self.failed = true;
        }
    }

    /// Records a condition with an associated error magnitude.
    fn check(&mut self, ok: bool, error: f64) {
        self.worst = self.worst.max(error);
        if !ok {
            self.failed = true;
        }
    }

    fn finish(self) -> PropertyResult {
        PropertyResult {
            name: self.name,
            passed: !self.failed,
            worst: self.worst,
            threshold: self.threshold,
        }
    }
}

pub fn run(suite: Suite, seed: u64, trials: usize) -> Result<Vec<PropertyResult>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Kelly | Suite::All) {
        out.extend(kelly_suite(seeds::derive(seed, 1), trials)?);
    }
    if matches!(suite, Suite::Gradients | Suite::All) {
        out.extend(gradient_suite(seeds::derive(seed, 2), trials)?);
    }
    if matches!(suite, Suite::Lovasz | Suite::All) {
        out.extend(lovasz_suite(seeds::derive(seed, 3), trials)?);
    }
    Ok(out)
}

/// Random distribution with entries drawn from `[0.05, 1)` before normalizing.
pub fn random_distribution(rng: &mut ChaCha8Rng, k: usize) -> ProbabilityVector {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    ProbabilityVector::new(raw.iter().map(|v| v / total).collect()).expect("normalized draw")
}

/// Class count of Kelly trial `trial`: cycles through 2, 3, 4.
pub fn trial_classes(trial: usize) -> usize {
    2 + trial % 3
}

pub fn kelly_suite(seed: u64, trials: usize) -> Result<Vec<PropertyResult>> {
    let mut gap = Tracker::new("kelly: |closed form - grid maximum| log-growth", GRID_GAP_TOLERANCE);
    let mut below = Tracker::new("kelly: closed form not below grid maximum", IDENTITY_TOLERANCE);
    let mut kkt = Tracker::new("kelly: KKT separation a/p > s on candidates, <= s elsewhere", 0.0);
    let mut conservation = Tracker::new("kelly: conservation sum(g) + s = 1", CONSERVATION_TOLERANCE);
    let mut identity = Tracker::new("kelly: objective value equals log-growth", IDENTITY_TOLERANCE);
    let mut nonneg = Tracker::new("kelly: objective value >= 0", 0.0);

    for trial in 0..trials {
        let mut rng = seeds::rng(seeds::derive(seed, trial as u64));
        let k = trial_classes(trial);
        let prior = random_distribution(&mut rng, k);
        let post = random_distribution(&mut rng, k);
        let sol = candidate_labels(&prior, &post, Some(0))?;
        let grid = brute_force_oracle(&prior, &post, GRID_STEP)?;

        gap.bound((sol.log_growth - grid.value).abs());
        below.bound((grid.value - sol.log_growth).max(0.0));

        if !sol.fallback {
            let s = sol.unspent;
            for c in 0..k {
                let ratio = prior[c] / post[c];
                let (ok, violation) = if sol.is_candidate(c) {
                    (ratio > s, (s - ratio).max(0.0))
                } else {
                    (ratio <= s, (ratio - s).max(0.0))
                };
                kkt.check(ok, violation);
            }
        }
        let total: f64 = sol.fractions.iter().sum();
        conservation.bound((total + sol.unspent - 1.0).abs());
        let value = kelly_objective_value(&sol, &prior, &post);
        identity.bound((value - log_growth(&sol.fractions, &prior, &post)?).abs());
        nonneg.check(value >= 0.0, (-value).max(0.0));
    }
    Ok([gap, below, kkt, conservation, identity, nonneg]
        .into_iter()
        .map(Tracker::finish)
        .collect())
}

/// Losses covered by the gradient suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientCase {
    Ce,
    Wce,
    Focal(f64),
    Wfocal,
    Dice,
    Lovasz,
    Efe,
}

impl GradientCase {
    pub const ALL: [GradientCase; 8] = [
        GradientCase::Ce,
        GradientCase::Wce,
        GradientCase::Focal(0.0),
        GradientCase::Focal(2.0),
        GradientCase::Wfocal,
        GradientCase::Dice,
        GradientCase::Lovasz,
        GradientCase::Efe,
    ];

    pub fn name(&self) -> String {
        match self {
            GradientCase::Ce => "ce".into(),
            GradientCase::Wce => "wce".into(),
            GradientCase::Focal(g) => format!("focal(gamma={g})"),
            GradientCase::Wfocal => "wfocal".into(),
            GradientCase::Dice => "dice".into(),
            GradientCase::Lovasz => "lovasz".into(),
            GradientCase::Efe => "efe".into(),
        }
    }
}

/// A loss with every input other than the posteriors held fixed.
struct FixedLoss {
    case: GradientCase,
    labels: LabelMatrix,
    weights: WeightSpec,
    priors: Array2<f64>,
    candidates: Vec<Vec<usize>>,
}

impl FixedLoss {
    fn eval(&self, post: &Array2<f64>) -> Result<LossEvaluation> {
        let l = &self.labels;
        match self.case {
            GradientCase::Ce => losses::cross_entropy(post, l),
            GradientCase::Wce => losses::weighted_cross_entropy(post, l, &self.weights, &l.class_counts()),
            GradientCase::Focal(g) => losses::focal(post, l, g),
            GradientCase::Wfocal => losses::weighted_focal(post, l, &self.weights, &l.class_counts()),
            GradientCase::Dice => losses::dice_loss(post, l),
            GradientCase::Lovasz => losses::lovasz_softmax(post, l),
            GradientCase::Efe => losses::efe_loss(post, l, &self.priors, &self.candidates),
        }
    }
}

/// Relative error between the backpropagated gradient of `case` composed
/// with a small two-layer network and its central finite-difference estimate.
pub fn network_gradient_error(case: GradientCase, seed: u64) -> Result<f64> {
    let mut rng = seeds::rng(seed);
    let k = 2 + rng.random_range(0..3usize);
    let n = [1usize, 2, 8][rng.random_range(0..3usize)];
    let (d, hidden) = (3, 5);
    let specs = LayerSpec::stack(d, &[hidden], k, 0.8);
    let mut params = network::init_he(&specs, rng.random())?;
    let mut flat = params.to_flat();
    let mut offset = 0;
    for s in &specs {
        offset += s.input_width * s.output_width;
        for v in &mut flat[offset..offset + s.output_width] {
            *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        offset += s.output_width;
        flat[offset] = rng.random_range(0.05..0.5);
        offset += 1;
    }
    params.set_flat(&flat)?;
    // Inputs of scale 0.5 keep posteriors away from saturation, where gradients
    // fall below the finite-difference noise floor. Inputs that put a hidden
    // pre-activation next to the PReLU kink are redrawn.
    let first = &params.layers()[0];
    let x = loop {
        let x = Array2::from_shape_simple_fn((n, d), || 0.5 * rng.sample::<f64, _>(StandardNormal));
        let z = x.dot(&first.weights.t()) + &first.biases;
        if z.iter().all(|v| v.abs() >= KINK_MARGIN) {
            break x;
        }
    };
    let dropout_seed: u64 = rng.random();

    let uniform_labels = case == GradientCase::Efe && rng.random_bool(0.5);
    let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let labels = if uniform_labels {
        LabelMatrix::uniform(n, k)
    } else {
        LabelMatrix::one_hot(&truth, k)?
    };
    let mut priors = Array2::zeros((n, k));
    for j in 0..n {
        let row = random_distribution(&mut rng, k);
        priors.row_mut(j).iter_mut().zip(row.values()).for_each(|(p, v)| *p = *v);
    }
    let d1: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
    let d2: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
    let weights = match case {
        GradientCase::Wce => WeightSpec {
            border_distances: Some((d1, d2)),
            ..WeightSpec::default()
        },
        GradientCase::Wfocal => WeightSpec {
            class_weights: Some((0..k).map(|_| rng.random_range(0.2..3.0)).collect()),
            ..WeightSpec::default()
        },
        _ => WeightSpec::default(),
    };

    let (logits, cache) = network::forward(&params, &x, true, dropout_seed)?;
    let post = losses::softmax(&logits)?;
    let candidates = if case == GradientCase::Efe {
        let reference = (!uniform_labels).then_some(truth.as_slice());
        candidate_sets(&post, &priors, reference)?
    } else {
        Vec::new()
    };
    let loss = FixedLoss {
        case,
        labels,
        weights,
        priors,
        candidates,
    };
    let eval = loss.eval(&post)?;
    let analytic = network::backward(&params, &cache, &eval.grad_logits)?.to_flat();

    let mut probe = params.clone();
    let mut failure = None;
    let numeric = central_difference(
        |theta| {
            let value = (|| -> Result<f64> {
                probe.set_flat(theta)?;
                let (z, _) = network::forward(&probe, &x, true, dropout_seed)?;
                Ok(loss.eval(&losses::softmax(&z)?)?.value)
            })();
            value.unwrap_or_else(|e| {
                failure.get_or_insert(e);
                f64::NAN
            })
        },
        &flat,
        DEFAULT_STEP,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(relative_error_with_floor(&analytic, &numeric, NOISE_FLOOR))
}

pub fn gradient_suite(seed: u64, trials: usize) -> Result<Vec<PropertyResult>> {
    GradientCase::ALL
        .iter()
        .enumerate()
        .map(|(i, case)| {
            let mut t = Tracker::new(format!("gradients: {} through network vs finite differences", case.name()), GRADIENT_TOLERANCE);
            for trial in 0..trials {
                let s = seeds::derive(seeds::derive(seed, i as u64), trial as u64);
                t.bound(network_gradient_error(*case, s)?);
            }
            Ok(t.finish())
        })
        .collect()
}

fn set_from_bits(bits: u32, n: usize) -> Vec<bool> {
    (0..n).map(|i| bits >> i & 1 == 1).collect()
}

/// Jaccard distance as a function of the misprediction set for fixed ground truth.
fn jd_of(mis: &[bool], gt: &[bool]) -> f64 {
    let pred: Vec<bool> = gt.iter().zip(mis).map(|(g, m)| g != m).collect();
    jaccard_distance_set(mis, gt, &pred)
}

pub fn lovasz_suite(seed: u64, trials: usize) -> Result<Vec<PropertyResult>> {
    let mut vertex = Tracker::new("lovasz: vertex agreement with Jaccard distance (K=2, N<=4)", IDENTITY_TOLERANCE);
    let mut submodular = Tracker::new("lovasz: Jaccard distance submodularity (N<=4)", IDENTITY_TOLERANCE);
    let mut convex = Tracker::new("lovasz: midpoint convexity of the extension", CONVEXITY_TOLERANCE);

    for n in 1..=LOVASZ_MAX_SAMPLES {
        let all = 1u32 << n;
        for label_bits in 0..all {
            let truth: Vec<usize> = (0..n).map(|j| (label_bits >> j & 1) as usize).collect();
            let labels = LabelMatrix::one_hot(&truth, 2)?;
            for pred_bits in 0..all {
                let pred: Vec<usize> = (0..n).map(|j| (pred_bits >> j & 1) as usize).collect();
                let post = LabelMatrix::one_hot(&pred, 2)?.rows().clone();
                let value = losses::lovasz_softmax(&post, &labels)?.value;
                let mut expected = 0.0;
                for c in 0..2 {
                    let gt: Vec<bool> = truth.iter().map(|&t| t == c).collect();
                    let mis: Vec<bool> = truth.iter().zip(&pred).map(|(&t, &p)| (t == c) != (p == c)).collect();
                    expected += jd_of(&mis, &gt);
                }
                expected /= (2 * n) as f64;
                vertex.bound((value - expected).abs());
            }

            let gt = set_from_bits(label_bits, n);
            for a in 0..all {
                for b in 0..all {
                    let (sa, sb) = (set_from_bits(a, n), set_from_bits(b, n));
                    let (union, inter) = (set_from_bits(a | b, n), set_from_bits(a & b, n));
                    let excess = jd_of(&union, &gt) + jd_of(&inter, &gt) - jd_of(&sa, &gt) - jd_of(&sb, &gt);
                    submodular.bound(excess.max(0.0));
                }
            }
        }
    }

    for trial in 0..trials {
        let mut rng = seeds::rng(seeds::derive(seed, trial as u64));
        let n = rng.random_range(1..=8usize);
        let k = rng.random_range(2..=4usize);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let labels = LabelMatrix::one_hot(&truth, k)?;
        let mut draw = || {
            let mut p = Array2::zeros((n, k));
            for j in 0..n {
                let row = random_distribution(&mut rng, k);
                p.row_mut(j).iter_mut().zip(row.values()).for_each(|(d, v)| *d = *v);
            }
            p
        };
        let (x, y) = (draw(), draw());
        let mid = (&x + &y) / 2.0;
        let f = |p: &Array2<f64>| losses::lovasz_softmax(p, &labels).map(|e| e.value);
        let excess = f(&mid)? - (f(&x)? + f(&y)?) / 2.0;
        convex.bound(excess.max(0.0));
    }
    Ok([vertex, submodular, convex].into_iter().map(Tracker::finish).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        for r in kelly_suite(1, 12).unwrap() {
            assert!(r.passed, "{r}");
        }
        for r in lovasz_suite(1, 20).unwrap() {
            assert!(r.passed, "{r}");
        }
        for r in gradient_suite(1, 3).unwrap() {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!("all".parse::<Suite>().unwrap(), Suite::All);
        assert!("nope".parse::<Suite>().is_err());
    }
}
