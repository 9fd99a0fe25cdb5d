//! Mini-batch training with early stopping on a smoothed validation loss, and
//! one-vs-rest evaluation.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::kelly::{candidate_labels, ProbabilityVector};
use crate::losses::{self, EfeTerms, LabelMatrix, LossEvaluation, WeightSpec};
use crate::network::{self, LayerSpec, NetworkParams};
use crate::optimizer::{self, AdamState};
use crate::seeds;

const INIT_STREAM: u64 = 0;
const EPOCH_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Efe,
    Ce,
    Wce,
    Focal,
    Wfocal,
    Dice,
    Lovasz,
}

/// Which of reference labels (`gr`/`ng`) and priors (`pr`/`np`) training sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Grpr,
    Grnp,
    Ngpr,
    Ngnp,
}

impl Mode {
    pub fn uses_labels(self) -> bool {
        matches!(self, Mode::Grpr | Mode::Grnp)
    }

    pub fn uses_priors(self) -> bool {
        matches!(self, Mode::Grpr | Mode::Ngpr)
    }
}

macro_rules! text_enum {
    ($t:ty { $($v:ident => $s:literal),* $(,)? }) => {
        impl $t {
            pub const ALL: &'static [$t] = &[$(<$t>::$v),*];

            pub fn as_str(self) -> &'static str {
                match self { $(<$t>::$v => $s),* }
            }
        }

        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(<$t>::$v),)*
                    _ => Err(Error::Domain(format!("unknown {} `{s}`", stringify!($t)))),
                }
            }
        }
    };
}

text_enum!(LossKind { Efe => "efe", Ce => "ce", Wce => "wce", Focal => "focal", Wfocal => "wfocal", Dice => "dice", Lovasz => "lovasz" });
text_enum!(Mode { Grpr => "grpr", Grnp => "grnp", Ngpr => "ngpr", Ngnp => "ngnp" });

fn default_gamma() -> f64 {
    2.0
}
fn default_alpha() -> f64 {
    optimizer::DEFAULT_ALPHA
}
fn default_beta_fm() -> f64 {
    optimizer::DEFAULT_BETA_FM
}
fn default_beta_sm() -> f64 {
    optimizer::DEFAULT_BETA_SM
}
fn default_batch_size() -> usize {
    32
}
fn default_max_iterations() -> usize {
    15000
}
fn default_patience() -> usize {
    100
}
fn default_ema_decay() -> f64 {
    0.9
}
fn default_hidden() -> Vec<usize> {
    vec![16]
}
fn default_retention() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub mode: Mode,
    #[serde(default = "default_gamma")]
    pub gamma_mod: f64,
    #[serde(default = "default_alpha")]
    pub alpha_lr: f64,
    #[serde(default = "default_beta_fm")]
    pub beta_fm: f64,
    #[serde(default = "default_beta_sm")]
    pub beta_sm: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_hidden")]
    pub hidden_widths: Vec<usize>,
    /// Retention probability of the hidden layers; the output layer keeps everything.
    #[serde(default = "default_retention")]
    pub dropout_retention: f64,
    /// Fixed class weights for `wce`/`wfocal`; inverse batch frequencies when absent.
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
}

impl TrainConfig {
    pub fn new(loss: LossKind, mode: Mode) -> Self {
        TrainConfig {
            loss,
            mode,
            gamma_mod: default_gamma(),
            alpha_lr: default_alpha(),
            beta_fm: default_beta_fm(),
            beta_sm: default_beta_sm(),
            batch_size: default_batch_size(),
            max_iterations: default_max_iterations(),
            patience: default_patience(),
            ema_decay: default_ema_decay(),
            seed: 0,
            hidden_widths: default_hidden(),
            dropout_retention: default_retention(),
            class_weights: None,
        }
    }

    /// Rejects out-of-range settings and loss/mode pairs that cannot be trained.
    pub fn validate(&self) -> Result<()> {
        if self.loss != LossKind::Efe && !self.mode.uses_labels() {
            return Err(Error::Incompatible(format!(
                "loss `{}` needs reference labels, mode `{}` has none",
                self.loss, self.mode
            )));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_iterations == 0 {
            return Err(Error::Domain("patience, batch_size and max_iterations must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Domain(format!("ema_decay {} outside [0, 1)", self.ema_decay)));
        }
        if !(self.gamma_mod >= 0.0) {
            return Err(Error::Domain(format!("gamma_mod {} must be >= 0", self.gamma_mod)));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::Domain("hidden widths must be >= 1".into()));
        }
        AdamState::new(0, self.alpha_lr, self.beta_fm, self.beta_sm)?;
        Ok(())
    }

    pub fn layer_specs(&self, num_features: usize, num_classes: usize) -> Vec<LayerSpec> {
        LayerSpec::stack(num_features, &self.hidden_widths, num_classes, self.dropout_retention)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_loss_ema: f64,
    /// Terms of the training-batch loss when training with `efe`.
    pub terms: Option<EfeTerms>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "iteration",
            "train_loss",
            "val_loss",
            "val_loss_ema",
            "uncertainty_term",
            "expected_complexity_term",
        ])?;
        for r in &self.rows {
            let (u, c) = match r.terms {
                Some(t) => (t.uncertainty.to_string(), t.expected_complexity.to_string()),
                None => (String::new(), String::new()),
            };
            w.write_record([
                r.iteration.to_string(),
                r.train_loss.to_string(),
                r.val_loss.to_string(),
                r.val_loss_ema.to_string(),
                u,
                c,
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the iteration with the lowest smoothed validation loss.
    pub params: NetworkParams,
    pub history: History,
    pub best_iteration: usize,
    pub iterations: usize,
}

/// Labels, priors and fallback labels as seen under a supervision mode.
struct Supervision {
    labels: LabelMatrix,
    priors: Array2<f64>,
    reference: Option<Vec<usize>>,
}

impl Supervision {
    fn new(set: &Dataset, mode: Mode) -> Result<Self> {
        let (m, k) = (set.num_samples(), set.num_classes());
        let (labels, reference) = if mode.uses_labels() {
            (LabelMatrix::one_hot(&set.reference_labels, k)?, Some(set.reference_labels.clone()))
        } else {
            (LabelMatrix::uniform(m, k), None)
        };
        let priors = if mode.uses_priors() {
            set.priors.clone()
        } else {
            Array2::from_elem((m, k), 1.0 / k as f64)
        };
        Ok(Supervision {
            labels,
            priors,
            reference,
        })
    }

    fn select(&self, idx: &[usize]) -> Supervision {
        Supervision {
            labels: self.labels.select(idx),
            priors: self.priors.select(Axis(0), idx),
            reference: self.reference.as_ref().map(|r| idx.iter().map(|&i| r[i]).collect()),
        }
    }
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = c;
        }
    }
    best
}

/// Candidate classes of every sample. The fallback label is the reference
/// label when one is known and the most probable class otherwise.
pub fn candidate_sets(posteriors: &Array2<f64>, priors: &Array2<f64>, reference: Option<&[usize]>) -> Result<Vec<Vec<usize>>> {
    (0..posteriors.nrows())
        .map(|j| {
            let post = ProbabilityVector::new(posteriors.row(j).to_vec())?;
            let prior = ProbabilityVector::new(priors.row(j).to_vec())?;
            let fallback = match reference {
                Some(r) => r[j],
                None => argmax(posteriors.row(j)),
            };
            Ok(candidate_labels(&prior, &post, Some(fallback))?.candidates)
        })
        .collect()
}

fn loss_on(config: &TrainConfig, posteriors: &Array2<f64>, sup: &Supervision) -> Result<LossEvaluation> {
    let weights = || WeightSpec {
        class_weights: config.class_weights.clone(),
        gamma_mod: config.gamma_mod,
        ..WeightSpec::default()
    };
    match config.loss {
        LossKind::Efe => {
            let sets = candidate_sets(posteriors, &sup.priors, sup.reference.as_deref())?;
            losses::efe_loss(posteriors, &sup.labels, &sup.priors, &sets)
        }
        LossKind::Ce => losses::cross_entropy(posteriors, &sup.labels),
        LossKind::Wce => losses::weighted_cross_entropy(posteriors, &sup.labels, &weights(), &sup.labels.class_counts()),
        LossKind::Focal => losses::focal(posteriors, &sup.labels, config.gamma_mod),
        LossKind::Wfocal => losses::weighted_focal(posteriors, &sup.labels, &weights(), &sup.labels.class_counts()),
        LossKind::Dice => losses::dice_loss(posteriors, &sup.labels),
        LossKind::Lovasz => losses::lovasz_softmax(posteriors, &sup.labels),
    }
}

/// Softmax posteriors of the network in inference mode.
pub fn posteriors(params: &NetworkParams, features: &Array2<f64>) -> Result<Array2<f64>> {
    let (logits, _) = network::forward(params, features, false, 0)?;
    losses::softmax(&logits)
}

/// Most probable class per sample, ties to the lowest index.
pub fn predict(params: &NetworkParams, features: &Array2<f64>) -> Result<Vec<usize>> {
    let post = posteriors(params, features)?;
    Ok(post.axis_iter(Axis(0)).map(argmax).collect())
}

fn check_sets(config: &TrainConfig, train_set: &Dataset, val_set: &Dataset) -> Result<()> {
    config.validate()?;
    if train_set.num_samples() == 0 || val_set.num_samples() == 0 {
        return Err(Error::Domain("training and validation sets must be non-empty".into()));
    }
    if train_set.num_features() != val_set.num_features() || train_set.num_classes() != val_set.num_classes() {
        return Err(Error::ShapeMismatch("training and validation sets differ in shape".into()));
    }
    if let Some(w) = &config.class_weights {
        if w.len() != train_set.num_classes() {
            return Err(Error::ShapeMismatch(format!(
                "{} class weights for {} classes",
                w.len(),
                train_set.num_classes()
            )));
        }
    }
    Ok(())
}

/// Trains a freshly He-initialized network.
pub fn train(config: &TrainConfig, train_set: &Dataset, val_set: &Dataset) -> Result<TrainOutcome> {
    check_sets(config, train_set, val_set)?;
    let specs = config.layer_specs(train_set.num_features(), train_set.num_classes());
    let params = network::init_he(&specs, seeds::derive(config.seed, INIT_STREAM))?;
    train_from(config, params, train_set, val_set)
}

/// Trains starting from the given parameters.
pub fn train_from(
    config: &TrainConfig,
    mut params: NetworkParams,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<TrainOutcome> {
    check_sets(config, train_set, val_set)?;
    if params.input_width() != train_set.num_features() || params.num_classes() != train_set.num_classes() {
        return Err(Error::ShapeMismatch("network does not match the dataset".into()));
    }
    let train_sup = Supervision::new(train_set, config.mode)?;
    let val_sup = Supervision::new(val_set, config.mode)?;
    let mut adam = AdamState::new(params.num_parameters(), config.alpha_lr, config.beta_fm, config.beta_sm)?;
    let epoch_root = seeds::derive(config.seed, EPOCH_STREAM);
    let dropout_root = seeds::derive(config.seed, DROPOUT_STREAM);

    let mut history = History::default();
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut ema = f64::NAN;
    let mut epoch = 0u64;
    let mut pending = Vec::new().into_iter();
    let mut flat = params.to_flat();

    for iteration in 1..=config.max_iterations {
        let batch = match pending.next() {
            Some(b) => b,
            None => {
                pending = data::batches(train_set.num_samples(), config.batch_size, seeds::derive(epoch_root, epoch))?
                    .into_iter();
                epoch += 1;
                pending.next().expect("at least one batch")
            }
        };
        let x = train_set.features.select(Axis(0), &batch);
        let sup = train_sup.select(&batch);
        let dropout_seed = seeds::derive(dropout_root, iteration as u64);
        let (logits, cache) = network::forward(&params, &x, true, dropout_seed)?;
        let post = losses::softmax(&logits)?;
        let eval = loss_on(config, &post, &sup)?;
        let grads = network::backward(&params, &cache, &eval.grad_logits)?;
        optimizer::adam_step(&mut adam, &mut flat, &grads.to_flat())?;
        params.set_flat(&flat)?;
        // leakages may have been projected onto [0, ∞)
        flat = params.to_flat();

        let val_post = posteriors(&params, &val_set.features)?;
        let val_loss = loss_on(config, &val_post, &val_sup)?.value;
        if !eval.value.is_finite() || !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at iteration {iteration}")));
        }
        ema = if iteration == 1 {
            val_loss
        } else {
            ema + (1.0 - config.ema_decay) * (val_loss - ema)
        };
        history.rows.push(HistoryRow {
            iteration,
            train_loss: eval.value,
            val_loss,
            val_loss_ema: ema,
            terms: eval.terms,
        });
        if ema < best.0 {
            best = (ema, iteration, params.clone());
        }
        if iteration - best.1 >= config.patience {
            break;
        }
    }
    let iterations = history.rows.len();
    Ok(TrainOutcome {
        params: best.2,
        history,
        best_iteration: best.1,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_samples: usize,
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub dice: Vec<f64>,
    pub jaccard: Vec<f64>,
    /// Classes never predicted; their precision is reported as 0.
    pub precision_undefined: Vec<bool>,
    /// Classes absent from the ground truth; their recall is reported as 0.
    pub recall_undefined: Vec<bool>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_dice: f64,
    pub macro_jaccard: f64,
    /// Mean per-class F1, identical to the mean DICE of the binary masks.
    pub macro_f1: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// One-vs-rest metrics of `predicted` against `truth`.
pub fn evaluate_predictions(truth: &[usize], predicted: &[usize], k: usize) -> Result<MetricsReport> {
    if truth.len() != predicted.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} samples",
            predicted.len(),
            truth.len()
        )));
    }
    if let Some(&c) = truth.iter().chain(predicted).find(|&&c| c >= k) {
        return Err(Error::Domain(format!("class {c} out of range for {k} classes")));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&t, &p) in truth.iter().zip(predicted) {
        confusion[t][p] += 1;
    }
    let mut r = MetricsReport {
        num_samples: truth.len(),
        accuracy: (0..k).map(|c| confusion[c][c]).sum::<usize>() as f64 / truth.len().max(1) as f64,
        precision: vec![0.0; k],
        recall: vec![0.0; k],
        dice: vec![0.0; k],
        jaccard: vec![0.0; k],
        precision_undefined: vec![false; k],
        recall_undefined: vec![false; k],
        macro_precision: 0.0,
        macro_recall: 0.0,
        macro_dice: 0.0,
        macro_jaccard: 0.0,
        macro_f1: 0.0,
        confusion: Vec::new(),
    };
    for c in 0..k {
        let tp = confusion[c][c] as f64;
        let fp = (0..k).filter(|&t| t != c).map(|t| confusion[t][c]).sum::<usize>() as f64;
        let fn_ = (0..k).filter(|&p| p != c).map(|p| confusion[c][p]).sum::<usize>() as f64;
        if tp + fp > 0.0 {
            r.precision[c] = tp / (tp + fp);
        } else {
            r.precision_undefined[c] = true;
        }
        if tp + fn_ > 0.0 {
            r.recall[c] = tp / (tp + fn_);
        } else {
            r.recall_undefined[c] = true;
        }
        let union = tp + fp + fn_;
        if union > 0.0 {
            r.dice[c] = 2.0 * tp / (2.0 * tp + fp + fn_);
            r.jaccard[c] = tp / union;
        } else {
            r.dice[c] = 1.0;
            r.jaccard[c] = 1.0;
        }
    }
    r.macro_precision = mean(&r.precision);
    r.macro_recall = mean(&r.recall);
    r.macro_dice = mean(&r.dice);
    r.macro_jaccard = mean(&r.jaccard);
    r.macro_f1 = r.macro_dice;
    r.confusion = confusion;
    Ok(r)
}

/// Metrics of the network's argmax predictions against the true labels.
pub fn evaluate(params: &NetworkParams, test_set: &Dataset) -> Result<MetricsReport> {
    let predicted = predict(params, &test_set.features)?;
    evaluate_predictions(&test_set.true_labels, &predicted, params.num_classes())
}
