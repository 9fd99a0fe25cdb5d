//! `efe`: generate synthetic datasets, train classifiers with any of the
//! supported losses and run the verification suites.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use efe_core::data::{self, Dataset};
use efe_core::trainer::{self, LossKind, Mode, TrainConfig};
use efe_core::verify::{self, Suite};
use efe_core::{seeds, Error};
use serde::Deserialize;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_INCOMPATIBLE: u8 = 3;

#[derive(Parser)]
#[command(name = "efe", version, about = "Expected-free-energy classifier toolkit")]
struct Cli {
    /// Omit the timestamp header line.
    #[arg(long, global = true)]
    no_timestamp: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic imbalanced dataset as CSV.
    Generate(GenerateArgs),
    /// Train a classifier and evaluate it on the validation set.
    Train(TrainArgs),
    /// Run oracle checks of the Kelly solver, loss gradients and Lovász extension.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    features: usize,
    #[arg(long)]
    samples: usize,
    /// Comma-separated class frequencies summing to 1.
    #[arg(long, value_delimiter = ',')]
    frequencies: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    prior_noise: f64,
    #[arg(long, default_value_t = 0.0)]
    label_flip: f64,
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    /// JSON experiment configuration; flags take precedence over its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Modulation factor of the focal losses.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value = "all")]
    suite: Suite,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentConfig {
    loss: Option<LossKind>,
    mode: Option<Mode>,
    gamma_mod: Option<f64>,
    alpha_lr: Option<f64>,
    beta_fm: Option<f64>,
    beta_sm: Option<f64>,
    batch_size: Option<usize>,
    max_iterations: Option<usize>,
    patience: Option<usize>,
    ema_decay: Option<f64>,
    seed: Option<u64>,
    hidden_widths: Option<Vec<usize>>,
    dropout_retention: Option<f64>,
    class_weights: Option<Vec<f64>>,
    train: Option<PathBuf>,
    val: Option<PathBuf>,
    out_dir: Option<PathBuf>,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Incompatible(_) => EXIT_INCOMPATIBLE,
            _ => EXIT_FAILURE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if !cli.no_timestamp {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        println!("# efe {} run at unix time {secs}", env!("CARGO_PKG_VERSION"));
    }
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Verify(a) => run_verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn generate(a: GenerateArgs) -> CmdResult {
    let freq = data::validate_frequencies(&a.frequencies).map_err(|e| Failure::usage(e.to_string()))?;
    if freq.len() != a.classes {
        return Err(Failure::usage(format!(
            "--frequencies has {} entries for {} classes",
            freq.len(),
            a.classes
        )));
    }
    if !(0.0..=1.0).contains(&a.prior_noise) {
        return Err(Failure::usage("--prior-noise must lie in [0, 1]"));
    }
    if !(0.0..1.0).contains(&a.label_flip) {
        return Err(Failure::usage("--label-flip must lie in [0, 1)"));
    }
    if a.samples < a.classes || a.features == 0 {
        return Err(Failure::usage("--samples must be >= --classes and --features >= 1"));
    }
    let mut set = data::generate(a.classes, a.features, a.samples, &freq, a.separation, a.seed)?;
    set.apply_prior_noise(a.prior_noise)?;
    set.apply_label_flip(a.label_flip, seeds::derive(a.seed, 1))?;
    set.save(&a.out)?;
    let counts: Vec<String> = set.class_counts().iter().map(usize::to_string).collect();
    println!("{}", counts.join(","));
    Ok(())
}

fn read_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("invalid config {}: {e}", path.display())))
}

fn train(a: TrainArgs) -> CmdResult {
    let exp = read_config(a.config.as_deref())?;
    let loss = a.loss.or(exp.loss).ok_or_else(|| Failure::usage("--loss is required"))?;
    let mode = a.mode.or(exp.mode).ok_or_else(|| Failure::usage("--mode is required"))?;
    let train_path = a.train.or(exp.train).ok_or_else(|| Failure::usage("--train is required"))?;
    let val_path = a.val.or(exp.val).ok_or_else(|| Failure::usage("--val is required"))?;
    let out_dir = a.out_dir.or(exp.out_dir).ok_or_else(|| Failure::usage("--out-dir is required"))?;

    let mut config = TrainConfig::new(loss, mode);
    macro_rules! take {
        ($($field:ident),*) => { $(if let Some(v) = exp.$field { config.$field = v; })* };
    }
    take!(gamma_mod, alpha_lr, beta_fm, beta_sm, batch_size, max_iterations, patience, ema_decay, seed, hidden_widths, dropout_retention);
    config.class_weights = exp.class_weights;
    if let Some(g) = a.gamma {
        config.gamma_mod = g;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    config.validate().map_err(|e| match e {
        Error::Incompatible(_) => Failure::from(e),
        other => Failure::usage(other.to_string()),
    })?;

    for p in [&train_path, &val_path] {
        if !p.is_file() {
            return Err(Failure::usage(format!("{} is not a readable file", p.display())));
        }
    }
    fs::create_dir_all(&out_dir).map_err(|e| Failure {
        code: EXIT_FAILURE,
        message: format!("cannot create {}: {e}", out_dir.display()),
    })?;

    let train_set = Dataset::load(&train_path)?;
    let val_set = Dataset::load(&val_path)?;
    let outcome = trainer::train(&config, &train_set, &val_set)?;
    let metrics = trainer::evaluate(&outcome.params, &val_set)?;

    outcome.params.save(out_dir.join("model.json"))?;
    fs::write(out_dir.join("history.csv"), outcome.history.to_csv_string()?).map_err(Error::from)?;
    fs::write(out_dir.join("metrics.json"), metrics.to_json()?).map_err(Error::from)?;
    println!(
        "iterations={} best_iteration={} accuracy={:.4} macro_f1={:.4}",
        outcome.iterations, outcome.best_iteration, metrics.accuracy, metrics.macro_f1
    );
    Ok(())
}

fn run_verify(a: VerifyArgs) -> CmdResult {
    let results = verify::run(a.suite, a.seed, a.trials)?;
    for r in &results {
        println!("{r}");
    }
    if results.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_FAILURE,
            message: "one or more properties failed".into(),
        })
    }
}
