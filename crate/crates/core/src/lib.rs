//! Generalized Kelly candidate labels and an expected-free-energy objective for
//! training discriminative classifiers, together with the usual baseline
//! losses (cross-entropy family, DICE, Lovász-Softmax), a small feed-forward
//! classifier with manual backpropagation, Adam, synthetic imbalanced data and
//! the oracle suites used to check all of the above.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kelly;
pub mod losses;
pub mod network;
pub mod optimizer;
pub mod seeds;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use kelly::{candidate_labels, KellySolution, ProbabilityVector};
pub use losses::{LabelMatrix, LossEvaluation};
pub use network::{LayerSpec, NetworkParams};
pub use trainer::{LossKind, MetricsReport, Mode, TrainConfig};
