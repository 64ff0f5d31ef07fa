//! Semi-supervised class-incremental learning on correlated unlabeled streams.
//!
//! The crate covers the full pipeline: a hierarchical class taxonomy and a
//! synthetic Gaussian dataset that respects it, task/unlabeled stream
//! construction, an incremental MLP classifier with growing output groups,
//! every component of the DistillMatch objective (local distillation,
//! OoD-gated hard distillation, class balancing, consistency
//! regularization), a decomposed-confidence OoD detector, the continual
//! training loop with coreset rehearsal, and the evaluation metrics
//! (Ω, BWT, FGT, AUROC).

pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ood;
pub mod optim;
pub mod rng;
pub mod stream;
pub mod taxonomy;
pub mod trainer;

pub use error::{Error, Result};
