//! Weight-sharing elastic networks trained with progressive adversarial
//! robustness distillation, plus a surrogate accuracy/robustness predictor and
//! an NSGA-II architecture search.
//!
//! Module map:
//! - [`autodiff`]: tape-based reverse-mode engine over [`Array`]s.
//! - [`dynet`]: search spaces, architecture configs, the shared weight store,
//!   subnet extraction, encodings and FLOPs accounting.
//! - [`advkit`]: FGSM/PGD attacks, TRADES and robust-soft-label distillation
//!   losses, natural/robust evaluation.
//! - [`protrain`]: SGD, teacher pretraining, progressive and random-sampling
//!   distillation schedules, checkpoints.
//! - [`surrogate`]: evaluation rows and the fully-connected predictor.
//! - [`evo`]: constrained NSGA-II over architecture genotypes.
//! - [`data`]: datasets (synthetic mixtures and CIFAR binaries).

pub mod advkit;
pub mod archive;
pub mod array;
pub mod autodiff;
pub mod data;
pub mod dynet;
pub mod error;
pub mod evo;
pub mod protrain;
pub mod rng;
pub mod surrogate;

pub use array::Array;
pub use error::{Error, Result};
