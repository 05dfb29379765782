//! Long-tailed classification treated causally: the optimizer's momentum
//! velocity biases features toward the data-rich head classes, and this crate
//! both measures that bias and removes it at inference time.
//!
//! The pieces:
//!
//! - [`numeric`]: dense f64 vectors/matrices, an MLP backbone with manual
//!   backpropagation, softmax cross-entropy.
//! - [`optim`]: SGD with momentum (the velocity buffer is the bias source)
//!   and cosine/step/constant learning-rate schedules.
//! - [`heads`]: the classifier zoo — a multi-head normalized de-confounded
//!   head plus linear, cosine, capsule, tau-norm, and LWS baselines.
//! - [`ema`]: an exponential moving average of features whose unit direction
//!   is the "head direction" that features drift toward under imbalance.
//! - [`infer`]: plain, counterfactual (TDE), and background-exempted
//!   prediction, plus inverse-frequency loss weights.
//! - [`data`]: synthetic long-tailed datasets, frequency splits, samplers,
//!   and file formats.
//! - [`trainer`]: one-stage and two-stage training pipelines with
//!   checkpointing.
//! - [`eval`]: balanced evaluation with many/medium/few/overall breakdown,
//!   alpha sweeps, and per-class diagnostics.
//!
//! Everything is deterministic given explicit seeds; no wall-clock or OS
//! entropy is consulted anywhere.

// Indexed loops over parallel slices are the house style in the numeric
// kernels; iterator zips obscure the arithmetic there.
#![allow(clippy::needless_range_loop)]

mod binio;

pub mod data;
pub mod ema;
pub mod error;
pub mod eval;
pub mod heads;
pub mod infer;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
pub use model::Model;
