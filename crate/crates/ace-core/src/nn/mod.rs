//! Deterministic multi-head MLP with analytic backprop.
//!
//! The model is a shared ReLU trunk followed by F independent linear heads,
//! each emitting two logits that are softmaxed into a binary distribution.
//! All heads consume the identical trunk output for a given input. Arithmetic
//! is plain sequential f64, so a fixed seed gives a bitwise-reproducible
//! parameter trajectory.
//!
//! The split of responsibilities: this module turns parameters and inputs
//! into per-head probabilities and turns per-head *logit* gradients back into
//! parameter gradients. Loss functions (and their prob-to-logit chain rules)
//! live in [`crate::objectives`].

mod model;
mod optim;

pub mod checkpoint;

pub use model::{
    softmax2, softmax2_backward, Arch, Batch, Dense, EnsembleModel, Forward, Grads, LayerGrad,
};
pub use optim::{OptKind, Optimizer, OptimizerConfig, ParamFilter};

/// Per-head, per-instance binary distributions: `probs[head][instance]`.
pub type HeadProbs = Vec<Vec<[f64; 2]>>;

/// Gradient of a scalar loss with respect to the logits, same shape as
/// [`HeadProbs`].
pub type LogitGrads = Vec<Vec<[f64; 2]>>;

/// Floor applied inside every log-likelihood so certain-but-wrong
/// predictions produce a large finite loss instead of infinity.
pub const PROB_EPS: f64 = 1e-12;

/// Negative log-likelihood of one probability, clamped at [`PROB_EPS`].
pub fn nll(p: f64) -> f64 {
    -p.max(PROB_EPS).ln()
}
