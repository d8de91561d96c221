//! Training and evaluation machinery for diverse generalization under
//! distribution shift.
//!
//! The problem setting: a labeled source distribution where several binary
//! concepts are perfectly (or almost perfectly) correlated, and an unlabeled
//! target distribution where they come apart. An ensemble of classification
//! heads on a shared trunk is trained so that different heads latch onto
//! different concepts, using one of three disagreement objectives:
//!
//! * ACE: confident top-k pseudo-labeling of presumed disagreement instances,
//!   driven by a lower bound on the target mix rate ([`objectives`]).
//! * DivDis: mutual information between head outputs on the target batch.
//! * D-BAT: agreement penalty against a frozen first head.
//!
//! Supporting pieces: a small deterministic MLP ensemble ([`nn`]), synthetic
//! concept-labeled benchmarks ([`data`]), the training loop ([`trainer`]),
//! oracle-assignment evaluation metrics ([`metrics`]), a brute-force
//! proper-scoring checker on discrete worlds ([`scoring`]), and unsupervised
//! mix-rate inference by validation-loss sweep ([`mixrate`]).
//!
//! Everything is 64-bit, seeded, and single-threaded per run: identical
//! configs and seeds give bitwise-identical results.

pub mod data;
pub mod error;
pub mod metrics;
pub mod mixrate;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod scoring;
pub mod trainer;

pub use error::{CoreError, Result};
