//! Differentially private averaging of locally trained convex classifiers.
//!
//! Every simulated user trains a sensitivity-bounded one-vs-rest linear model
//! (projected SGD on a Huber-hinge or logistic objective), perturbs it with
//! Gaussian noise scaled to the number of honest users, and submits the scaled
//! result through a single round of pairwise-masked secure summation. The
//! server only ever sees the sum, which is the released `(ε, δ)`-DP average.
//!
//! Module map:
//!
//!  - [`rng`], [`types`]: seeded substreams and the shared domain types.
//!  - [`data`]: ingestion, synthetic blobs, clipping and partitioning.
//!  - [`svm`]: the local learner and its sensitivity bound.
//!  - [`dp`]: Gaussian mechanism calibration and accounting.
//!  - [`secagg`]: fixed-point codec, pairwise masks and aggregation.
//!  - [`protocol`]: client and server rounds.
//!  - [`sim`]: multi-user harness, sweeps and cross-validation.
//!  - [`learnability`]: empirical stability and convergence probes.
//!  - [`stats`]: small statistical helpers used by the probes and tests.

pub mod data;
pub mod dp;
mod error;
pub mod learnability;
pub mod protocol;
pub mod rng;
pub mod secagg;
pub mod sim;
pub mod stats;
pub mod svm;
pub mod types;

pub use error::{Error, Result};
pub use rng::{Rng, Seed};
pub use types::{DataPoint, Dataset, Hyperparams, LossKind, ModelStack, PrivacySpec};
