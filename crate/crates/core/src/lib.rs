//! Low-rank Mahalanobis metric learning driven by a weighted approximate-rank
//! (WARP) hinge loss and an approximately orthonormal (AON) regularizer.
//!
//! The crate is organised the way the pipeline runs:
//!
//! * [`dataset`] loads and validates labeled features, builds the pair and
//!   negative indices the sampler consumes, and generates splits and
//!   single-shot trials.
//! * [`ranking`] holds rank weighting, the margin-penalized rank, the
//!   two-step violator sampler and an exact loss used as an oracle.
//! * [`linear`] learns a projection `W` with Adam (or plain SGD).
//! * [`kernel`] learns coefficients `A` with `W = A Xᵀ` using preconditioned
//!   stochastic updates that only touch three columns per triplet.
//! * [`eval`] computes CMC curves, rank-k, AUC and condition numbers, and
//!   runs the split × trial protocol.
//! * [`sweep`] grid-searches `(λ, η)` on validation splits.
//! * [`model_io`] reads and writes model and Gram containers.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod kernel;
pub mod linear;
pub mod model_io;
pub mod ranking;
pub mod sweep;

mod seed;

pub use dataset::{LabeledDataset, PairIndex, SingleShotTrial, SplitPlan};
pub use error::{Error, Result};
pub use eval::{CmcCurve, EvalReport};
pub use kernel::{GramMatrix, KernelKind, KernelMetricModel, KernelSpec};
pub use linear::{LinearMetricModel, Optimizer, Regularizer, TrainConfig};
pub use ranking::{LossConfig, RankWeighting, TripletSample};
pub use seed::derive_seed;
