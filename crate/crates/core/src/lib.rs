//! Generalized decoupled knowledge distillation.
//!
//! The crate splits the classical KD loss over a partition of the class
//! indices into a top-level KL on group masses plus one KL per group on the
//! renormalized in-group distributions, then reweights those terms
//! independently. Modules:
//!
//! - [`numeric`]: stable softmax / log-softmax / KL primitives.
//! - [`partition`]: teacher top-k, target-label and three-way partitions.
//! - [`losses`]: KD, DKD, GDKD (two-group, n-group, top-1, dynamic weights),
//!   logit standardization and the full training objective.
//! - [`gradients`]: closed-form student-logit gradients and a
//!   finite-difference oracle.
//! - [`analysis`]: teacher prediction profiles, knee-point selection of `k`,
//!   teacher/student discrepancy matrices.
//! - [`trainer`]: a small MLP teacher/student harness on synthetic data.
//! - [`io`]: binary logit dumps, CSV/JSON reports and atomic writes.
//!
//! The numerical core is generic over [`Scalar`] (`f32`, `f64`); the aliases
//! below fix it to `f64`, which the identity checks require.

pub mod analysis;
pub mod error;
pub mod gradients;
pub mod io;
pub mod losses;
pub mod numeric;
pub mod partition;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Logits = numeric::LogitVector<f64>;
pub type Probs = numeric::ProbVector<f64>;
pub type Temp = numeric::Temperature<f64>;
pub type Breakdown = losses::LossBreakdown<f64>;
pub type Grad = gradients::GradVector<f64>;
pub type GradReport = gradients::GradMagnitudeReport<f64>;

pub type Logits32 = numeric::LogitVector<f32>;
pub type Probs32 = numeric::ProbVector<f32>;
pub type Temp32 = numeric::Temperature<f32>;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
