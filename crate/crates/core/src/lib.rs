//! Test-time adaptation lab.
//!
//! Self-learning objectives (hard and soft pseudo-labeling, entropy
//! minimization, robust pseudo-labeling with generalized cross entropy and a
//! temperature-parameterized unified loss) applied to a small
//! batch-normalized classifier on synthetic distribution shifts, together
//! with corruption-robustness metrics and a two-point model of self-learning
//! dynamics with closed-form stability analysis.

pub mod adaptation;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod seed;
pub mod training;
pub mod twopoint;

pub use error::{Error, Result};
