//! Inter-class correlation transfer between classifiers.
//!
//! The crate covers the transfer losses ([`icc`], [`kd`]), a small MLP
//! trainer ([`mlp`]), datasets, the teacher-student driver ([`distiller`]),
//! and a finite-difference oracle ([`gradcheck`]) that checks every
//! analytic gradient.

pub mod datasets;
pub mod distiller;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod icc;
pub mod kd;
pub mod mlp;
pub mod numerics;

pub use error::{Error, Result};
pub use numerics::Matrix;

/// `b×N` pre-softmax outputs for one mini-batch.
pub type LogitBatch = Matrix;
