//! Compiles trained classical machine-learning models into tensor graphs.
//!
//! The pipeline is: parse a [`model::TrainedModel`] from JSON, lower it into
//! operator representations ([`convert`]), build an extended computational
//! graph ([`ecg`]), rewrite it with accuracy-preserving passes ([`passes`]),
//! and translate the result into a kernel plan that runs on the reference
//! tensor kernels ([`runtime`]). [`oracle`] evaluates the same models with
//! plain scalar code and is the ground truth for equivalence checks.

pub mod cli;
pub mod convert;
pub mod ecg;
pub mod model;
pub mod oracle;
pub mod passes;
pub mod runtime;
pub mod tensor;
