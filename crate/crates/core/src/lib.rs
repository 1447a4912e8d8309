//! Two-group causal effect estimation by covariate-balancing weights.
//!
//! The pipeline runs: load and encode data ([`data`]), inspect and trim
//! overlap ([`overlap`]), compute weights with nine engines ([`weights`]),
//! compare balance ([`balance`]), fit a weighted outcome regression
//! ([`outcome`]) and probe sensitivity to an unobserved confounder
//! ([`sensitivity`]).

// Negated comparisons deliberately treat NaN as failing the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod balance;
pub mod data;
pub mod error;
pub mod example;
pub mod linalg;
pub mod outcome;
pub mod overlap;
pub mod pipeline;
pub mod report;
pub mod sensitivity;
pub mod stats;
pub mod weights;

pub use error::{Error, FieldError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
