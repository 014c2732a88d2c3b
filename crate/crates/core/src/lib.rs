//! Generalised least squares with continuous-time AR(1) errors for
//! unequally spaced, grouped water-quality series: ingest, design
//! construction, REML/ML fitting, stepwise AIC selection, blocked
//! cross-validation and infinite-horizon prediction.

// `!(a > b)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifact;
pub mod car1;
pub mod cli;
pub mod data;
pub mod design;
pub mod error;
pub mod gls;
pub mod infer;
pub mod optimize;
pub mod oracle;
pub mod select;
pub mod validate;

pub use error::{Error, Result};
