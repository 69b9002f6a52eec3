// Negated float comparisons are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod datasets;
pub mod envs;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};
