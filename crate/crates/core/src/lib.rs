//! Label-only model extraction: targets, samplers, the adaptive attack loop
//! and the metrics used to judge the extracted replica.

// `!(x > 0.0)` is used on purpose to reject NaN alongside bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod clustering;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod mathcore;
pub mod models;
pub mod oracle;
pub mod samplers;
pub mod seeds;

pub use error::{Error, Result};
