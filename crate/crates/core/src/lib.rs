//! Forecasting cause-of-death compositions with log-ratio and
//! alpha-transformations coupled to a Lee-Carter factor model.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod composition;
pub mod error;
pub mod intervals;
pub mod io;
pub mod lee_carter;
pub mod pipeline;
pub mod transforms;
pub mod tuning;

pub use error::{Error, ErrorFamily, Result, Stage};

/// Library version string embedded in every output file.
pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
