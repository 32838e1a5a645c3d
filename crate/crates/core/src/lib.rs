//! Behavioral simulator for temperature-compensated subthreshold FeFET
//! compute-in-memory arrays.

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cell;
pub mod device;
pub mod error;
pub mod params;

pub use error::{Error, Result};
pub mod analysis;
pub mod array;
pub mod calibrate;
pub mod cli;
pub mod nn_eval;
