//! Contracting implicit recurrent networks: models, contraction certificates,
//! initialization, training, datasets and evaluation.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod contraction;
pub mod data;
pub mod error;
pub mod eval;
pub mod init;
pub mod linalg;
pub mod models;
pub mod optim;
pub mod training;

pub use error::{Error, Result};
pub use nalgebra;
