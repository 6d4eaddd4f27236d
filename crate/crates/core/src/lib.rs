//! A recurrent language-modelling laboratory.
//!
//! Language models built from mogrified LSTM and Rewired LSTM cells, with
//! hand-derived backward passes checked against finite differences.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cells;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod mogrifier;
pub mod model;
pub mod numerics;
pub mod params;
pub mod training;

pub use error::{Error, Result};
