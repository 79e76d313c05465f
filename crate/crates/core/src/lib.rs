//! Crystal property prediction combining short-range message passing over
//! periodic radius graphs with a reciprocal-space long-range block and a
//! mixture-of-experts multi-task decoder.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod embed;
pub mod error;
pub mod gradsuite;
pub mod graph;
pub mod lattice;
pub mod local;
pub mod model;
pub mod moe;
pub mod nn;
pub mod reciprocal;
pub mod synthetic;
pub mod testing;
pub mod train;

pub use error::{Error, Result};
