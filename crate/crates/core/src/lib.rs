//! Myocardium segmentation of 2D+T cine MR clips, with a synthetic phantom
//! generator for training and evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod preprocess;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
