//! Limit-order-book mid-price classification benchmark.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod filters;
pub mod ingest;
pub mod labeling;
mod linalg;
pub mod models;
pub mod synth;

pub use error::{Error, Result};
