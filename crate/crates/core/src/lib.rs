//! Uncertainty-driven active learning with Bayesian neural classifiers.

pub mod acquisition;
pub mod bayes;
pub mod codec;
pub mod data;
pub mod engine;
pub mod error;
pub mod export;
pub mod model;
pub mod numeric;
pub mod service;
pub mod vit;

pub use error::{Error, Result};
