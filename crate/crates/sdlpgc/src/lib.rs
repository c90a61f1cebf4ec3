#![deny(unsafe_code)]

//! Forecasting toolkit for geo-coded multivariate time series built around
//! jointly learned static and dynamic dependency graphs fused by a
//! personalized graph convolution with learned restart probabilities.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: a reverse-mode autodiff tape over `f64` ndarrays.
//! - [`nn`]: layers and the Adam optimizer.
//! - [`data`]: dataset loading, validation, normalization, windowing, splits.
//! - [`graph`]: static (embedding-based) and dynamic (window-conditioned)
//!   adjacency learning.
//! - [`tcn`]: gated dilated-inception temporal convolution.
//! - [`lpgc`]: personalized propagation with self-evolution and restart.
//! - [`model`]: the assembled forecaster, ablation variants, checkpoints.
//! - [`train`]: loss, metrics, the trainer, the persistence baseline, and
//!   the ablation suite.
//! - [`cli`]: the `sdlpgc` command-line interface.

pub mod cli;
pub mod data;
pub mod error;
pub mod graph;
pub mod lpgc;
pub mod model;
pub mod nn;
pub mod tcn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
