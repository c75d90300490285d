//! Deep clustering: a multilayer autoencoder trained jointly with K-means in
//! its latent space.
//!
//! The crate is organized bottom-up:
//!
//! - [`linalg`]: dense row-major matrices and products.
//! - [`optim`]: SGD with momentum, learning-rate schedules, mini-batching.
//! - [`autoenc`]: the autoencoder, its gradients, layer-wise pretraining and
//!   checkpoints.
//! - [`kmeans`]: Lloyd's algorithm, assignments and online centroid updates.
//! - [`dcn`]: the alternating joint training loop and its variants.
//! - [`metrics`]: NMI, ARI and clustering accuracy.
//! - [`synth`]: synthetic datasets generated from latent Gaussian blobs.
//! - [`data`], [`config`], [`experiment`]: file formats, configuration and
//!   end-to-end runs.
//!
//! With the default `parallel` feature the heavy loops run on rayon; without
//! it the same code runs sequentially and produces identical results.

pub mod autoenc;
pub mod config;
pub mod data;
pub mod dcn;
pub mod error;
pub mod experiment;
pub mod kmeans;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
pub use linalg::Matrix;
