//! Convolutional autoencoders for unsupervised image anomaly detection.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`graph`], [`gradcheck`]: dense tensors and a reverse-mode
//!   autodiff graph.
//! * [`nn`]: convolution, transposed convolution, pooling, upsampling and
//!   dense layers over a named parameter store.
//! * [`models`]: CAE, CVAE and VQ-VAE with their losses.
//! * [`optim`]: Adam and the epoch / wall-clock training loops.
//! * [`data`]: directory ingestion, resizing, augmentation, splitting and a
//!   synthetic leaf benchmark.
//! * [`detect`]: scoring, thresholds, AUC-ROC, class gap and heatmaps.
//! * [`checkpoint`]: binary model persistence.

pub mod checkpoint;
pub mod data;
pub mod detect;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod models;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Real, Tensor};
