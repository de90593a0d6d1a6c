//! RP-CATE: recurrent perceptron, channel attention and feed-forward blocks
//! over pseudo-sequential tabular data, trained to correct the bias of a
//! mechanistic model.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`tape`]: dense `f64` tensors and reverse-mode
//!   differentiation for the handful of operations the model needs.
//! - [`data`]: CSV ingest, sorting into pseudo-sequential order, cyclic
//!   windows and pseudo-image construction.
//! - [`synth`]: synthetic mechanistic-plus-bias datasets.
//! - [`model`]: the forward graph and parameter containers.
//! - [`checkpoint`]: text checkpoints that round-trip bit-exactly.
//! - [`train`]: loss, Adam, grid search and ablations.
//! - [`metrics`]: MAE/RMSE/ARE/error counts/MIR and attention export.
//! - [`config`] and [`cli`]: run configuration and the `rpcate` binary.

pub mod error;
pub mod tensor;
pub mod tape;
pub mod data;
pub mod synth;
pub mod model;
pub mod metrics;
pub mod train;
pub mod checkpoint;
pub mod config;
pub mod cli;

pub use error::{DataError, MetricsError, ModelError, TensorError, TrainError};
pub use tensor::Tensor;
