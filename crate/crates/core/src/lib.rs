//! TGNN4I: a continuous-time temporal graph neural network for forecasting
//! irregularly observed graph time series, with GRU-D and Predict Previous
//! baselines, the multi-horizon loss, synthetic data, a training harness and
//! a command-line interface.
//!
//! Modules, bottom up:
//! - [`autodiff`]: tape-based reverse-mode differentiation over dense arrays.
//! - [`dynamics`]: closed-form latent evolution between observations.
//! - [`graph`]: weighted directed graphs, k-NN and Delaunay builders.
//! - [`gnn`]: message-passing layers.
//! - [`data`]: observation sequences, CSV storage, synthetic generator.
//! - [`model`]: TGNN4I and the baselines.
//! - [`loss`]: weighted multi-horizon loss.
//! - [`train`]: Adam, early stopping, evaluation, gradient checks.
//! - [`verify`]: numerical self-checks.
//! - [`cli`]: the `tgnn4i` command.

// NaN-rejecting range checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod dynamics;
pub mod gnn;
pub mod graph;
pub mod loss;
pub mod model;
pub mod par;
pub mod train;
pub mod verify;
