//! Kinematic tokenization of daily market data and the decision stack built
//! on top of it.
//!
//! The pipeline has five stages. Raw OHLCV bars are log-transformed and fed to
//! an enrichment layer that reconstructs smooth price and volume trajectories
//! by solving equality-constrained quadratic programs ([`enrichment`]). The
//! fitted piecewise polynomials are sliced into 9-channel kinematic tokens
//! ([`tokenizer`]), labeled with ternary momentum targets ([`labeling`]), and
//! used to train a small causal transformer ([`model`]). Trained policies are
//! evaluated through a cash/long state machine with per-side costs and a
//! periodic tax on realized gains ([`backtest`]), with post-hoc analysis in
//! [`diagnostics`]. The [`pipeline`] module wires the stages together behind a
//! TOML-configured artifact flow.
//!
//! All numerics are `f64` and every code path is deterministic: fixed seeds,
//! ordered containers, and sequential reductions. Running the same config
//! twice produces byte-identical artifacts.

pub mod backtest;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod enrichment;
pub mod error;
pub mod labeling;
pub mod model;
pub mod pipeline;
pub mod series;
pub mod spline;
pub mod tokenizer;

pub use error::{Error, Result};
