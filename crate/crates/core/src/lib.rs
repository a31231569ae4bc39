//! Deterministic federated-learning simulator.
//!
//! The crate provides from-scratch models ([`model`]), a synthetic non-IID
//! data generator ([`data`]), a round-based federation engine ([`engine`])
//! and the aggregation/personalization strategies built on it: clustered
//! federations ([`cluster`]), personalized models ([`personal`]),
//! distillation across heterogeneous models ([`distill`]) and one-class
//! anomaly detection ([`oneclass`]). [`experiment`] ties them together
//! behind a config-driven runner.

// `!(x > 0.0)` is how the validators reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod data;
pub mod distill;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod oneclass;
pub mod persist;
pub mod personal;
pub mod rng;

pub use error::{FlError, Result};
