//! Deterministic federated active learning simulator.
//!
//! Clients hold labeled and unlabeled pools of a synthetic non-IID dataset,
//! train a small dense classifier locally, and are averaged by FedAvg every
//! round. Every K-th round each client queries its unlabeled pool, scoring
//! samples by the entropy of the mean prediction of its own model and the
//! incoming global model, and a ground-truth oracle annotates the top picks.

// `!(x >= 0.0)` style checks reject NaN on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod active;
pub mod data;
pub mod error;
pub mod federation;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod stats;

pub use error::{FedAlError, Result};
