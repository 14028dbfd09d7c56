//! Federated pre-training of tiny causal language models.
//!
//! The crate covers the numeric core (tensors and reverse-mode
//! differentiation), a miniature decoder-only transformer, client and server
//! optimizers, synthetic data sources with IID and by-source partitioning,
//! the client and aggregator procedures of a federation round, an analytic
//! wall-time and communication model for three aggregation topologies, and
//! a simulated data-parallel baseline.
//!
//! Interchangeable algorithms (server optimizers, local optimizers,
//! aggregation topologies, update post-processors, client training
//! strategies) sit behind traits and are registered by name in
//! [`registry`], so experiment configs select them at runtime.

pub mod aggregator;
pub mod baselines;
pub mod checkpoint;
pub mod client;
pub mod cost;
pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod registry;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamVector, Tensor, Var};
