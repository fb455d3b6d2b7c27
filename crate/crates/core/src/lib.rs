//! GNN-based joint UAV placement and power control for multi-UAV downlink
//! sharing spectrum with D2D links.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod experiment;
pub mod gnn;
pub mod graph;
pub mod physics;
pub mod scalar;
pub mod scenario;
pub mod training;

pub use autodiff::{Trace, Var};
pub use gnn::{Architecture, GnnParams, ModelConfig};
pub use physics::{Decisions, PhysConstants, Physics, Scenario};
pub use scalar::Scalar;
pub use scenario::{Dataset, GenConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
