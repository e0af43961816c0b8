//! Deterministic federated-learning simulator for studying how label and
//! quantity skew affect FedAvg, FedProx, FedPer and SCAFFOLD.

pub mod aggregators;
pub mod analysis;
pub mod datasets;
pub mod error;
pub mod federation;
pub mod heterogeneity;
pub mod nn;
pub mod partition;
pub mod rng;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
