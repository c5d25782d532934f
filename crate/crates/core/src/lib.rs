//! Degenerate random environments on `Z^d`: forward clusters, local terraces,
//! pivotal sites, the local-modification construction and Monte Carlo scans
//! of finite-box blocking probabilities.

pub mod enhancement;
pub mod error;
pub mod experiments;
pub mod environment;
pub mod lattice;
pub mod reachability;
pub mod terrace;
pub mod validate;

pub use error::{Error, Result};
