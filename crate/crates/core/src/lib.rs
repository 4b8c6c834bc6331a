//! Policy-based training of generative flow networks with subtrajectory
//! evaluation balance, plus an exact oracle for small environments.

pub mod actor;
pub mod checkpoint;
pub mod config;
pub mod diff;
pub mod env;
pub mod error;
pub mod objectives;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
