pub mod bridge;
pub mod envs;
pub mod error;
pub mod harness;
pub mod koopman;
pub mod metrics;
pub mod mpmi;
pub mod rollout;
pub mod sampling;

pub use error::{Error, Result};
