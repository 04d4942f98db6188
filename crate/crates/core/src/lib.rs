pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod mask_upgrade;
pub mod metrics;
pub mod model;
pub mod param;
pub mod protocol;

pub use error::{Error, Result};
