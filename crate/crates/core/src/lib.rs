//! Sequential visual-token pruning trained with demonstrations and PPO on a
//! synthetic planted-relevance environment.

pub mod agent;
pub mod autoencoder;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod demos;
pub mod env;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod ppo;
pub mod rollout;
pub mod tensor;

pub use error::{Error, Result};
