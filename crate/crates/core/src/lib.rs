//! Contrastive state representations for DDPG-based interactive recommendation.
//!
//! The crate is organised bottom-up:
//!
//! * [`numcore`]: matrices, reverse-mode differentiation, Adam, Dice.
//! * [`staterep`]: behavior encoding and the pooled/attention state vector.
//! * [`prcl`]: preference-ranking contrastive learning.
//! * [`replay`]: prioritized replay over raw interaction histories.
//! * [`agent`]: DDPG actor-critic with target networks.
//! * [`env`]: the rating-table simulator and a synthetic drifting-interest simulator.
//! * [`harness`]: configuration, the training loop, metrics and ablation suites.

pub mod agent;
pub mod env;
pub mod error;
pub mod harness;
pub mod numcore;
pub mod prcl;
pub mod replay;
pub mod staterep;

pub use error::{Error, Result};
