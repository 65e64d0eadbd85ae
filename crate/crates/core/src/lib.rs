//! Conversational bundle recommendation workbench.
//!
//! The crate is organised along the life of a conversation:
//!
//! - [`data`]: catalog, interactions, leave-one-out split, synthetic corpora
//! - [`env`]: slot lifecycle, candidate pools, feedback transitions, rewards
//! - [`simulator`]: rule-based user holding a target bundle
//! - [`nn`]: the BUNT encoder/decoder, its policy heads and exact gradients
//! - [`pretrain`]: cloze instances and the offline multi-task loss
//! - [`finetune`]: episode collection and clipped policy-gradient updates
//! - [`eval`]: bundle metrics, the evaluation loop and baseline policies

pub mod data;
pub mod env;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod ids;
pub mod nn;
pub mod pretrain;
pub mod simulator;

pub use error::{Error, Result};
pub use ids::{AttrId, CatId, ItemId, SlotId, UserId};
