//! Online fine-tuning: episodes against the simulator fill per-agent
//! buffers, and each agent's head is updated with a clipped policy gradient
//! while the shared encoder stays fixed.

mod buffer;
mod collect;
mod ppo;
mod trainer;

pub use buffer::{returns, Agent, Buffers, StateRepr, TransitionRecord};
pub use collect::{collect_episode, Episode};
pub use ppo::{ppo_update, PpoConfig, PpoStats};
pub use trainer::{finetune, manager_bandit, manager_prob, BanditRun, FinetuneConfig, FinetuneLog, FinetuneOutcome};
