//! The conversational bundle MDP.
//!
//! A conversation keeps `K` active slots. Each round the system either
//! recommends one item per active slot or asks one (attribute, category) pair
//! per active slot; the user answers per slot and the transition rules below
//! update slot contexts, candidate pools and the result log.

mod state;
mod trajectory;
mod transition;

pub use state::{CandidatePools, ConversationState, ResultId, SlotContext};
pub use trajectory::{replay, Proposal, RoundKind, RoundRecord, SlotReward, SlotVerdict};
pub use transition::{
    refresh_slots, Action, Env, Feedback, ItemFeedback, ItemVerdict, Manage, Rewards, StepOutcome, TagFeedback,
    TagVerdict,
};

use crate::data::Bundle;
use crate::eval::bundle_metrics;
use serde::{Deserialize, Serialize};

/// Which bundle metric is used as the conversation-level reward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMetric {
    #[default]
    F1,
    Precision,
    Recall,
    Accuracy,
}

/// Conversation-level reward: zero until the conversation ends, then the
/// chosen metric of the accepted bundle against the target.
pub fn high_level_reward(
    state: &ConversationState,
    done: bool,
    target: &Bundle,
    metric: RewardMetric,
) -> f64 {
    if !done {
        return 0.0;
    }
    let m = bundle_metrics(&state.accepted, target).expect("target bundles are non-empty");
    match metric {
        RewardMetric::F1 => m.f1,
        RewardMetric::Precision => m.precision,
        RewardMetric::Recall => m.recall,
        RewardMetric::Accuracy => m.accuracy,
    }
}

/// True once the accepted bundle equals the target or the round budget is spent.
pub fn is_terminal(state: &ConversationState, target: &Bundle, max_rounds: u32) -> bool {
    state.accepted.iter().eq(target.items().iter()) || state.round > max_rounds
}
