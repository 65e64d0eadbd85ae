//! Bundle metrics, the conversational evaluation loop and baseline policies.

mod baselines;
mod bunt;
mod fm;
mod metrics;
mod runner;

pub use baselines::{AskOnlyPolicy, FreqPolicy, OraclePolicy, RandomPolicy};
pub use bunt::{evaluate_one_shot, one_shot_bundle, BuntMode, BuntPolicy};
pub use fm::{FmConfig, FmPolicy, FmScorer};
pub use metrics::{bundle_metrics, BundleMetrics};
pub use runner::{
    evaluate_policy, partition_users, run_conversation, ConversationOutcome, MetricReport, RecommenderPolicy,
    Stat,
};
