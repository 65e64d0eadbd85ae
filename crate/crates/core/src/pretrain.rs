//! Offline pre-training on masked-bundle (cloze) instances.
//!
//! Each instance hides `k` items of a sampled partial bundle, and a random
//! share of every item's tags, then asks the network to recover them from the
//! visible context and the user's other bundles.

mod cloze;
mod loss;
mod trainer;

pub use cloze::{cloze_from_target, full_cloze_from_target, sample_cloze_instance, ClozeInstance};
pub use loss::{compute_tag_weights, offline_loss, LossComponents, OfflineLoss, TagWeights, WEIGHT_MAX, WEIGHT_MIN};
pub use trainer::{
    masked_item_accuracy, predict_masked, pretrain, pretrain_from, training_instances, validation_instances,
    EpochLog, PretrainConfig, PretrainOutcome,
};
