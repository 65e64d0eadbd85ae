//! The BUNT network on a small reverse-mode autodiff tape.
//!
//! [`Bunt`] owns the parameters; forward passes record onto a [`Tape`] that
//! borrows them read-only, and [`Tape::backward`] returns exact gradients.

mod matrix;
mod model;
mod params;
mod policy;
mod tape;

pub use matrix::Matrix;
pub use model::{
    slot_inputs, truncate_bundle, Ablation, Bunt, Checkpoint, Forward, HistoryInput, Hyperparameters,
    ManageAggregate, SlotInput, TensorRecord, Vocab, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use params::{Adam, Gradients, ParamGroup, ParamId, ParamStore, Trainable};
pub use policy::{choose_manage, pick_index, select_actions, EncodedState, Policies, Sampling, SlotPolicy};
pub use tape::{log_softmax_in_place, sigmoid, softmax_in_place, Tape, Var};
