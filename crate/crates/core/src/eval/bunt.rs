use super::metrics::bundle_metrics;
use super::runner::{partition_users, MetricReport, RecommenderPolicy, ReportBuilder};
use crate::data::{Catalog, DatasetSplit, Partition};
use crate::env::{Action, ConversationState, Env, Feedback, ItemFeedback, ItemVerdict, Manage};
use crate::error::{Error, Result};
use crate::ids::{AttrId, CatId, ItemId, SlotId};
use crate::nn::{choose_manage, select_actions, Bunt, Matrix, Policies, Sampling};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// How the manage decision is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BuntMode {
    /// The learned gated manage policy.
    Learn,
    /// Always recommend.
    All,
}

/// BUNT heads driving a conversation. `E_u` is encoded once per conversation.
#[derive(Clone, Debug)]
pub struct BuntPolicy<'m> {
    model: &'m Bunt,
    mode: BuntMode,
    sampling: Sampling,
    name: String,
    e_u: Option<(crate::ids::UserId, Matrix)>,
}

impl<'m> BuntPolicy<'m> {
    pub fn new(model: &'m Bunt, mode: BuntMode, sampling: Sampling) -> Self {
        let name = match mode {
            BuntMode::Learn => "bunt-learn",
            BuntMode::All => "bunt-all",
        };
        BuntPolicy {
            model,
            mode,
            sampling,
            name: name.to_string(),
            e_u: None,
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn model(&self) -> &'m Bunt {
        self.model
    }

    /// Head distributions for the active slots of `state`.
    pub fn policies(&mut self, state: &ConversationState) -> Result<Policies> {
        let cached = matches!(&self.e_u, Some((u, _)) if *u == state.user);
        if !cached && !self.model.hp.ablation.no_long_term {
            self.e_u = Some((state.user, self.model.encode_history_value(&state.history)?));
        }
        let e_u = self.e_u.as_ref().filter(|(u, _)| *u == state.user).map(|(_, m)| m);
        let enc = self.model.encode_state(state, e_u)?;
        self.model.policies(&enc, &state.pools, &state.active)
    }

    fn manage(&self, p: &Policies, can_rec: bool, can_ask: bool, rng: &mut dyn RngCore) -> Option<Manage> {
        match self.mode {
            BuntMode::All if can_rec => Some(Manage::Recommend),
            BuntMode::All => None,
            BuntMode::Learn => choose_manage(p.p_recommend, can_rec, can_ask, self.sampling, rng),
        }
    }
}

impl RecommenderPolicy for BuntPolicy<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn begin(&mut self, state: &ConversationState) -> Result<()> {
        self.e_u = None;
        if !self.model.hp.ablation.no_long_term {
            self.e_u = Some((state.user, self.model.encode_history_value(&state.history)?));
        }
        Ok(())
    }

    fn decide(&mut self, state: &ConversationState, rng: &mut dyn RngCore) -> Result<Manage> {
        let p = self.policies(state)?;
        Ok(self.manage(&p, true, true, rng).unwrap_or(Manage::Recommend))
    }

    fn recommend(&mut self, state: &ConversationState, rng: &mut dyn RngCore) -> Result<BTreeMap<SlotId, ItemId>> {
        let p = self.policies(state)?;
        match select_actions(&p, Manage::Recommend, self.sampling, rng)? {
            Action::Recommend(m) => Ok(m),
            Action::Ask(_) => unreachable!(),
        }
    }

    fn ask(&mut self, state: &ConversationState, rng: &mut dyn RngCore) -> Result<BTreeMap<SlotId, (AttrId, CatId)>> {
        let p = self.policies(state)?;
        match select_actions(&p, Manage::Ask, self.sampling, rng)? {
            Action::Ask(m) => Ok(m),
            Action::Recommend(_) => unreachable!(),
        }
    }

    fn act(
        &mut self,
        state: &ConversationState,
        can_recommend: bool,
        can_ask: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Option<Action>> {
        if !can_recommend && !can_ask {
            return Ok(None);
        }
        let p = self.policies(state)?;
        match self.manage(&p, can_recommend, can_ask, rng) {
            None => Ok(None),
            Some(mode) => select_actions(&p, mode, self.sampling, rng).map(Some),
        }
    }
}

/// Fills slots with the model's own greedy predictions, treating each as
/// accepted, until `size` items are emitted. No user feedback is used.
pub fn one_shot_bundle(
    model: &Bunt,
    catalog: &Catalog,
    user: crate::ids::UserId,
    history: &[crate::data::Bundle],
    size: usize,
) -> Result<Vec<ItemId>> {
    if size > catalog.n_items() {
        return Err(Error::Validation(format!("cannot emit {size} distinct items")));
    }
    let env = Env::new(catalog, model.hp.k, u32::MAX)?;
    let mut state = env.init_conversation(user, history)?;
    let mut policy = BuntPolicy::new(model, BuntMode::All, Sampling::Greedy);
    policy.begin(&state)?;
    let mut emitted = Vec::with_capacity(size);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    while emitted.len() < size {
        let n_active = state.active.len().min(state.pools.item_pool_len());
        if n_active == 0 {
            break;
        }
        let picks = policy.recommend(&state, &mut rng)?;
        let mut verdicts = BTreeMap::new();
        for (&slot, &item) in &picks {
            if emitted.len() < size {
                emitted.push(item);
                verdicts.insert(slot, ItemVerdict::Accept);
            } else {
                verdicts.insert(slot, ItemVerdict::Ignore);
            }
        }
        let fb = Feedback::Items(ItemFeedback {
            verdicts,
            satisfied: false,
        });
        state = env.step(&state, &Action::Recommend(picks), &fb, None)?.state;
    }
    Ok(emitted)
}

/// One-shot evaluation: the model is told the target size and emits a
/// bundle in a single attempt.
pub fn evaluate_one_shot(
    model: &Bunt,
    split: &DatasetSplit,
    part: Partition,
    catalog: &Catalog,
    max_rounds: u32,
) -> Result<MetricReport> {
    let mut builder = ReportBuilder::default();
    builder.start_seed();
    for (u, history, target) in partition_users(split, part)? {
        let pred = one_shot_bundle(model, catalog, u, history, target.len())?;
        let set = pred.iter().copied().collect();
        let m = bundle_metrics(&set, target)?;
        let success = set == target.to_set();
        builder.push(m, vec![m.accuracy; max_rounds as usize], 1, success);
    }
    Ok(builder.finish("bunt-one-shot", max_rounds as usize))
}
