use super::runner::RecommenderPolicy;
use crate::data::{Bundle, DatasetSplit, UserHistory};
use crate::env::{ConversationState, Manage};
use crate::error::{Error, Result};
use crate::ids::{AttrId, CatId, ItemId, SlotId, UserId};
use rand::seq::index::sample;
use rand::{Rng, RngCore};
use std::collections::{BTreeMap, HashMap};

/// Fills the active slots in order from `ranked`, skipping items outside
/// the pool, then from the remaining pool in id order.
pub(crate) fn fill_slots(state: &ConversationState, ranked: &[ItemId]) -> Result<BTreeMap<SlotId, ItemId>> {
    let mut out = BTreeMap::new();
    let mut taken = Vec::new();
    let mut iter = ranked
        .iter()
        .copied()
        .chain(state.pools.item_pool(SlotId(0)))
        .filter(|&i| state.pools.has_item(SlotId(0), i));
    for &slot in &state.active {
        let item = iter
            .by_ref()
            .find(|i| !taken.contains(i))
            .ok_or_else(|| Error::Contract("fewer distinct in-pool items than active slots".into()))?;
        taken.push(item);
        out.insert(slot, item);
    }
    Ok(out)
}

fn uniform_tags(state: &ConversationState, rng: &mut dyn RngCore) -> Result<BTreeMap<SlotId, (AttrId, CatId)>> {
    let mut out = BTreeMap::new();
    for &slot in &state.active {
        let attrs = state.pools.attr_pool(slot);
        let cats = state.pools.cat_pool(slot);
        if attrs.is_empty() || cats.is_empty() {
            return Err(Error::Contract(format!("empty tag pool in slot {slot}")));
        }
        out.insert(
            slot,
            (attrs[rng.random_range(0..attrs.len())], cats[rng.random_range(0..cats.len())]),
        );
    }
    Ok(out)
}

/// Coin-flip manage decision, uniform distinct items, uniform tags.
#[derive(Clone, Debug, Default)]
pub struct RandomPolicy;

impl RecommenderPolicy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn decide(&mut self, _: &ConversationState, rng: &mut dyn RngCore) -> Result<Manage> {
        Ok(if rng.random_bool(0.5) {
            Manage::Recommend
        } else {
            Manage::Ask
        })
    }

    fn recommend(&mut self, state: &ConversationState, rng: &mut dyn RngCore) -> Result<BTreeMap<SlotId, ItemId>> {
        let pool = state.pools.item_pool(SlotId(0));
        if pool.len() < state.active.len() {
            return Err(Error::Contract("fewer distinct in-pool items than active slots".into()));
        }
        let picks = sample(rng, pool.len(), state.active.len());
        Ok(state.active.iter().zip(picks).map(|(&s, i)| (s, pool[i])).collect())
    }

    fn ask(&mut self, state: &ConversationState, rng: &mut dyn RngCore) -> Result<BTreeMap<SlotId, (AttrId, CatId)>> {
        uniform_tags(state, rng)
    }
}

/// Always recommends the most frequent offline bundle, padded with the
/// most popular items once that bundle runs out.
#[derive(Clone, Debug)]
pub struct FreqPolicy {
    ranked: Vec<ItemId>,
    bundle: Bundle,
}

impl FreqPolicy {
    pub fn new(histories: &[UserHistory]) -> Result<Self> {
        let mut bundle_counts: HashMap<&Bundle, usize> = HashMap::new();
        let mut item_counts: BTreeMap<ItemId, usize> = BTreeMap::new();
        for b in histories.iter().flat_map(|h| &h.bundles) {
            *bundle_counts.entry(b).or_default() += 1;
            for &i in b.items() {
                *item_counts.entry(i).or_default() += 1;
            }
        }
        let bundle = bundle_counts
            .into_iter()
            .max_by(|(a, ca), (b, cb)| ca.cmp(cb).then_with(|| b.items().cmp(a.items())))
            .map(|(b, _)| b.clone())
            .ok_or_else(|| Error::Validation("no offline bundles".into()))?;
        let mut popular: Vec<(ItemId, usize)> = item_counts.into_iter().collect();
        popular.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut ranked = bundle.items().to_vec();
        ranked.extend(popular.into_iter().map(|(i, _)| i).filter(|i| !bundle.contains(*i)));
        Ok(FreqPolicy { ranked, bundle })
    }

    pub fn bundle(&self) -> &Bundle {
        &self.bundle
    }
}

impl RecommenderPolicy for FreqPolicy {
    fn name(&self) -> &str {
        "freq"
    }

    fn decide(&mut self, _: &ConversationState, _: &mut dyn RngCore) -> Result<Manage> {
        Ok(Manage::Recommend)
    }

    fn recommend(&mut self, state: &ConversationState, _: &mut dyn RngCore) -> Result<BTreeMap<SlotId, ItemId>> {
        fill_slots(state, &self.ranked)
    }

    fn ask(&mut self, state: &ConversationState, rng: &mut dyn RngCore) -> Result<BTreeMap<SlotId, (AttrId, CatId)>> {
        uniform_tags(state, rng)
    }
}

/// Knows every user's target and recommends it directly.
#[derive(Clone, Debug)]
pub struct OraclePolicy {
    targets: BTreeMap<UserId, Bundle>,
}

impl OraclePolicy {
    pub fn new(split: &DatasetSplit) -> Self {
        OraclePolicy {
            targets: split.targets.clone(),
        }
    }
}

impl RecommenderPolicy for OraclePolicy {
    fn name(&self) -> &str {
        "oracle"
    }

    fn decide(&mut self, _: &ConversationState, _: &mut dyn RngCore) -> Result<Manage> {
        Ok(Manage::Recommend)
    }

    fn recommend(&mut self, state: &ConversationState, _: &mut dyn RngCore) -> Result<BTreeMap<SlotId, ItemId>> {
        let target = self
            .targets
            .get(&state.user)
            .ok_or_else(|| Error::Validation(format!("no target for user {}", state.user)))?;
        fill_slots(state, target.items())
    }

    fn ask(&mut self, state: &ConversationState, rng: &mut dyn RngCore) -> Result<BTreeMap<SlotId, (AttrId, CatId)>> {
        uniform_tags(state, rng)
    }
}

/// Asks uniformly random questions and never recommends.
#[derive(Clone, Debug, Default)]
pub struct AskOnlyPolicy;

impl RecommenderPolicy for AskOnlyPolicy {
    fn name(&self) -> &str {
        "ask-only"
    }

    fn decide(&mut self, _: &ConversationState, _: &mut dyn RngCore) -> Result<Manage> {
        Ok(Manage::Ask)
    }

    fn recommend(&mut self, _: &ConversationState, _: &mut dyn RngCore) -> Result<BTreeMap<SlotId, ItemId>> {
        Err(Error::Contract("ask-only policy cannot recommend".into()))
    }

    fn ask(&mut self, state: &ConversationState, rng: &mut dyn RngCore) -> Result<BTreeMap<SlotId, (AttrId, CatId)>> {
        uniform_tags(state, rng)
    }

    fn act(
        &mut self,
        state: &ConversationState,
        _can_recommend: bool,
        can_ask: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Option<crate::env::Action>> {
        if !can_ask {
            return Ok(None);
        }
        Ok(Some(crate::env::Action::Ask(self.ask(state, rng)?)))
    }
}

