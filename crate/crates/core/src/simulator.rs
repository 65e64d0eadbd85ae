//! Rule-based user holding a target bundle.
//!
//! The user accepts proposed items that belong to the target, accepts tags
//! carried by a potential target item of the asked slot, rejects tags no
//! target item carries, and ignores everything else.

use crate::data::{Bundle, Catalog};
use crate::env::{
    Action, ConversationState, Feedback, ItemFeedback, ItemVerdict, TagFeedback, TagVerdict,
};
use crate::error::{Error, Result};
use crate::ids::{AttrId, CatId, ItemId, SlotId};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Clone, Debug)]
pub struct SimulatedUser<'a> {
    catalog: &'a Catalog,
    target: Bundle,
}

impl<'a> SimulatedUser<'a> {
    pub fn new(catalog: &'a Catalog, target: Bundle) -> Result<Self> {
        if let Some(i) = target.items().iter().find(|&&i| !catalog.contains(i)) {
            return Err(Error::Validation(format!("unknown item {i}")));
        }
        Ok(SimulatedUser { catalog, target })
    }

    pub fn target(&self) -> &Bundle {
        &self.target
    }

    /// Target items not yet accepted that satisfy every tag accepted in `slot`.
    pub fn potential_items(&self, state: &ConversationState, slot: SlotId) -> BTreeSet<ItemId> {
        let Some(ctx) = state.slot(slot) else {
            return BTreeSet::new();
        };
        self.potential_under(state, &ctx.accepted_attrs, &ctx.accepted_cats)
    }

    fn potential_under(
        &self,
        state: &ConversationState,
        attrs: &BTreeSet<AttrId>,
        cats: &BTreeSet<CatId>,
    ) -> BTreeSet<ItemId> {
        self.target
            .items()
            .iter()
            .copied()
            .filter(|i| !state.accepted.contains(i))
            .filter(|&i| attrs.iter().all(|&a| self.catalog.has_attr(i, a)))
            .filter(|&i| cats.iter().all(|&c| self.catalog.has_cat(i, c)))
            .collect()
    }

    /// Accepts target items not already accepted, in active-slot order.
    pub fn judge_items(
        &self,
        state: &ConversationState,
        proposals: &BTreeMap<SlotId, ItemId>,
    ) -> ItemFeedback {
        let mut taken: BTreeSet<ItemId> = state.accepted.clone();
        let mut verdicts = BTreeMap::new();
        for &slot in &state.active {
            let Some(&item) = proposals.get(&slot) else { continue };
            let v = if self.target.contains(item) && taken.insert(item) {
                ItemVerdict::Accept
            } else {
                ItemVerdict::Ignore
            };
            verdicts.insert(slot, v);
        }
        ItemFeedback {
            verdicts,
            satisfied: false,
        }
    }

    /// Judges each (attribute, category) question against the slot's
    /// pre-round potential set. The category is judged after the attribute of
    /// the same slot, so an accepted pair always leaves a reachable target
    /// item.
    pub fn judge_tags(
        &self,
        state: &ConversationState,
        questions: &BTreeMap<SlotId, (AttrId, CatId)>,
    ) -> TagFeedback {
        let mut verdicts = BTreeMap::new();
        for (&slot, &(a, c)) in questions {
            let potential = self.potential_items(state, slot);
            let va = self.tag_verdict(&potential, |i| self.catalog.has_attr(i, a));
            let potential = if va == TagVerdict::Accept {
                potential.into_iter().filter(|&i| self.catalog.has_attr(i, a)).collect()
            } else {
                potential
            };
            let vc = self.tag_verdict(&potential, |i| self.catalog.has_cat(i, c));
            verdicts.insert(slot, (va, vc));
        }
        TagFeedback { verdicts }
    }

    fn tag_verdict(&self, potential: &BTreeSet<ItemId>, carries: impl Fn(ItemId) -> bool) -> TagVerdict {
        if potential.iter().any(|&i| carries(i)) {
            TagVerdict::Accept
        } else if !self.target.items().iter().any(|&i| carries(i)) {
            TagVerdict::Reject
        } else {
            TagVerdict::Ignore
        }
    }

    pub fn respond(&self, state: &ConversationState, action: &Action) -> Feedback {
        match action {
            Action::Recommend(p) => Feedback::Items(self.judge_items(state, p)),
            Action::Ask(q) => Feedback::Tags(self.judge_tags(state, q)),
        }
    }

    pub fn wants_to_stop(&self, state: &ConversationState) -> bool {
        self.target.items().iter().all(|i| state.accepted.contains(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ItemRecord;
    use crate::env::Env;
    use crate::ids::UserId;

    fn catalog() -> Catalog {
        let attrs = [vec![1], vec![1, 5], vec![6], vec![8], vec![2]];
        Catalog::from_records(
            attrs
                .iter()
                .enumerate()
                .map(|(i, a)| ItemRecord {
                    item: i as u32,
                    cats: vec![(i % 2) as u32],
                    attrs: a.clone(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn setup(c: &Catalog) -> (Env<'_>, ConversationState, SimulatedUser<'_>) {
        let env = Env::new(c, 2, 10).unwrap();
        let st = env
            .init_conversation(UserId(0), &[Bundle::new([ItemId(4)]).unwrap()])
            .unwrap();
        let sim = SimulatedUser::new(c, Bundle::new([ItemId(1), ItemId(2)]).unwrap()).unwrap();
        (env, st, sim)
    }

    #[test]
    fn fresh_slot_potential_is_target() {
        let c = catalog();
        let (_, st, sim) = setup(&c);
        assert_eq!(sim.potential_items(&st, SlotId(0)), BTreeSet::from([ItemId(1), ItemId(2)]));
    }

    #[test]
    fn accepted_attr_filters_potential() {
        let c = catalog();
        let (_, mut st, sim) = setup(&c);
        st.slots.get_mut(&SlotId(0)).unwrap().accepted_attrs.insert(AttrId(5));
        assert_eq!(sim.potential_items(&st, SlotId(0)), BTreeSet::from([ItemId(1)]));
        st.accepted.insert(ItemId(1));
        assert!(sim.potential_items(&st, SlotId(0)).is_empty());
    }

    #[test]
    fn item_judgement() {
        let c = catalog();
        let (_, st, sim) = setup(&c);
        let fb = sim.judge_items(&st, &BTreeMap::from([(SlotId(0), ItemId(1)), (SlotId(1), ItemId(4))]));
        assert_eq!(fb.verdicts[&SlotId(0)], ItemVerdict::Accept);
        assert_eq!(fb.verdicts[&SlotId(1)], ItemVerdict::Ignore);
        let fb = sim.judge_items(&st, &BTreeMap::from([(SlotId(0), ItemId(0)), (SlotId(1), ItemId(3))]));
        assert!(fb.verdicts.values().all(|&v| v == ItemVerdict::Ignore));
    }

    #[test]
    fn tag_judgement_three_cases() {
        let c = catalog();
        let (_, mut st, sim) = setup(&c);
        // slot 1 already committed to attribute 5, so only item 1 is potential there
        st.slots.get_mut(&SlotId(1)).unwrap().accepted_attrs.insert(AttrId(5));
        let fb = sim.judge_tags(
            &st,
            &BTreeMap::from([(SlotId(0), (AttrId(5), CatId(0))), (SlotId(1), (AttrId(6), CatId(1)))]),
        );
        // a5 carried by potential item 1 of slot 0
        assert_eq!(fb.verdicts[&SlotId(0)].0, TagVerdict::Accept);
        // a6 carried by target item 2 but not by slot 1's potential item 1
        assert_eq!(fb.verdicts[&SlotId(1)].0, TagVerdict::Ignore);
        let fb = sim.judge_tags(&st, &BTreeMap::from([(SlotId(0), (AttrId(8), CatId(0)))]));
        assert_eq!(fb.verdicts[&SlotId(0)].0, TagVerdict::Reject);
    }

    #[test]
    fn accepted_pair_never_dead_ends() {
        let c = catalog();
        let (_, st, sim) = setup(&c);
        // a5 only on item 1 (category 1); category 0 only on item 2
        let fb = sim.judge_tags(&st, &BTreeMap::from([(SlotId(0), (AttrId(5), CatId(0)))]));
        assert_eq!(fb.verdicts[&SlotId(0)], (TagVerdict::Accept, TagVerdict::Ignore));
    }

    #[test]
    fn stop_rule() {
        let c = catalog();
        let (_, mut st, sim) = setup(&c);
        assert!(!sim.wants_to_stop(&st));
        st.accepted.insert(ItemId(1));
        assert!(!sim.wants_to_stop(&st));
        st.accepted.insert(ItemId(2));
        assert!(sim.wants_to_stop(&st));
    }
}
