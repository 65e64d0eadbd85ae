use super::state::{CandidatePools, ConversationState, ResultId, SlotContext};
use crate::data::{Bundle, Catalog};
use crate::error::{Error, Result};
use crate::ids::{AttrId, CatId, ItemId, SlotId, UserId};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// The round-level manage decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Manage {
    Recommend,
    Ask,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Recommend(BTreeMap<SlotId, ItemId>),
    Ask(BTreeMap<SlotId, (AttrId, CatId)>),
}

impl Action {
    pub fn manage(&self) -> Manage {
        match self {
            Action::Recommend(_) => Manage::Recommend,
            Action::Ask(_) => Manage::Ask,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ItemVerdict {
    Accept,
    Ignore,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TagVerdict {
    Accept,
    Reject,
    Ignore,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemFeedback {
    pub verdicts: BTreeMap<SlotId, ItemVerdict>,
    /// Set by a live user who declares the bundle complete. When a target
    /// bundle is known the environment detects completion itself.
    #[serde(default)]
    pub satisfied: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagFeedback {
    /// Per slot: (attribute verdict, category verdict).
    pub verdicts: BTreeMap<SlotId, (TagVerdict, TagVerdict)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Feedback {
    Items(ItemFeedback),
    Tags(TagFeedback),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Rewards {
    Items(BTreeMap<SlotId, f64>),
    Tags {
        attr: BTreeMap<SlotId, f64>,
        cat: BTreeMap<SlotId, f64>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: ConversationState,
    pub rewards: Rewards,
    pub result: ResultId,
    pub done: bool,
}

/// Transition rules over a fixed catalog, slot count and round budget.
#[derive(Clone, Copy, Debug)]
pub struct Env<'a> {
    pub catalog: &'a Catalog,
    pub k: usize,
    pub max_rounds: u32,
}

impl<'a> Env<'a> {
    pub fn new(catalog: &'a Catalog, k: usize, max_rounds: u32) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("slot count K must be at least 1".into()));
        }
        if max_rounds == 0 {
            return Err(Error::Config("round budget T must be at least 1".into()));
        }
        Ok(Env {
            catalog,
            k,
            max_rounds,
        })
    }

    pub fn init_conversation(&self, user: UserId, history: &[Bundle]) -> Result<ConversationState> {
        if history.is_empty() {
            return Err(Error::Validation(format!("user {user} has an empty history")));
        }
        let slots: BTreeMap<SlotId, SlotContext> = (0..self.k)
            .map(|i| (SlotId::from(i), SlotContext::fresh(SlotId::from(i))))
            .collect();
        Ok(ConversationState {
            user,
            history: history.to_vec(),
            active: slots.keys().copied().collect(),
            slots,
            pools: CandidatePools::full(self.catalog),
            result_log: Vec::new(),
            accepted: BTreeSet::new(),
            round: 1,
            next_slot: self.k as u32,
        })
    }

    /// Whether a recommendation round and an ask round are currently legal.
    pub fn available_moves(&self, state: &ConversationState) -> (bool, bool) {
        let can_rec = state.pools.item_pool_len() >= state.active.len();
        let can_ask = state.active.iter().all(|&s| {
            (0..self.catalog.n_attrs()).any(|a| state.pools.has_attr(s, AttrId::from(a)))
                && (0..self.catalog.n_cats()).any(|c| state.pools.has_cat(s, CatId::from(c)))
        });
        (can_rec, can_ask)
    }

    pub fn step(
        &self,
        state: &ConversationState,
        action: &Action,
        feedback: &Feedback,
        target: Option<&Bundle>,
    ) -> Result<StepOutcome> {
        match (action, feedback) {
            (Action::Recommend(p), Feedback::Items(f)) => self.step_recommend(state, p, f, target),
            (Action::Ask(q), Feedback::Tags(f)) => self.step_ask(state, q, f),
            _ => Err(Error::Contract("feedback kind does not match the action".into())),
        }
    }

    fn check_cover<V>(&self, state: &ConversationState, m: &BTreeMap<SlotId, V>, what: &str) -> Result<()> {
        if m.len() != state.active.len() || !state.active.iter().all(|s| m.contains_key(s)) {
            return Err(Error::Contract(format!(
                "{what} must cover exactly the active slots {:?}",
                state.active
            )));
        }
        Ok(())
    }

    pub fn step_recommend(
        &self,
        state: &ConversationState,
        proposals: &BTreeMap<SlotId, ItemId>,
        feedback: &ItemFeedback,
        target: Option<&Bundle>,
    ) -> Result<StepOutcome> {
        self.check_cover(state, proposals, "recommendation")?;
        self.check_cover(state, &feedback.verdicts, "item feedback")?;
        let mut seen = BTreeSet::new();
        for (&slot, &item) in proposals {
            if !state.pools.has_item(slot, item) {
                return Err(Error::Contract(format!("item {item} is not in slot {slot}'s pool")));
            }
            if !seen.insert(item) {
                return Err(Error::Contract(format!("item {item} proposed in more than one slot")));
            }
        }

        let mut next = state.clone();
        let mut rewards = BTreeMap::new();
        for &item in proposals.values() {
            next.pools.remove_item(item);
        }
        let mut any = false;
        for (&slot, &item) in proposals {
            let accepted = feedback.verdicts[&slot] == ItemVerdict::Accept;
            if accepted {
                let ctx = next.slots.get_mut(&slot).expect("active slot exists");
                ctx.accepted_item = Some(item);
                ctx.active = false;
                next.accepted.insert(item);
                any = true;
            }
            rewards.insert(slot, if accepted { 1.0 } else { 0.0 });
        }
        let complete = feedback.satisfied
            || target.is_some_and(|t| next.accepted.iter().eq(t.items().iter()));
        let result = if complete {
            ResultId::BundleSuc
        } else if any {
            ResultId::RecSuc
        } else {
            ResultId::RecFail
        };
        next.result_log.push(result);
        refresh_slots(&mut next);
        next.round += 1;
        let done = complete || next.round > self.max_rounds;
        Ok(StepOutcome {
            state: next,
            rewards: Rewards::Items(rewards),
            result,
            done,
        })
    }

    pub fn step_ask(
        &self,
        state: &ConversationState,
        questions: &BTreeMap<SlotId, (AttrId, CatId)>,
        feedback: &TagFeedback,
    ) -> Result<StepOutcome> {
        self.check_cover(state, questions, "questions")?;
        self.check_cover(state, &feedback.verdicts, "tag feedback")?;
        for (&slot, &(a, c)) in questions {
            if !state.pools.has_attr(slot, a) {
                return Err(Error::Contract(format!("attribute {a} is not in slot {slot}'s pool")));
            }
            if !state.pools.has_cat(slot, c) {
                return Err(Error::Contract(format!("category {c} is not in slot {slot}'s pool")));
            }
        }

        let mut next = state.clone();
        let mut attr_r = BTreeMap::new();
        let mut cat_r = BTreeMap::new();
        let mut any = false;
        for (&slot, &(a, c)) in questions {
            let (va, vc) = feedback.verdicts[&slot];
            next.pools.mark_asked(slot, a, c);
            let ctx = next.slots.get_mut(&slot).expect("active slot exists");
            if va == TagVerdict::Accept {
                ctx.accepted_attrs.insert(a);
            }
            if vc == TagVerdict::Accept {
                ctx.accepted_cats.insert(c);
            }
            if va == TagVerdict::Reject {
                next.pools.reject_attr(a, self.catalog);
            }
            if vc == TagVerdict::Reject {
                next.pools.reject_cat(c, self.catalog);
            }
            any |= va == TagVerdict::Accept || vc == TagVerdict::Accept;
            attr_r.insert(slot, f64::from(u8::from(va == TagVerdict::Accept)));
            cat_r.insert(slot, f64::from(u8::from(vc == TagVerdict::Accept)));
        }
        let result = if any { ResultId::AskSuc } else { ResultId::AskFail };
        next.result_log.push(result);
        next.round += 1;
        let done = next.round > self.max_rounds;
        Ok(StepOutcome {
            state: next,
            rewards: Rewards::Tags {
                attr: attr_r,
                cat: cat_r,
            },
            result,
            done,
        })
    }
}

/// Replaces every closed slot with a fresh one so the active count stays `K`.
///
/// Fresh slots see the shared item pool and the tag universes minus globally
/// rejected tags, which equals the union of the previous active pools.
pub fn refresh_slots(state: &mut ConversationState) {
    let closed = state.active.iter().filter(|id| !state.slots[id].active).count();
    if closed == 0 {
        return;
    }
    state.active.retain(|id| state.slots[id].active);
    for _ in 0..closed {
        let id = SlotId(state.next_slot);
        state.next_slot += 1;
        state.slots.insert(id, SlotContext::fresh(id));
        state.active.push(id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ItemRecord;
    use crate::env::{high_level_reward, is_terminal, RewardMetric};

    fn catalog() -> Catalog {
        // items 0..10; item i has category i % 3; attrs: 7 on items 3 and 9, 5 on 1 and 2
        let recs = (0..10u32)
            .map(|i| ItemRecord {
                item: i,
                cats: vec![i % 3],
                attrs: match i {
                    3 | 9 => vec![7],
                    1 | 2 => vec![5],
                    _ => vec![6],
                },
            })
            .collect();
        Catalog::from_records(recs).unwrap()
    }

    fn b(v: &[u32]) -> Bundle {
        Bundle::new(v.iter().map(|&i| ItemId(i))).unwrap()
    }

    fn s(i: u32) -> SlotId {
        SlotId(i)
    }

    fn start(c: &Catalog, k: usize) -> (Env<'_>, ConversationState) {
        let env = Env::new(c, k, 10).unwrap();
        let st = env.init_conversation(UserId(0), &[b(&[0, 1])]).unwrap();
        (env, st)
    }

    #[test]
    fn init_two_slots() {
        let c = catalog();
        let (_, st) = start(&c, 2);
        assert_eq!(st.active, vec![s(0), s(1)]);
        assert_eq!(st.round, 1);
        for &id in &st.active {
            assert_eq!(st.pools.item_pool(id).len(), 10);
            assert_eq!(st.slots[&id].accepted_item, None);
        }
    }

    #[test]
    fn init_single_slot_and_errors() {
        let c = catalog();
        let (_, st) = start(&c, 1);
        assert_eq!(st.active.len(), 1);
        assert!(Env::new(&c, 0, 10).is_err());
        let env = Env::new(&c, 2, 10).unwrap();
        assert!(env.init_conversation(UserId(0), &[]).is_err());
    }

    #[test]
    fn recommend_accept_and_ignore() {
        let c = catalog();
        let (env, st) = start(&c, 2);
        let props = BTreeMap::from([(s(0), ItemId(4)), (s(1), ItemId(5))]);
        let fb = ItemFeedback {
            verdicts: BTreeMap::from([(s(0), ItemVerdict::Accept), (s(1), ItemVerdict::Ignore)]),
            satisfied: false,
        };
        let out = env.step_recommend(&st, &props, &fb, Some(&b(&[4, 8]))).unwrap();
        let st2 = &out.state;
        assert!(!st2.slots[&s(0)].active);
        assert_eq!(st2.slots[&s(0)].accepted_item, Some(ItemId(4)));
        for &id in &st2.active {
            assert!(!st2.pools.has_item(id, ItemId(4)));
            assert!(!st2.pools.has_item(id, ItemId(5)));
        }
        assert_eq!(out.rewards, Rewards::Items(BTreeMap::from([(s(0), 1.0), (s(1), 0.0)])));
        assert_eq!(out.result, ResultId::RecSuc);
        assert_eq!(st2.active, vec![s(1), s(2)]);
        assert_eq!(st2.round, 2);
        assert!(!out.done);
    }

    #[test]
    fn recommend_all_ignored() {
        let c = catalog();
        let (env, st) = start(&c, 2);
        let props = BTreeMap::from([(s(0), ItemId(4)), (s(1), ItemId(5))]);
        let fb = ItemFeedback {
            verdicts: BTreeMap::from([(s(0), ItemVerdict::Ignore), (s(1), ItemVerdict::Ignore)]),
            satisfied: false,
        };
        let out = env.step_recommend(&st, &props, &fb, None).unwrap();
        assert_eq!(out.result, ResultId::RecFail);
        assert_eq!(out.state.active, st.active);
        assert_eq!(out.state.pools.item_pool_len(), 8);
    }

    #[test]
    fn completing_target_ends_with_bundle_success() {
        let c = catalog();
        let (env, st) = start(&c, 2);
        let props = BTreeMap::from([(s(0), ItemId(4)), (s(1), ItemId(8))]);
        let fb = ItemFeedback {
            verdicts: BTreeMap::from([(s(0), ItemVerdict::Accept), (s(1), ItemVerdict::Accept)]),
            satisfied: false,
        };
        let target = b(&[4, 8]);
        let out = env.step_recommend(&st, &props, &fb, Some(&target)).unwrap();
        assert_eq!(out.result, ResultId::BundleSuc);
        assert!(out.done);
        assert!(is_terminal(&out.state, &target, 10));
        assert_eq!(high_level_reward(&out.state, true, &target, RewardMetric::F1), 1.0);
    }

    #[test]
    fn contract_violations() {
        let c = catalog();
        let (env, st) = start(&c, 2);
        let fb = ItemFeedback {
            verdicts: BTreeMap::from([(s(0), ItemVerdict::Ignore), (s(1), ItemVerdict::Ignore)]),
            satisfied: false,
        };
        let dup = BTreeMap::from([(s(0), ItemId(4)), (s(1), ItemId(4))]);
        assert!(env.step_recommend(&st, &dup, &fb, None).is_err());
        let out = env
            .step_recommend(&st, &BTreeMap::from([(s(0), ItemId(4)), (s(1), ItemId(5))]), &fb, None)
            .unwrap();
        let again = BTreeMap::from([(s(0), ItemId(4)), (s(1), ItemId(6))]);
        assert!(matches!(
            env.step_recommend(&out.state, &again, &fb, None),
            Err(Error::Contract(_))
        ));
        let partial = BTreeMap::from([(s(0), ItemId(1))]);
        assert!(env.step_recommend(&st, &partial, &fb, None).is_err());
    }

    #[test]
    fn ask_accept_scoped_to_slot() {
        let c = catalog();
        let (env, st) = start(&c, 2);
        let q = BTreeMap::from([(s(0), (AttrId(5), CatId(1))), (s(1), (AttrId(6), CatId(0)))]);
        let fb = TagFeedback {
            verdicts: BTreeMap::from([
                (s(0), (TagVerdict::Accept, TagVerdict::Ignore)),
                (s(1), (TagVerdict::Ignore, TagVerdict::Ignore)),
            ]),
        };
        let out = env.step_ask(&st, &q, &fb).unwrap();
        let st2 = &out.state;
        assert_eq!(st2.slots[&s(0)].accepted_attrs, BTreeSet::from([AttrId(5)]));
        assert!(!st2.pools.has_attr(s(0), AttrId(5)));
        assert!(st2.pools.has_attr(s(1), AttrId(5)));
        assert!(!st2.pools.has_cat(s(0), CatId(1)));
        assert!(st2.pools.has_cat(s(1), CatId(1)));
        assert_eq!(out.result, ResultId::AskSuc);
        assert_eq!(st2.pools.item_pool_len(), 10);
    }

    #[test]
    fn ask_rejection_propagates() {
        let c = catalog();
        let (env, st) = start(&c, 2);
        let q = BTreeMap::from([(s(0), (AttrId(7), CatId(1))), (s(1), (AttrId(6), CatId(0)))]);
        let fb = TagFeedback {
            verdicts: BTreeMap::from([
                (s(0), (TagVerdict::Reject, TagVerdict::Ignore)),
                (s(1), (TagVerdict::Ignore, TagVerdict::Ignore)),
            ]),
        };
        let out = env.step_ask(&st, &q, &fb).unwrap();
        let st2 = &out.state;
        for &id in &st2.active {
            assert!(!st2.pools.has_attr(id, AttrId(7)));
            assert!(!st2.pools.has_item(id, ItemId(3)));
            assert!(!st2.pools.has_item(id, ItemId(9)));
        }
        assert_eq!(out.result, ResultId::AskFail);
    }

    #[test]
    fn refresh_after_rejection_excludes_blacklist() {
        let c = catalog();
        let (env, st) = start(&c, 2);
        let q = BTreeMap::from([(s(0), (AttrId(7), CatId(1))), (s(1), (AttrId(6), CatId(0)))]);
        let fb = TagFeedback {
            verdicts: BTreeMap::from([
                (s(0), (TagVerdict::Reject, TagVerdict::Ignore)),
                (s(1), (TagVerdict::Ignore, TagVerdict::Ignore)),
            ]),
        };
        let st = env.step_ask(&st, &q, &fb).unwrap().state;
        let props = BTreeMap::from([(s(0), ItemId(0)), (s(1), ItemId(1))]);
        let fb = ItemFeedback {
            verdicts: BTreeMap::from([(s(0), ItemVerdict::Ignore), (s(1), ItemVerdict::Accept)]),
            satisfied: false,
        };
        let st = env.step_recommend(&st, &props, &fb, None).unwrap().state;
        assert_eq!(st.active, vec![s(0), s(2)]);
        assert!(!st.pools.has_attr(s(2), AttrId(7)));
        assert!(st.pools.has_attr(s(2), AttrId(6)));
        assert!(!st.pools.has_item(s(2), ItemId(3)));
    }

    #[test]
    fn refresh_without_acceptance_is_identity() {
        let c = catalog();
        let (_, st) = start(&c, 2);
        let mut st2 = st.clone();
        refresh_slots(&mut st2);
        assert_eq!(st, st2);
    }

    #[test]
    fn terminal_rules_and_reward() {
        let c = catalog();
        let (_, mut st) = start(&c, 2);
        let target = b(&[1, 2]);
        st.round = 2;
        st.accepted.insert(ItemId(1));
        assert!(!is_terminal(&st, &target, 10));
        assert_eq!(high_level_reward(&st, false, &target, RewardMetric::F1), 0.0);
        let f1 = high_level_reward(&st, true, &target, RewardMetric::F1);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
        st.round = 11;
        assert!(is_terminal(&st, &target, 10));
        st.round = 3;
        st.accepted.insert(ItemId(2));
        assert!(is_terminal(&st, &target, 10));
    }

    #[test]
    fn round_budget_ends_conversation() {
        let c = catalog();
        let env = Env::new(&c, 1, 2).unwrap();
        let mut st = env.init_conversation(UserId(0), &[b(&[0])]).unwrap();
        for (r, item) in [(1, 0), (2, 1)] {
            let out = env
                .step_recommend(
                    &st,
                    &BTreeMap::from([(st.active[0], ItemId(item))]),
                    &ItemFeedback {
                        verdicts: BTreeMap::from([(st.active[0], ItemVerdict::Ignore)]),
                        satisfied: false,
                    },
                    None,
                )
                .unwrap();
            assert_eq!(out.done, r == 2);
            st = out.state;
        }
    }
}
