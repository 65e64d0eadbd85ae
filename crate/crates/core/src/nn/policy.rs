use super::matrix::Matrix;
use super::model::{slot_inputs, Bunt, HistoryInput};
use super::tape::{softmax_in_place, Tape};
use crate::env::{Action, CandidatePools, ConversationState, Manage};
use crate::error::{Error, Result};
use crate::ids::{AttrId, CatId, ItemId, SlotId};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Numeric encoder output for one conversation state.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedState {
    /// One row per slot ever opened, in slot-id order.
    pub o: Matrix,
    pub result_vec: Matrix,
    pub slot_ids: Vec<SlotId>,
}

impl EncodedState {
    pub fn row_of(&self, slot: SlotId) -> Result<usize> {
        self.slot_ids
            .iter()
            .position(|&s| s == slot)
            .ok_or_else(|| Error::Contract(format!("slot {slot} was never opened")))
    }

    /// Rows of the given slots stacked in that order.
    pub fn rows(&self, slots: &[SlotId]) -> Result<Matrix> {
        let d = self.o.cols;
        let mut data = Vec::with_capacity(slots.len() * d);
        for &s in slots {
            data.extend_from_slice(self.o.row(self.row_of(s)?));
        }
        Ok(Matrix::from_vec(slots.len(), d, data))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Sampling {
    Greedy,
    Sample,
}

/// Distributions of one active slot. Vectors span the full vocabularies and
/// are exactly zero outside the slot's pools.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotPolicy {
    pub slot: SlotId,
    pub beta: f64,
    pub p_recommend: f64,
    pub items: Vec<f64>,
    pub attrs: Vec<f64>,
    pub cats: Vec<f64>,
    pub item_mask: Vec<bool>,
    pub attr_mask: Vec<bool>,
    pub cat_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Policies {
    /// Round-level probability of recommending.
    pub p_recommend: f64,
    pub slots: Vec<SlotPolicy>,
}

impl Bunt {
    /// Encodes a conversation state. Pass a cached `E_u` to skip the
    /// long-term encoder.
    pub fn encode_state(&self, state: &ConversationState, e_u: Option<&Matrix>) -> Result<EncodedState> {
        let mut t = Tape::new(&self.params);
        let history = match e_u {
            Some(m) => HistoryInput::Encoded(m),
            None => HistoryInput::Bundles(&state.history),
        };
        let f = self.forward(&mut t, history, &slot_inputs(state), &state.result_log)?;
        Ok(EncodedState {
            o: t.value(f.o).clone(),
            result_vec: t.value(f.result).clone(),
            slot_ids: state.slots.keys().copied().collect(),
        })
    }

    pub fn policies(&self, enc: &EncodedState, pools: &CandidatePools, active: &[SlotId]) -> Result<Policies> {
        if active.is_empty() {
            return Err(Error::Contract("no active slots".into()));
        }
        if pools.item_pool_len() == 0 {
            return Err(Error::Contract("empty item pool".into()));
        }
        let mut t = Tape::new(&self.params);
        let rows = t.constant(enc.rows(active)?);
        let result = t.constant(enc.result_vec.clone());
        let (pm, beta) = self.manage_probs(&mut t, result, rows);
        let agg = self.aggregate_manage(&mut t, pm);
        let il = self.item_logits(&mut t, rows);
        let al = self.attr_logits(&mut t, rows);
        let cl = self.cat_logits(&mut t, rows);
        let mut slots = Vec::with_capacity(active.len());
        for (r, &slot) in active.iter().enumerate() {
            let item_mask = pools.item_mask(slot);
            let attr_mask = pools.attr_mask(slot);
            let cat_mask = pools.cat_mask(slot);
            let mut items = t.value(il).row(r).to_vec();
            softmax_in_place(&mut items, Some(&item_mask));
            let mut attrs = t.value(al).row(r).to_vec();
            softmax_in_place(&mut attrs, Some(&attr_mask));
            let mut cats = t.value(cl).row(r).to_vec();
            softmax_in_place(&mut cats, Some(&cat_mask));
            slots.push(SlotPolicy {
                slot,
                beta: t.value(beta).data[r],
                p_recommend: t.value(pm).at(r, 0),
                items,
                attrs,
                cats,
                item_mask,
                attr_mask,
                cat_mask,
            });
        }
        Ok(Policies {
            p_recommend: t.value(agg).data[0],
            slots,
        })
    }
}

/// Index drawn from `probs` restricted to `allowed`. Greedy ties go to the
/// smallest index; sampling falls back to uniform if all mass underflowed.
pub fn pick_index<R: Rng + ?Sized>(probs: &[f64], allowed: &[bool], sampling: Sampling, rng: &mut R) -> Option<usize> {
    let cands: Vec<usize> = (0..probs.len()).filter(|&i| allowed[i]).collect();
    if cands.is_empty() {
        return None;
    }
    match sampling {
        Sampling::Greedy => {
            let mut best = cands[0];
            for &i in &cands[1..] {
                if probs[i] > probs[best] {
                    best = i;
                }
            }
            Some(best)
        }
        Sampling::Sample => {
            let total: f64 = cands.iter().map(|&i| probs[i]).sum();
            if total <= 0.0 || !total.is_finite() {
                return Some(cands[rng.random_range(0..cands.len())]);
            }
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            for &i in &cands {
                acc += probs[i];
                if u < acc {
                    return Some(i);
                }
            }
            cands.last().copied()
        }
    }
}

/// Round-level manage decision honouring which moves are feasible.
pub fn choose_manage<R: Rng + ?Sized>(
    p_recommend: f64,
    can_recommend: bool,
    can_ask: bool,
    sampling: Sampling,
    rng: &mut R,
) -> Option<Manage> {
    match (can_recommend, can_ask) {
        (false, false) => None,
        (true, false) => Some(Manage::Recommend),
        (false, true) => Some(Manage::Ask),
        (true, true) => {
            let rec = match sampling {
                Sampling::Greedy => p_recommend >= 0.5,
                Sampling::Sample => rng.random::<f64>() < p_recommend,
            };
            Some(if rec { Manage::Recommend } else { Manage::Ask })
        }
    }
}

/// Per-slot proposals. Recommendations exclude items already chosen earlier
/// in the same round, so the proposed items are distinct.
pub fn select_actions<R: Rng + ?Sized>(
    policies: &Policies,
    mode: Manage,
    sampling: Sampling,
    rng: &mut R,
) -> Result<Action> {
    match mode {
        Manage::Recommend => {
            let mut chosen = BTreeMap::new();
            for sp in &policies.slots {
                let mut allowed = sp.item_mask.clone();
                for i in chosen.values() {
                    allowed[ItemId::idx(*i)] = false;
                }
                let i = pick_index(&sp.items, &allowed, sampling, rng).ok_or_else(|| {
                    Error::Contract("fewer distinct in-pool items than active slots".into())
                })?;
                chosen.insert(sp.slot, ItemId::from(i));
            }
            Ok(Action::Recommend(chosen))
        }
        Manage::Ask => {
            let mut asks = BTreeMap::new();
            for sp in &policies.slots {
                let a = pick_index(&sp.attrs, &sp.attr_mask, sampling, rng)
                    .ok_or_else(|| Error::Contract(format!("empty attribute pool in slot {}", sp.slot)))?;
                let c = pick_index(&sp.cats, &sp.cat_mask, sampling, rng)
                    .ok_or_else(|| Error::Contract(format!("empty category pool in slot {}", sp.slot)))?;
                asks.insert(sp.slot, (AttrId::from(a), CatId::from(c)));
            }
            Ok(Action::Ask(asks))
        }
    }
}
