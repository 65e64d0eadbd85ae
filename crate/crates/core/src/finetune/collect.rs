use super::buffer::{Buffers, StateRepr, TransitionRecord};
use crate::data::Bundle;
use crate::env::{high_level_reward, Action, ConversationState, Env, Manage, Rewards, RewardMetric, RoundRecord};
use crate::error::{Error, Result};
use crate::ids::{AttrId, CatId, ItemId, SlotId};
use crate::nn::{pick_index, Bunt, EncodedState, Matrix, Sampling, Tape};
use crate::simulator::SimulatedUser;
use rand::Rng;
use std::collections::BTreeMap;

/// Value-head estimates for one round.
pub(crate) struct RoundValues {
    pub manage: f64,
    pub item: Vec<f64>,
    pub attr: Vec<f64>,
    pub cat: Vec<f64>,
}

pub(crate) fn round_values(model: &Bunt, rows: &Matrix, result: &Matrix) -> RoundValues {
    let mut t = Tape::new(&model.params);
    let r = t.constant(rows.clone());
    let res = t.constant(result.clone());
    let vm = model.manage_value(&mut t, res, r);
    let vi = model.item_value(&mut t, r);
    let va = model.attr_value(&mut t, r);
    let vc = model.cat_value(&mut t, r);
    RoundValues {
        manage: t.scalar(vm),
        item: t.value(vi).data.clone(),
        attr: t.value(va).data.clone(),
        cat: t.value(vc).data.clone(),
    }
}

fn row(m: &Matrix, r: usize) -> Matrix {
    Matrix::row_vector(m.row(r).to_vec())
}

/// Result of one training episode.
#[derive(Clone, Debug)]
pub struct Episode {
    pub state: ConversationState,
    pub records: Vec<RoundRecord>,
    pub buffers: Buffers,
    /// Conversation-level reward of the final accepted bundle.
    pub final_reward: f64,
}

/// Plays one sampled episode and returns the per-agent transitions.
///
/// One manager record is appended per round, including rounds where an
/// exhausted pool left a single legal move; the terminal reward goes to the
/// last of them.
pub fn collect_episode<R: Rng + ?Sized>(
    model: &Bunt,
    env: &Env<'_>,
    user: &SimulatedUser<'_>,
    initial: ConversationState,
    metric: RewardMetric,
    rng: &mut R,
) -> Result<Episode> {
    let target: &Bundle = user.target();
    let e_u = if model.hp.ablation.no_long_term {
        None
    } else {
        Some(model.encode_history_value(&initial.history)?)
    };
    let mut state = initial;
    let mut buffers = Buffers::default();
    let mut records = Vec::new();
    let mut done = false;
    while !done {
        let (can_rec, can_ask) = env.available_moves(&state);
        if !can_rec && !can_ask {
            break;
        }
        let enc: EncodedState = model.encode_state(&state, e_u.as_ref())?;
        let pol = model.policies(&enc, &state.pools, &state.active)?;
        let rows = enc.rows(&state.active)?;
        let values = round_values(model, &rows, &enc.result_vec);

        let p = pol.p_recommend;
        let mode = match (can_rec, can_ask) {
            (true, false) => Manage::Recommend,
            (false, true) => Manage::Ask,
            _ if rng.random::<f64>() < p => Manage::Recommend,
            _ => Manage::Ask,
        };
        let (action, prob) = match mode {
            Manage::Recommend => (0, p),
            Manage::Ask => (1, 1.0 - p),
        };
        buffers.manage.push(TransitionRecord {
            state: StateRepr::Manager {
                rows: rows.clone(),
                result: enc.result_vec.clone(),
            },
            next_state: None,
            mask: Vec::new(),
            action,
            reward: 0.0,
            logp: prob.ln(),
            value: values.manage,
            done: false,
        });

        let mut pending: Vec<(usize, SlotId, TransitionRecord)> = Vec::new();
        let action = match mode {
            Manage::Recommend => {
                let mut chosen: BTreeMap<SlotId, ItemId> = BTreeMap::new();
                for (r, sp) in pol.slots.iter().enumerate() {
                    let mut allowed = sp.item_mask.clone();
                    for i in chosen.values() {
                        allowed[i.idx()] = false;
                    }
                    let i = pick_index(&sp.items, &allowed, Sampling::Sample, rng)
                        .ok_or_else(|| Error::Contract("fewer distinct in-pool items than active slots".into()))?;
                    let mass: f64 = (0..allowed.len()).filter(|&j| allowed[j]).map(|j| sp.items[j]).sum();
                    pending.push((
                        0,
                        sp.slot,
                        TransitionRecord {
                            state: StateRepr::Slot(row(&rows, r)),
                            next_state: None,
                            logp: (sp.items[i] / mass).ln(),
                            mask: allowed,
                            action: i,
                            reward: 0.0,
                            value: values.item[r],
                            done: true,
                        },
                    ));
                    chosen.insert(sp.slot, ItemId::from(i));
                }
                Action::Recommend(chosen)
            }
            Manage::Ask => {
                let mut asks: BTreeMap<SlotId, (AttrId, CatId)> = BTreeMap::new();
                for (r, sp) in pol.slots.iter().enumerate() {
                    let a = pick_index(&sp.attrs, &sp.attr_mask, Sampling::Sample, rng)
                        .ok_or_else(|| Error::Contract("empty attribute pool".into()))?;
                    let c = pick_index(&sp.cats, &sp.cat_mask, Sampling::Sample, rng)
                        .ok_or_else(|| Error::Contract("empty category pool".into()))?;
                    let slot_row = row(&rows, r);
                    pending.push((
                        1,
                        sp.slot,
                        TransitionRecord {
                            state: StateRepr::Slot(slot_row.clone()),
                            next_state: None,
                            mask: sp.attr_mask.clone(),
                            action: a,
                            reward: 0.0,
                            logp: sp.attrs[a].ln(),
                            value: values.attr[r],
                            done: true,
                        },
                    ));
                    pending.push((
                        2,
                        sp.slot,
                        TransitionRecord {
                            state: StateRepr::Slot(slot_row),
                            next_state: None,
                            mask: sp.cat_mask.clone(),
                            action: c,
                            reward: 0.0,
                            logp: sp.cats[c].ln(),
                            value: values.cat[r],
                            done: true,
                        },
                    ));
                    asks.insert(sp.slot, (AttrId::from(a), CatId::from(c)));
                }
                Action::Ask(asks)
            }
        };

        let feedback = user.respond(&state, &action);
        let round = state.round;
        let out = env.step(&state, &action, &feedback, Some(target))?;
        for (kind, slot, mut rec) in pending {
            rec.reward = match (&out.rewards, kind) {
                (Rewards::Items(m), 0) => m.get(&slot).copied().unwrap_or(0.0),
                (Rewards::Tags { attr, .. }, 1) => attr.get(&slot).copied().unwrap_or(0.0),
                (Rewards::Tags { cat, .. }, 2) => cat.get(&slot).copied().unwrap_or(0.0),
                _ => 0.0,
            };
            match kind {
                0 => buffers.item.push(rec),
                1 => buffers.attr.push(rec),
                _ => buffers.cat.push(rec),
            }
        }
        records.push(RoundRecord::new(round, &action, &feedback, out.result, &out.rewards));
        state = out.state;
        done = out.done;
    }
    let final_reward = high_level_reward(&state, true, target, metric);
    if let Some(last) = buffers.manage.last_mut() {
        last.reward = final_reward;
        last.done = true;
    }
    Ok(Episode {
        state,
        records,
        buffers,
        final_reward,
    })
}
