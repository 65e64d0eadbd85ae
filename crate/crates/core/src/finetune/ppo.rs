use super::buffer::{returns, Agent, StateRepr, TransitionRecord};
use crate::error::{Error, Result};
use crate::nn::{Adam, Bunt, Gradients, Matrix, Tape, Trainable, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub epochs: usize,
    pub minibatch: usize,
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub gamma: f64,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            epochs: 4,
            minibatch: 64,
            clip: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            lr: 1e-3,
            max_grad_norm: 0.5,
            gamma: 1.0,
            normalize_advantages: true,
        }
    }
}

/// Losses of the last minibatch of an update, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
}

fn advantages(records: &[TransitionRecord], cfg: &PpoConfig) -> (Vec<f64>, Vec<f64>) {
    let ret = returns(records, cfg.gamma);
    let mut adv: Vec<f64> = ret.iter().zip(records).map(|(g, r)| g - r.value).collect();
    if cfg.normalize_advantages && adv.len() > 1 {
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        for a in &mut adv {
            *a = (*a - mean) / (std + 1e-8);
        }
    }
    (ret, adv)
}

/// Per-record (log π(a|s), value, entropy) for a minibatch.
fn evaluate(
    model: &Bunt,
    t: &mut Tape,
    agent: Agent,
    batch: &[&TransitionRecord],
) -> Result<Vec<(Var, Var, Var)>> {
    if agent == Agent::Manage {
        return batch
            .iter()
            .map(|r| {
                let StateRepr::Manager { rows, result } = &r.state else {
                    return Err(Error::Contract("manager record without manager state".into()));
                };
                let rows = t.constant(rows.clone());
                let result = t.constant(result.clone());
                let (pm, _) = model.manage_probs(t, result, rows);
                let p = model.aggregate_manage(t, pm);
                let logp = t.log(p);
                let lp = t.pick(logp, vec![(0, r.action, 1.0)]);
                let v = model.manage_value(t, result, rows);
                let ent = t.entropy(logp);
                Ok((lp, v, ent))
            })
            .collect();
    }
    let d = model.hp.d;
    let mut data = Vec::with_capacity(batch.len() * d);
    for r in batch {
        let StateRepr::Slot(m) = &r.state else {
            return Err(Error::Contract("slot record without slot state".into()));
        };
        data.extend_from_slice(&m.data);
    }
    let rows = t.constant(Matrix::from_vec(batch.len(), d, data));
    let (logits, values) = match agent {
        Agent::Item => (model.item_logits(t, rows), model.item_value(t, rows)),
        Agent::Attr => (model.attr_logits(t, rows), model.attr_value(t, rows)),
        Agent::Cat => (model.cat_logits(t, rows), model.cat_value(t, rows)),
        Agent::Manage => unreachable!(),
    };
    let logp = t.log_softmax(logits, batch.iter().map(|r| r.mask.clone()).collect());
    let ent = t.entropy(logp);
    Ok((0..batch.len())
        .map(|i| {
            let lp = t.pick(logp, vec![(i, batch[i].action, 1.0)]);
            let v = t.pick(values, vec![(i, 0, 1.0)]);
            let e = t.pick(ent, vec![(i, 0, 1.0)]);
            (lp, v, e)
        })
        .collect())
}

/// Clipped policy-gradient update of one agent's parameters. Every other
/// parameter group, the backbone included, stays fixed.
pub fn ppo_update<R: Rng + ?Sized>(
    model: &mut Bunt,
    agent: Agent,
    records: &[TransitionRecord],
    cfg: &PpoConfig,
    adam: &mut Adam,
    rng: &mut R,
) -> Result<PpoStats> {
    if records.is_empty() {
        return Ok(PpoStats::default());
    }
    let (ret, adv) = advantages(records, cfg);
    let trainable = Trainable::only(&[agent.group()]);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut stats = PpoStats::default();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch.max(1)) {
            let batch: Vec<&TransitionRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let n = chunk.len() as f64;
            let mut grads: Gradients;
            {
                let mut t = Tape::new(&model.params);
                let per = evaluate(model, &mut t, agent, &batch)?;
                let mut terms = Vec::with_capacity(3 * per.len());
                let (mut pl, mut vl, mut el) = (0.0, 0.0, 0.0);
                for (&i, &(lp, v, e)) in chunk.iter().zip(&per) {
                    if !(t.scalar(lp) - records[i].logp).exp().is_finite() {
                        log::warn!("skipping {agent:?} record with non-finite ratio");
                        continue;
                    }
                    let p = t.ppo_clip(lp, records[i].logp, adv[i], cfg.clip);
                    let sq = t.squared_error(v, ret[i]);
                    pl += t.scalar(p);
                    vl += t.scalar(sq);
                    el += t.scalar(e);
                    terms.push(t.scale(p, 1.0 / n));
                    terms.push(t.scale(sq, cfg.value_coef / n));
                    terms.push(t.scale(e, -cfg.entropy_coef / n));
                }
                if terms.is_empty() {
                    continue;
                }
                let loss = t.sum(terms);
                if !t.scalar(loss).is_finite() {
                    return Err(Error::Diverged(format!("non-finite {agent:?} loss")));
                }
                grads = t.backward(loss);
                stats = PpoStats {
                    policy: pl / n,
                    value: vl / n,
                    entropy: el / n,
                };
            }
            grads.mask(&model.params, trainable);
            if !grads.is_finite() {
                return Err(Error::Diverged(format!("non-finite {agent:?} gradient")));
            }
            grads.clip_norm(cfg.max_grad_norm);
            adam.step(&mut model.params, &grads, trainable);
        }
    }
    Ok(stats)
}
