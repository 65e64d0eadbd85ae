use super::cloze::{cloze_from_target, full_cloze_from_target, ClozeInstance};
use super::loss::{argmax, compute_tag_weights, offline_loss, LossComponents, TagWeights};
use crate::data::{Bundle, Catalog, DatasetSplit, Partition};
use crate::error::{Error, Result};
use crate::ids::{ItemId, UserId};
use crate::nn::{Adam, Bunt, Gradients, HistoryInput, Hyperparameters, ParamGroup, Tape, Trainable, Vocab};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Epochs without VALID improvement before stopping; `None` disables.
    pub patience: Option<usize>,
    /// Heads left at their initialisation.
    pub skip_heads: Vec<ParamGroup>,
    /// Also report accuracy on a fixed set of training instances.
    pub track_train_accuracy: bool,
    /// Stop as soon as training accuracy reaches this value.
    pub stop_at_train_accuracy: Option<f64>,
    pub weighted_tags: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 200,
            patience: Some(20),
            skip_heads: Vec::new(),
            track_train_accuracy: false,
            stop_at_train_accuracy: None,
            weighted_tags: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-instance loss components over the epoch.
    pub loss: LossComponents,
    pub valid_f1: f64,
    pub train_accuracy: Option<f64>,
}

pub struct PretrainOutcome {
    /// Parameters of the epoch with the best VALID score.
    pub model: Bunt,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

const VALID_STREAM: u64 = 0x5641_4c49_44;
const TRAIN_EVAL_STREAM: u64 = 0x5452_4149_4e;
const SAMPLE_STREAM: u64 = 0x434c_4f5a_45;

/// Trains a freshly initialised model on the cloze task.
pub fn pretrain(
    split: &DatasetSplit,
    catalog: &Catalog,
    hp: &Hyperparameters,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    let model = Bunt::new(hp.clone(), Vocab::of(catalog), seed)?;
    pretrain_from(model, split, catalog, cfg, seed)
}

/// (user, index of the offline bundle used as target) pairs.
fn training_pairs(split: &DatasetSplit) -> Vec<(UserId, usize)> {
    split
        .offline
        .iter()
        .filter(|(_, b)| b.len() >= 2)
        .flat_map(|(&u, b)| (0..b.len()).map(move |i| (u, i)))
        .collect()
}

fn pair_instance(
    split: &DatasetSplit,
    catalog: &Catalog,
    hp: &Hyperparameters,
    (user, n): (UserId, usize),
    full: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ClozeInstance> {
    let bundles = &split.offline[&user];
    let context: Vec<Bundle> = bundles
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != n)
        .map(|(_, b)| b.clone())
        .collect();
    if full {
        full_cloze_from_target(user, context, &bundles[n], catalog, hp, rng)
    } else {
        cloze_from_target(user, context, &bundles[n], catalog, hp, rng)
    }
}

/// Fixed cloze instances predicting each VALID user's held-out bundle.
pub fn validation_instances(
    split: &DatasetSplit,
    catalog: &Catalog,
    hp: &Hyperparameters,
    seed: u64,
) -> Result<Vec<ClozeInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ VALID_STREAM);
    split
        .users_in(Partition::Valid)
        .into_iter()
        .filter_map(|u| Some((u, split.history(u)?, split.target(u)?)))
        .filter(|(_, h, _)| !h.is_empty())
        .map(|(u, h, t)| full_cloze_from_target(u, h.to_vec(), t, catalog, hp, &mut rng))
        .collect()
}

/// Fixed cloze instances over the training pairs, for memorisation checks.
/// `full` selects maximal partial bundles (see [`full_cloze_from_target`]).
pub fn training_instances(
    split: &DatasetSplit,
    catalog: &Catalog,
    hp: &Hyperparameters,
    full: bool,
    seed: u64,
) -> Result<Vec<ClozeInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ TRAIN_EVAL_STREAM);
    training_pairs(split)
        .into_iter()
        .map(|p| pair_instance(split, catalog, hp, p, full, &mut rng))
        .collect()
}

/// Greedy distinct predictions for the masked slots of an instance.
pub fn predict_masked(model: &Bunt, inst: &ClozeInstance) -> Result<Vec<ItemId>> {
    let mut t = Tape::new(&model.params);
    let f = model.forward(&mut t, HistoryInput::Bundles(&inst.history), &inst.slots, &[])?;
    let rows = t.pool_rows(f.o, inst.masked.iter().map(|&p| vec![p]).collect());
    let logits = model.item_logits(&mut t, rows);
    let lv = t.value(logits);
    let mut taken = BTreeSet::new();
    let mut out = Vec::with_capacity(inst.k());
    for r in 0..inst.k() {
        let mut row = lv.row(r).to_vec();
        for &i in &taken {
            row[ItemId::idx(i)] = f64::NEG_INFINITY;
        }
        let best = argmax(&row).ok_or_else(|| Error::Model("no item left to predict".into()))?;
        taken.insert(ItemId::from(best));
        out.push(ItemId::from(best));
    }
    Ok(out)
}

/// Mean over instances of `|predicted ∩ masked items| / k`. Since both sets
/// have size `k` this is the one-shot F1 and the masked-item accuracy.
pub fn masked_item_accuracy(model: &Bunt, instances: &[ClozeInstance]) -> Result<f64> {
    if instances.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for inst in instances {
        let pred = predict_masked(model, inst)?;
        let hits = pred.iter().filter(|p| inst.item_labels.contains(p)).count();
        total += hits as f64 / inst.k() as f64;
    }
    Ok(total / instances.len() as f64)
}

/// Continues cloze training from the given parameters.
pub fn pretrain_from(
    mut model: Bunt,
    split: &DatasetSplit,
    catalog: &Catalog,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    let hp = model.hp.clone();
    let histories = split.offline_histories();
    let weights = if cfg.weighted_tags {
        compute_tag_weights(&histories, catalog)?
    } else {
        TagWeights::uniform(catalog.n_attrs(), catalog.n_cats())
    };
    let mut pairs = training_pairs(split);
    if pairs.is_empty() {
        return Err(Error::Validation("no user has two offline bundles to train on".into()));
    }
    let valid = validation_instances(split, catalog, &hp, seed)?;
    let train_eval = if cfg.track_train_accuracy {
        training_instances(split, catalog, &hp, true, seed)?
    } else {
        Vec::new()
    };
    let trainable = Trainable::only(
        &ParamGroup::ALL
            .into_iter()
            .filter(|g| !cfg.skip_heads.contains(g))
            .collect::<Vec<_>>(),
    );
    let mut opt = Adam::new(hp.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SAMPLE_STREAM);
    let mut log = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, model.params.clone());

    for epoch in 1..=cfg.epochs {
        pairs.shuffle(&mut rng);
        let mut sum = LossComponents::default();
        for batch in pairs.chunks(hp.batch_size) {
            let mut grads = Gradients::zeros_like(&model.params);
            for &pair in batch {
                let inst = pair_instance(split, catalog, &hp, pair, false, &mut rng)?;
                let mut t = Tape::new(&model.params);
                let l = offline_loss(&mut t, &model, &inst, &weights, None)?;
                if !l.parts.total.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite offline loss at epoch {epoch} for user {}",
                        pair.0
                    )));
                }
                sum.add(&l.parts);
                grads.merge(&t.backward(l.loss));
            }
            grads.scale(1.0 / batch.len() as f64);
            grads.mask(&model.params, trainable);
            if !grads.is_finite() {
                return Err(Error::Diverged(format!("non-finite gradient at epoch {epoch}")));
            }
            opt.step(&mut model.params, &grads, trainable);
        }
        let n = pairs.len() as f64;
        let loss = LossComponents {
            rec: sum.rec / n,
            attr: sum.attr / n,
            cate: sum.cate / n,
            conv: sum.conv / n,
            total: sum.total / n,
        };
        let valid_f1 = masked_item_accuracy(&model, &valid)?;
        let train_accuracy = if cfg.track_train_accuracy {
            Some(masked_item_accuracy(&model, &train_eval)?)
        } else {
            None
        };
        log::debug!("pretrain epoch {epoch}: loss {:.4} valid_f1 {valid_f1:.4}", loss.total);
        log.push(EpochLog {
            epoch,
            loss,
            valid_f1,
            train_accuracy,
        });
        if valid_f1 > best.0 {
            best = (valid_f1, epoch, model.params.clone());
        }
        if cfg
            .stop_at_train_accuracy
            .zip(train_accuracy)
            .is_some_and(|(goal, acc)| acc >= goal)
        {
            break;
        }
        if cfg.patience.is_some_and(|p| epoch - best.1 >= p) {
            break;
        }
    }
    model.params = best.2;
    Ok(PretrainOutcome {
        model,
        best_epoch: best.1,
        log,
    })
}
