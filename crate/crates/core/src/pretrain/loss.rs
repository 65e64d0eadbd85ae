use super::cloze::ClozeInstance;
use crate::data::{Catalog, UserHistory};
use crate::error::{Error, Result};
use crate::nn::{Bunt, HistoryInput, Tape, Var};
use serde::{Deserialize, Serialize};

/// Per-tag loss weights (clipped inverse frequency, mean 1 over seen tags).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagWeights {
    pub attrs: Vec<f64>,
    pub cats: Vec<f64>,
}

pub const WEIGHT_MIN: f64 = 0.1;
pub const WEIGHT_MAX: f64 = 10.0;

impl TagWeights {
    pub fn uniform(n_attrs: usize, n_cats: usize) -> Self {
        TagWeights {
            attrs: vec![1.0; n_attrs],
            cats: vec![1.0; n_cats],
        }
    }
}

/// Tag weights from tag occurrences over every item of every offline bundle.
pub fn compute_tag_weights(histories: &[UserHistory], catalog: &Catalog) -> Result<TagWeights> {
    let mut attr_counts = vec![0usize; catalog.n_attrs()];
    let mut cat_counts = vec![0usize; catalog.n_cats()];
    let mut any = false;
    for h in histories {
        for b in &h.bundles {
            for &i in b.items() {
                any = true;
                catalog.attrs_of(i).iter().for_each(|a| attr_counts[a.idx()] += 1);
                catalog.cats_of(i).iter().for_each(|c| cat_counts[c.idx()] += 1);
            }
        }
    }
    if !any {
        return Err(Error::Validation("cannot weight tags of an empty corpus".into()));
    }
    Ok(TagWeights {
        attrs: inverse_frequency(&attr_counts),
        cats: inverse_frequency(&cat_counts),
    })
}

fn inverse_frequency(counts: &[usize]) -> Vec<f64> {
    let seen: Vec<f64> = counts.iter().filter(|&&c| c > 0).map(|&c| c as f64).collect();
    if seen.is_empty() {
        return vec![1.0; counts.len()];
    }
    let mean_count = seen.iter().sum::<f64>() / seen.len() as f64;
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| {
            if c == 0 {
                WEIGHT_MAX
            } else {
                (mean_count / c as f64).clamp(WEIGHT_MIN, WEIGHT_MAX)
            }
        })
        .collect();
    let z = counts
        .iter()
        .zip(&raw)
        .filter(|(&c, _)| c > 0)
        .map(|(_, &w)| w)
        .sum::<f64>()
        / seen.len() as f64;
    raw.into_iter().map(|w| w / z).collect()
}

/// Loss values of one instance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub rec: f64,
    pub attr: f64,
    pub cate: f64,
    pub conv: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn add(&mut self, o: &LossComponents) {
        self.rec += o.rec;
        self.attr += o.attr;
        self.cate += o.cate;
        self.conv += o.conv;
        self.total += o.total;
    }
}

/// A recorded offline loss, ready for [`Tape::backward`].
pub struct OfflineLoss {
    pub loss: Var,
    pub parts: LossComponents,
    /// Manage labels per masked slot: 1 item hit, 0 tag hit, -1 excluded.
    pub conv_labels: Vec<i8>,
}

/// `L_rec + λ (L_attr + L_cate + L_conv)` for one instance. Manage labels
/// come from the model's own predictions unless `fixed_labels` is given.
pub fn offline_loss(
    t: &mut Tape,
    model: &Bunt,
    inst: &ClozeInstance,
    weights: &TagWeights,
    fixed_labels: Option<&[i8]>,
) -> Result<OfflineLoss> {
    if inst.masked.is_empty() {
        return Err(Error::Contract("cloze instance without masked slots".into()));
    }
    let f = model.forward(t, HistoryInput::Bundles(&inst.history), &inst.slots, &[])?;
    let rows = t.pool_rows(f.o, inst.masked.iter().map(|&p| vec![p]).collect());

    let il = model.item_logits(t, rows);
    let ilp = t.log_softmax(il, vec![]);
    let al = model.attr_logits(t, rows);
    let alp = t.log_softmax(al, vec![]);
    let cl = model.cat_logits(t, rows);
    let clp = t.log_softmax(cl, vec![]);

    let rec_e = inst
        .item_labels
        .iter()
        .enumerate()
        .map(|(r, i)| (r, i.idx(), -1.0))
        .collect();
    let mut attr_e = Vec::new();
    let mut cat_e = Vec::new();
    for r in 0..inst.k() {
        for a in &inst.attr_labels[r] {
            attr_e.push((r, a.idx(), -weights.attrs[a.idx()]));
        }
        for c in &inst.cat_labels[r] {
            cat_e.push((r, c.idx(), -weights.cats[c.idx()]));
        }
    }
    let l_rec = t.pick(ilp, rec_e);
    let l_attr = t.pick(alp, attr_e);
    let l_cate = t.pick(clp, cat_e);

    let labels: Vec<i8> = match fixed_labels {
        Some(l) => l.to_vec(),
        None => (0..inst.k())
            .map(|r| {
                let hit_item = argmax(t.value(ilp).row(r)) == Some(inst.item_labels[r].idx());
                let hit_attr = argmax(t.value(alp).row(r))
                    .is_some_and(|a| inst.attr_labels[r].iter().any(|x| x.idx() == a));
                let hit_cat = argmax(t.value(clp).row(r))
                    .is_some_and(|c| inst.cat_labels[r].iter().any(|x| x.idx() == c));
                if hit_item {
                    1
                } else if hit_attr || hit_cat {
                    0
                } else {
                    -1
                }
            })
            .collect(),
    };
    let ml = model.manage_slot_logits(t, rows);
    let mlp = t.log_softmax(ml, vec![]);
    let conv_e = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l >= 0)
        .map(|(r, &l)| (r, if l == 1 { 0 } else { 1 }, -1.0))
        .collect();
    let l_conv = t.pick(mlp, conv_e);

    let ask = t.sum(vec![l_attr, l_cate, l_conv]);
    let ask = t.scale(ask, model.hp.lambda);
    let loss = t.sum(vec![l_rec, ask]);
    let parts = LossComponents {
        rec: t.scalar(l_rec),
        attr: t.scalar(l_attr),
        cate: t.scalar(l_cate),
        conv: t.scalar(l_conv),
        total: t.scalar(loss),
    };
    Ok(OfflineLoss {
        loss,
        parts,
        conv_labels: labels,
    })
}

/// First index of the maximum finite value.
pub(crate) fn argmax(row: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in row.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|b| v > row[b]) {
            best = Some(i);
        }
    }
    best
}
