use super::bunt::BuntPolicy;
use super::runner::RecommenderPolicy;
use crate::data::{Catalog, UserHistory};
use crate::env::{Action, ConversationState, Manage};
use crate::error::{Error, Result};
use crate::ids::{AttrId, CatId, ItemId, SlotId, UserId};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FmConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub reg: f64,
    pub negatives: usize,
    /// Probability that each tag of the positive item is shown as context.
    pub context_ratio: f64,
}

impl Default for FmConfig {
    fn default() -> Self {
        FmConfig {
            dim: 32,
            epochs: 30,
            lr: 0.05,
            reg: 1e-4,
            negatives: 4,
            context_ratio: 0.5,
        }
    }
}

/// Second-order factorization machine over one-hot fields
/// `user | item | item attrs | item cats | context attrs | context cats`.
#[derive(Clone, Debug)]
pub struct FmScorer {
    offsets: [usize; 6],
    w0: f64,
    w: Vec<f64>,
    v: Vec<Vec<f64>>,
    trained: bool,
}

impl FmScorer {
    pub fn new(n_users: usize, catalog: &Catalog, dim: usize, seed: u64) -> Self {
        let sizes = [
            n_users,
            catalog.n_items(),
            catalog.n_attrs(),
            catalog.n_cats(),
            catalog.n_attrs(),
            catalog.n_cats(),
        ];
        let mut offsets = [0; 6];
        let mut total = 0;
        for (o, s) in offsets.iter_mut().zip(sizes) {
            *o = total;
            total += s;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..total)
            .map(|_| (0..dim).map(|_| rng.random_range(-0.05..0.05)).collect())
            .collect();
        FmScorer {
            offsets,
            w0: 0.0,
            w: vec![0.0; total],
            v,
            trained: false,
        }
    }

    fn features(
        &self,
        catalog: &Catalog,
        user: UserId,
        item: ItemId,
        ctx_attrs: &BTreeSet<AttrId>,
        ctx_cats: &BTreeSet<CatId>,
    ) -> Vec<usize> {
        let o = self.offsets;
        let mut f = Vec::with_capacity(8);
        if user.idx() < o[1] {
            f.push(o[0] + user.idx());
        }
        f.push(o[1] + item.idx());
        f.extend(catalog.attrs_of(item).iter().map(|a| o[2] + a.idx()));
        f.extend(catalog.cats_of(item).iter().map(|c| o[3] + c.idx()));
        f.extend(ctx_attrs.iter().map(|a| o[4] + a.idx()));
        f.extend(ctx_cats.iter().map(|c| o[5] + c.idx()));
        f
    }

    fn raw_score(&self, f: &[usize]) -> f64 {
        let dim = self.v.first().map_or(0, Vec::len);
        let mut s = self.w0 + f.iter().map(|&i| self.w[i]).sum::<f64>();
        for k in 0..dim {
            let (mut sum, mut sq) = (0.0, 0.0);
            for &i in f {
                let x = self.v[i][k];
                sum += x;
                sq += x * x;
            }
            s += 0.5 * (sum * sum - sq);
        }
        s
    }

    pub fn score(
        &self,
        catalog: &Catalog,
        user: UserId,
        item: ItemId,
        ctx_attrs: &BTreeSet<AttrId>,
        ctx_cats: &BTreeSet<CatId>,
    ) -> Result<f64> {
        if !self.trained {
            return Err(Error::Model("factorization machine used before training".into()));
        }
        Ok(self.raw_score(&self.features(catalog, user, item, ctx_attrs, ctx_cats)))
    }

    fn sgd(&mut self, f: &[usize], g: f64, lr: f64, reg: f64) {
        let dim = self.v.first().map_or(0, Vec::len);
        self.w0 -= lr * g;
        for &i in f {
            self.w[i] -= lr * (g + reg * self.w[i]);
        }
        for k in 0..dim {
            let sum: f64 = f.iter().map(|&i| self.v[i][k]).sum();
            for &i in f {
                let x = self.v[i][k];
                self.v[i][k] -= lr * (g * (sum - x) + reg * x);
            }
        }
    }

    /// Pairwise ranking training: items of a user's bundles against uniform
    /// negatives, with a random share of the positive's tags as context.
    pub fn train(&mut self, histories: &[UserHistory], catalog: &Catalog, cfg: &FmConfig, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positives: Vec<(UserId, ItemId, usize)> = histories
            .iter()
            .flat_map(|h| {
                h.bundles
                    .iter()
                    .enumerate()
                    .flat_map(move |(b, bundle)| bundle.items().iter().map(move |&i| (h.user, i, b)))
            })
            .collect();
        if positives.is_empty() {
            return Err(Error::Validation("no positives to train the factorization machine".into()));
        }
        let by_user: BTreeMap<UserId, &UserHistory> = histories.iter().map(|h| (h.user, h)).collect();
        let n_items = catalog.n_items();
        for _ in 0..cfg.epochs {
            for &(u, pos, b) in &positives {
                let bundle = &by_user[&u].bundles[b];
                let ctx_a: BTreeSet<AttrId> = catalog
                    .attrs_of(pos)
                    .iter()
                    .copied()
                    .filter(|_| rng.random_bool(cfg.context_ratio))
                    .collect();
                let ctx_c: BTreeSet<CatId> = catalog
                    .cats_of(pos)
                    .iter()
                    .copied()
                    .filter(|_| rng.random_bool(cfg.context_ratio))
                    .collect();
                let fp = self.features(catalog, u, pos, &ctx_a, &ctx_c);
                for _ in 0..cfg.negatives {
                    let neg = ItemId::from(rng.random_range(0..n_items));
                    if bundle.contains(neg) {
                        continue;
                    }
                    let fn_ = self.features(catalog, u, neg, &ctx_a, &ctx_c);
                    let x = self.raw_score(&fp) - self.raw_score(&fn_);
                    let g = -crate::nn::sigmoid(-x);
                    self.sgd(&fp, g, cfg.lr, cfg.reg);
                    self.sgd(&fn_, -g, cfg.lr, cfg.reg);
                }
            }
        }
        self.trained = true;
        Ok(())
    }
}

/// FM item scoring. Without a BUNT model it always recommends (FM-All);
/// with one, the manage and ask decisions come from BUNT (FM-Learn).
pub struct FmPolicy<'a> {
    fm: &'a FmScorer,
    catalog: &'a Catalog,
    bunt: Option<BuntPolicy<'a>>,
}

impl<'a> FmPolicy<'a> {
    pub fn all(fm: &'a FmScorer, catalog: &'a Catalog) -> Self {
        FmPolicy { fm, catalog, bunt: None }
    }

    pub fn learn(fm: &'a FmScorer, catalog: &'a Catalog, bunt: BuntPolicy<'a>) -> Self {
        FmPolicy {
            fm,
            catalog,
            bunt: Some(bunt),
        }
    }
}

impl RecommenderPolicy for FmPolicy<'_> {
    fn name(&self) -> &str {
        if self.bunt.is_some() {
            "fm-learn"
        } else {
            "fm-all"
        }
    }

    fn begin(&mut self, state: &ConversationState) -> Result<()> {
        match &mut self.bunt {
            Some(b) => b.begin(state),
            None => Ok(()),
        }
    }

    fn decide(&mut self, state: &ConversationState, rng: &mut dyn RngCore) -> Result<Manage> {
        match &mut self.bunt {
            Some(b) => b.decide(state, rng),
            None => Ok(Manage::Recommend),
        }
    }

    fn recommend(&mut self, state: &ConversationState, _: &mut dyn RngCore) -> Result<BTreeMap<SlotId, ItemId>> {
        let pool = state.pools.item_pool(SlotId(0));
        let mut out = BTreeMap::new();
        for &slot in &state.active {
            let ctx = state
                .slot(slot)
                .ok_or_else(|| Error::Contract(format!("unknown slot {slot}")))?;
            let mut best: Option<(ItemId, f64)> = None;
            for &i in &pool {
                if out.values().any(|&x| x == i) {
                    continue;
                }
                let s = self
                    .fm
                    .score(self.catalog, state.user, i, &ctx.accepted_attrs, &ctx.accepted_cats)?;
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((i, s));
                }
            }
            let (item, _) =
                best.ok_or_else(|| Error::Contract("fewer distinct in-pool items than active slots".into()))?;
            out.insert(slot, item);
        }
        Ok(out)
    }

    fn ask(&mut self, state: &ConversationState, rng: &mut dyn RngCore) -> Result<BTreeMap<SlotId, (AttrId, CatId)>> {
        match &mut self.bunt {
            Some(b) => b.ask(state, rng),
            None => Err(Error::Contract("fm-all never asks".into())),
        }
    }

    fn act(
        &mut self,
        state: &ConversationState,
        can_recommend: bool,
        can_ask: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Option<Action>> {
        let mode = match (&mut self.bunt, can_recommend, can_ask) {
            (_, false, false) | (None, false, true) => return Ok(None),
            (_, true, false) | (None, true, true) => Manage::Recommend,
            (Some(_), false, true) => Manage::Ask,
            (Some(b), true, true) => b.decide(state, rng)?,
        };
        Ok(Some(match mode {
            Manage::Recommend => Action::Recommend(self.recommend(state, rng)?),
            Manage::Ask => Action::Ask(self.ask(state, rng)?),
        }))
    }
}
