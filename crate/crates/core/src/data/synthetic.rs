use super::{Bundle, Catalog, ItemRecord, UserHistory};
use crate::error::{Error, Result};
use crate::ids::{ItemId, UserId};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Parameters of the planted-preference corpus.
///
/// Every user belongs to a latent type; each type prefers a block of
/// categories and attributes. Bundle items are drawn from the type's preferred
/// items with probability `in_type_prob` and uniformly otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_attrs: usize,
    pub n_cats: usize,
    pub n_user_types: usize,
    pub bundles_per_user: usize,
    pub min_bundle_size: usize,
    pub max_bundle_size: usize,
    pub in_type_prob: f64,
    /// Upper bound on attributes per item (at least one is always assigned).
    pub max_attrs_per_item: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_users: 50,
            n_items: 200,
            n_attrs: 32,
            n_cats: 8,
            n_user_types: 8,
            bundles_per_user: 4,
            min_bundle_size: 2,
            max_bundle_size: 4,
            in_type_prob: 0.9,
            max_attrs_per_item: 5,
        }
    }
}

impl SyntheticConfig {
    /// Larger corpus for conversational comparisons: more users keep the
    /// TEST partition from being a handful of conversations, and the bigger
    /// catalog makes blind recommendation expensive.
    pub fn benchmark() -> Self {
        SyntheticConfig {
            n_users: 500,
            n_items: 400,
            n_cats: 10,
            n_user_types: 10,
            ..SyntheticConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic: {m}")));
        if self.n_users == 0 || self.n_user_types == 0 || self.n_cats == 0 || self.n_attrs == 0 {
            return bad("users, types, categories and attributes must be positive");
        }
        if self.bundles_per_user < 2 {
            return bad("bundles_per_user must be at least 2");
        }
        if self.min_bundle_size == 0 || self.min_bundle_size > self.max_bundle_size {
            return bad("bundle size range is empty");
        }
        if self.n_items < 2 * self.max_bundle_size {
            return bad("n_items must be at least twice the maximum bundle size");
        }
        if !(0.0..=1.0).contains(&self.in_type_prob) {
            return bad("in_type_prob must lie in [0, 1]");
        }
        if self.max_attrs_per_item == 0 {
            return bad("max_attrs_per_item must be positive");
        }
        Ok(())
    }
}

/// Deterministic planted-preference corpus.
pub fn generate_synthetic(
    cfg: &SyntheticConfig,
    seed: u64,
) -> Result<(Catalog, Vec<UserHistory>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Categories are dealt round-robin over a shuffled item order so every
    // category holds floor or ceil of n_items / n_cats items.
    let mut order: Vec<usize> = (0..cfg.n_items).collect();
    order.shuffle(&mut rng);
    let mut cat_of = vec![0u32; cfg.n_items];
    for (pos, &item) in order.iter().enumerate() {
        cat_of[item] = (pos % cfg.n_cats) as u32;
    }
    let max_attrs = cfg.max_attrs_per_item.min(cfg.n_attrs);
    let records: Vec<ItemRecord> = (0..cfg.n_items)
        .map(|i| {
            let n = rng.random_range(1..=max_attrs);
            let mut attrs: Vec<u32> = rand::seq::index::sample(&mut rng, cfg.n_attrs, n)
                .into_iter()
                .map(|a| a as u32)
                .collect();
            attrs.sort_unstable();
            ItemRecord {
                item: i as u32,
                cats: vec![cat_of[i]],
                attrs,
            }
        })
        .collect();
    let catalog = Catalog::with_vocab(records, Some(cfg.n_attrs), Some(cfg.n_cats))?;

    let cats_per_type = (cfg.n_cats / cfg.n_user_types).max(1);
    let attrs_per_type = (cfg.n_attrs / cfg.n_user_types).max(1);
    let pools: Vec<Vec<ItemId>> = (0..cfg.n_user_types)
        .map(|t| {
            let cats: Vec<u32> = (0..cats_per_type)
                .map(|j| ((t * cats_per_type + j) % cfg.n_cats) as u32)
                .collect();
            let attrs: Vec<u32> = (0..attrs_per_type)
                .map(|j| ((t * attrs_per_type + j) % cfg.n_attrs) as u32)
                .collect();
            let in_cats = |i: ItemId| catalog.cats_of(i).iter().any(|c| cats.contains(&c.0));
            let strict: Vec<ItemId> = catalog
                .items()
                .filter(|&i| in_cats(i) && catalog.attrs_of(i).iter().any(|a| attrs.contains(&a.0)))
                .collect();
            if strict.len() >= cfg.max_bundle_size {
                strict
            } else {
                catalog.items().filter(|&i| in_cats(i)).collect()
            }
        })
        .collect();
    if let Some((t, p)) = pools.iter().enumerate().find(|(_, p)| p.len() < cfg.max_bundle_size) {
        return Err(Error::Config(format!(
            "synthetic: type {t} has only {} preferred items, need {}",
            p.len(),
            cfg.max_bundle_size
        )));
    }

    let histories = (0..cfg.n_users)
        .map(|u| {
            let pool = &pools[u % cfg.n_user_types];
            let bundles = (0..cfg.bundles_per_user)
                .map(|_| {
                    let size = rng.random_range(cfg.min_bundle_size..=cfg.max_bundle_size);
                    let mut items: Vec<ItemId> = Vec::with_capacity(size);
                    while items.len() < size {
                        let cand = if rng.random_bool(cfg.in_type_prob) {
                            pool[rng.random_range(0..pool.len())]
                        } else {
                            ItemId::from(rng.random_range(0..cfg.n_items))
                        };
                        if !items.contains(&cand) {
                            items.push(cand);
                        }
                    }
                    Bundle::new(items).expect("distinct non-empty items")
                })
                .collect();
            UserHistory {
                user: UserId(u as u32),
                bundles,
            }
        })
        .collect();
    Ok((catalog, histories))
}

/// Latent type of a synthetic user, as assigned by [`generate_synthetic`].
pub fn synthetic_user_type(cfg: &SyntheticConfig, user: UserId) -> usize {
    user.idx() % cfg.n_user_types
}
