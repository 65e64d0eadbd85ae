use super::{read_records, write_lines, Catalog};
use crate::error::{Error, Result};
use crate::ids::{ItemId, UserId};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// A set of items consumed together. Stored sorted and duplicate free.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<ItemId>", into = "Vec<ItemId>")]
pub struct Bundle(Vec<ItemId>);

impl Bundle {
    pub fn new(items: impl IntoIterator<Item = ItemId>) -> Result<Self> {
        let mut v: Vec<ItemId> = items.into_iter().collect();
        let n = v.len();
        v.sort();
        v.dedup();
        if v.len() != n {
            return Err(Error::Validation("bundle contains duplicate items".into()));
        }
        if v.is_empty() {
            return Err(Error::Validation("bundle is empty".into()));
        }
        Ok(Bundle(v))
    }

    pub fn items(&self) -> &[ItemId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, item: ItemId) -> bool {
        self.0.binary_search(&item).is_ok()
    }

    pub fn to_set(&self) -> BTreeSet<ItemId> {
        self.0.iter().copied().collect()
    }
}

impl TryFrom<Vec<ItemId>> for Bundle {
    type Error = Error;
    fn try_from(v: Vec<ItemId>) -> Result<Self> {
        Bundle::new(v)
    }
}

impl From<Bundle> for Vec<ItemId> {
    fn from(b: Bundle) -> Self {
        b.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user: UserId,
    pub bundles: Vec<Bundle>,
}

#[derive(Serialize, Deserialize)]
struct InteractionRecord {
    user: u32,
    bundles: Vec<Vec<u32>>,
}

/// Loaded histories plus the number of users dropped for having fewer than two bundles.
#[derive(Clone, Debug)]
pub struct Interactions {
    pub histories: Vec<UserHistory>,
    pub dropped: usize,
}

/// Parses interaction records already read into memory. Users with fewer
/// than two bundles are dropped and counted.
pub fn parse_interactions(
    records: impl IntoIterator<Item = (u32, Vec<Vec<u32>>)>,
    catalog: &Catalog,
) -> Result<Interactions> {
    let mut histories = Vec::new();
    let mut dropped = 0;
    let mut seen = BTreeSet::new();
    for (user, raw) in records {
        if !seen.insert(user) {
            return Err(Error::Validation(format!("duplicate user {user}")));
        }
        let mut bundles = Vec::with_capacity(raw.len());
        for b in raw {
            for &i in &b {
                if !catalog.contains(ItemId(i)) {
                    return Err(Error::Validation(format!("unknown item {i}")));
                }
            }
            bundles.push(
                Bundle::new(b.into_iter().map(ItemId))
                    .map_err(|e| Error::Validation(format!("user {user}: {e}")))?,
            );
        }
        if bundles.len() < 2 {
            dropped += 1;
            continue;
        }
        histories.push(UserHistory {
            user: UserId(user),
            bundles,
        });
    }
    Ok(Interactions { histories, dropped })
}

/// Loads the interactions file; every item must exist in `catalog`.
pub fn load_interactions(path: impl AsRef<Path>, catalog: &Catalog) -> Result<Interactions> {
    let path = path.as_ref();
    let mut raw = Vec::new();
    read_records(path, |_, r: InteractionRecord| {
        raw.push((r.user, r.bundles));
        Ok(())
    })?;
    parse_interactions(raw, catalog)
}

pub fn write_interactions(path: impl AsRef<Path>, histories: &[UserHistory]) -> Result<()> {
    write_lines(
        path.as_ref(),
        histories.iter().map(|h| InteractionRecord {
            user: h.user.0,
            bundles: h
                .bundles
                .iter()
                .map(|b| b.items().iter().map(|i| i.0).collect())
                .collect(),
        }),
    )
}

/// Removes items occurring fewer than `min_count` times, then users with fewer
/// than `min_count` remaining item interactions, then users left with fewer
/// than two bundles. Off by default in the pipeline.
pub fn frequency_filter(histories: &[UserHistory], min_count: usize) -> Vec<UserHistory> {
    let mut counts: BTreeMap<ItemId, usize> = BTreeMap::new();
    for h in histories {
        for b in &h.bundles {
            for &i in b.items() {
                *counts.entry(i).or_default() += 1;
            }
        }
    }
    histories
        .iter()
        .filter_map(|h| {
            let bundles: Vec<Bundle> = h
                .bundles
                .iter()
                .filter_map(|b| {
                    Bundle::new(b.items().iter().copied().filter(|i| counts[i] >= min_count)).ok()
                })
                .collect();
            let n_inter: usize = bundles.iter().map(Bundle::len).sum();
            (n_inter >= min_count && bundles.len() >= 2).then(|| UserHistory {
                user: h.user,
                bundles,
            })
        })
        .collect()
}
