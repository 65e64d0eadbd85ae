use crate::data::{Bundle, Catalog};
use crate::ids::{AttrId, CatId, ItemId, SlotId, UserId};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Outcome label of one round, fed back to the conversation manager.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ResultId {
    RecSuc,
    RecFail,
    AskSuc,
    AskFail,
    BundleSuc,
}

impl ResultId {
    pub const ALL: [ResultId; 5] = [
        ResultId::RecSuc,
        ResultId::RecFail,
        ResultId::AskSuc,
        ResultId::AskFail,
        ResultId::BundleSuc,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Short-term context of one slot. `accepted_item == None` is the mask token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotContext {
    pub id: SlotId,
    pub accepted_item: Option<ItemId>,
    pub accepted_attrs: BTreeSet<AttrId>,
    pub accepted_cats: BTreeSet<CatId>,
    pub active: bool,
}

impl SlotContext {
    pub fn fresh(id: SlotId) -> Self {
        SlotContext {
            id,
            accepted_item: None,
            accepted_attrs: BTreeSet::new(),
            accepted_cats: BTreeSet::new(),
            active: true,
        }
    }
}

/// Candidate pools stored as universes minus blacklists.
///
/// Item removals always apply to every active slot (recommended items and
/// items carrying a rejected tag), so the item pool is shared. Tag pools are
/// the universe minus globally rejected tags minus tags already asked in
/// that slot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePools {
    n_items: usize,
    n_attrs: usize,
    n_cats: usize,
    removed_items: BTreeSet<ItemId>,
    rejected_attrs: BTreeSet<AttrId>,
    rejected_cats: BTreeSet<CatId>,
    asked_attrs: BTreeMap<SlotId, BTreeSet<AttrId>>,
    asked_cats: BTreeMap<SlotId, BTreeSet<CatId>>,
}

impl CandidatePools {
    pub fn full(catalog: &Catalog) -> Self {
        CandidatePools {
            n_items: catalog.n_items(),
            n_attrs: catalog.n_attrs(),
            n_cats: catalog.n_cats(),
            removed_items: BTreeSet::new(),
            rejected_attrs: BTreeSet::new(),
            rejected_cats: BTreeSet::new(),
            asked_attrs: BTreeMap::new(),
            asked_cats: BTreeMap::new(),
        }
    }

    pub fn has_item(&self, _slot: SlotId, item: ItemId) -> bool {
        item.idx() < self.n_items && !self.removed_items.contains(&item)
    }

    pub fn has_attr(&self, slot: SlotId, attr: AttrId) -> bool {
        attr.idx() < self.n_attrs
            && !self.rejected_attrs.contains(&attr)
            && !self.asked_attrs.get(&slot).is_some_and(|s| s.contains(&attr))
    }

    pub fn has_cat(&self, slot: SlotId, cat: CatId) -> bool {
        cat.idx() < self.n_cats
            && !self.rejected_cats.contains(&cat)
            && !self.asked_cats.get(&slot).is_some_and(|s| s.contains(&cat))
    }

    pub fn item_pool(&self, slot: SlotId) -> Vec<ItemId> {
        (0..self.n_items)
            .map(ItemId::from)
            .filter(|&i| self.has_item(slot, i))
            .collect()
    }

    pub fn attr_pool(&self, slot: SlotId) -> Vec<AttrId> {
        (0..self.n_attrs)
            .map(AttrId::from)
            .filter(|&a| self.has_attr(slot, a))
            .collect()
    }

    pub fn cat_pool(&self, slot: SlotId) -> Vec<CatId> {
        (0..self.n_cats)
            .map(CatId::from)
            .filter(|&c| self.has_cat(slot, c))
            .collect()
    }

    pub fn item_pool_len(&self) -> usize {
        self.n_items - self.removed_items.len()
    }

    /// Membership mask over the full item vocabulary.
    pub fn item_mask(&self, slot: SlotId) -> Vec<bool> {
        (0..self.n_items).map(|i| self.has_item(slot, ItemId::from(i))).collect()
    }

    pub fn attr_mask(&self, slot: SlotId) -> Vec<bool> {
        (0..self.n_attrs).map(|a| self.has_attr(slot, AttrId::from(a))).collect()
    }

    pub fn cat_mask(&self, slot: SlotId) -> Vec<bool> {
        (0..self.n_cats).map(|c| self.has_cat(slot, CatId::from(c))).collect()
    }

    pub fn rejected_attrs(&self) -> &BTreeSet<AttrId> {
        &self.rejected_attrs
    }

    pub fn rejected_cats(&self) -> &BTreeSet<CatId> {
        &self.rejected_cats
    }

    pub(crate) fn remove_item(&mut self, item: ItemId) {
        self.removed_items.insert(item);
    }

    pub(crate) fn mark_asked(&mut self, slot: SlotId, attr: AttrId, cat: CatId) {
        self.asked_attrs.entry(slot).or_default().insert(attr);
        self.asked_cats.entry(slot).or_default().insert(cat);
    }

    pub(crate) fn reject_attr(&mut self, attr: AttrId, catalog: &Catalog) {
        self.rejected_attrs.insert(attr);
        self.removed_items.extend(catalog.items_with_attr(attr).iter().copied());
    }

    pub(crate) fn reject_cat(&mut self, cat: CatId, catalog: &Catalog) {
        self.rejected_cats.insert(cat);
        self.removed_items.extend(catalog.items_with_cat(cat).iter().copied());
    }
}

/// Per-user conversation state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationState {
    pub user: UserId,
    pub history: Vec<Bundle>,
    /// Every slot ever opened, keyed (and therefore ordered) by id.
    pub slots: BTreeMap<SlotId, SlotContext>,
    /// Currently active slot ids, ascending.
    pub active: Vec<SlotId>,
    pub pools: CandidatePools,
    pub result_log: Vec<ResultId>,
    pub accepted: BTreeSet<ItemId>,
    /// 1-based round counter; exceeds the budget once the last round is played.
    pub round: u32,
    pub(crate) next_slot: u32,
}

impl ConversationState {
    pub fn slot(&self, id: SlotId) -> Option<&SlotContext> {
        self.slots.get(&id)
    }

    pub fn active_slots(&self) -> impl Iterator<Item = &SlotContext> + '_ {
        self.active.iter().map(move |id| &self.slots[id])
    }

    pub fn is_active(&self, id: SlotId) -> bool {
        self.active.contains(&id)
    }
}
