//! Wire format of a system turn.

use anyhow::Context;
use bundle_mcr::data::Catalog;
use bundle_mcr::env::Action;
use bundle_mcr::{AttrId, CatId, ItemId, SlotId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Optional display names, read from a JSON file
/// `{"items": {"3": "..."}, "attrs": {...}, "cats": {...}}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Labels {
    pub items: BTreeMap<u32, String>,
    pub attrs: BTreeMap<u32, String>,
    pub cats: BTreeMap<u32, String>,
}

impl Labels {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading labels {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing labels {}", path.display()))
    }

    fn tags(&self, attrs: &[AttrId], cats: &[CatId]) -> Option<TagLabels> {
        let attrs: Vec<String> = attrs.iter().filter_map(|a| self.attrs.get(&a.0).cloned()).collect();
        let cats: Vec<String> = cats.iter().filter_map(|c| self.cats.get(&c.0).cloned()).collect();
        (!attrs.is_empty() || !cats.is_empty()).then_some(TagLabels { attrs, cats })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagLabels {
    pub attrs: Vec<String>,
    pub cats: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TurnKind {
    #[serde(rename = "RECOMMEND")]
    Recommend,
    #[serde(rename = "ASK")]
    Ask,
}

/// One proposal card: an item with its tags, or an (attribute, category) question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SlotCard {
    Item {
        slot: SlotId,
        item: ItemId,
        attrs: Vec<AttrId>,
        cats: Vec<CatId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tag_labels: Option<TagLabels>,
    },
    Question {
        slot: SlotId,
        attr: AttrId,
        cat: CatId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        attr_label: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cat_label: Option<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub kind: TurnKind,
    pub round: u32,
    pub slots: Vec<SlotCard>,
}

impl Turn {
    pub fn new(action: &Action, round: u32, catalog: &Catalog, labels: &Labels) -> Self {
        match action {
            Action::Recommend(p) => Turn {
                kind: TurnKind::Recommend,
                round,
                slots: p
                    .iter()
                    .map(|(&slot, &item)| SlotCard::Item {
                        slot,
                        item,
                        attrs: catalog.attrs_of(item).to_vec(),
                        cats: catalog.cats_of(item).to_vec(),
                        label: labels.items.get(&item.0).cloned(),
                        tag_labels: labels.tags(catalog.attrs_of(item), catalog.cats_of(item)),
                    })
                    .collect(),
            },
            Action::Ask(q) => Turn {
                kind: TurnKind::Ask,
                round,
                slots: q
                    .iter()
                    .map(|(&slot, &(attr, cat))| SlotCard::Question {
                        slot,
                        attr,
                        cat,
                        attr_label: labels.attrs.get(&attr.0).cloned(),
                        cat_label: labels.cats.get(&cat.0).cloned(),
                    })
                    .collect(),
            },
        }
    }

    /// The action this turn describes.
    pub fn action(&self) -> Action {
        match self.kind {
            TurnKind::Recommend => Action::Recommend(
                self.slots
                    .iter()
                    .filter_map(|c| match c {
                        SlotCard::Item { slot, item, .. } => Some((*slot, *item)),
                        SlotCard::Question { .. } => None,
                    })
                    .collect(),
            ),
            TurnKind::Ask => Action::Ask(
                self.slots
                    .iter()
                    .filter_map(|c| match c {
                        SlotCard::Question { slot, attr, cat, .. } => Some((*slot, (*attr, *cat))),
                        SlotCard::Item { .. } => None,
                    })
                    .collect(),
            ),
        }
    }
}
