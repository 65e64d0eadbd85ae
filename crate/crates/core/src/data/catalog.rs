use super::{read_records, write_lines};
use crate::error::{Error, Result};
use crate::ids::{AttrId, CatId, ItemId};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One line of the catalog file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item: u32,
    pub cats: Vec<u32>,
    pub attrs: Vec<u32>,
}

/// The item/tag universe with forward and inverted tag indexes.
///
/// Item ids are dense: `0..n_items`. Tag lists are sorted and duplicate free.
#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    attrs_of: Vec<Vec<AttrId>>,
    cats_of: Vec<Vec<CatId>>,
    items_with_attr: Vec<Vec<ItemId>>,
    items_with_cat: Vec<Vec<ItemId>>,
}

impl Catalog {
    /// Builds a catalog with vocabulary sizes inferred from the largest tag id seen.
    pub fn from_records(records: Vec<ItemRecord>) -> Result<Self> {
        Self::with_vocab(records, None, None)
    }

    /// Builds a catalog, optionally declaring vocabulary sizes larger than the
    /// tags that actually occur.
    pub fn with_vocab(
        mut records: Vec<ItemRecord>,
        n_attrs: Option<usize>,
        n_cats: Option<usize>,
    ) -> Result<Self> {
        records.sort_by_key(|r| r.item);
        for w in records.windows(2) {
            if w[0].item == w[1].item {
                return Err(Error::Validation(format!("duplicate item id {}", w[0].item)));
            }
        }
        for (pos, r) in records.iter().enumerate() {
            if r.item as usize != pos {
                return Err(Error::Validation(format!(
                    "item ids must be dense from 0; missing item {pos}"
                )));
            }
            if r.cats.is_empty() {
                return Err(Error::Validation(format!("item {} has no category", r.item)));
            }
        }
        let max_attr = records.iter().flat_map(|r| r.attrs.iter()).max().map(|&a| a as usize + 1);
        let max_cat = records.iter().flat_map(|r| r.cats.iter()).max().map(|&c| c as usize + 1);
        let n_attrs = match (n_attrs, max_attr) {
            (Some(n), Some(m)) if m > n => {
                return Err(Error::Validation(format!("attribute id {} out of vocabulary {n}", m - 1)))
            }
            (Some(n), _) => n,
            (None, m) => m.unwrap_or(0),
        };
        let n_cats = match (n_cats, max_cat) {
            (Some(n), Some(m)) if m > n => {
                return Err(Error::Validation(format!("category id {} out of vocabulary {n}", m - 1)))
            }
            (Some(n), _) => n,
            (None, m) => m.unwrap_or(0),
        };

        let mut attrs_of = Vec::with_capacity(records.len());
        let mut cats_of = Vec::with_capacity(records.len());
        let mut items_with_attr = vec![Vec::new(); n_attrs];
        let mut items_with_cat = vec![Vec::new(); n_cats];
        for r in &records {
            let mut attrs: Vec<AttrId> = r.attrs.iter().map(|&a| AttrId(a)).collect();
            attrs.sort();
            attrs.dedup();
            let mut cats: Vec<CatId> = r.cats.iter().map(|&c| CatId(c)).collect();
            cats.sort();
            cats.dedup();
            let item = ItemId(r.item);
            for a in &attrs {
                items_with_attr[a.idx()].push(item);
            }
            for c in &cats {
                items_with_cat[c.idx()].push(item);
            }
            attrs_of.push(attrs);
            cats_of.push(cats);
        }
        Ok(Catalog {
            attrs_of,
            cats_of,
            items_with_attr,
            items_with_cat,
        })
    }

    pub fn n_items(&self) -> usize {
        self.attrs_of.len()
    }

    pub fn n_attrs(&self) -> usize {
        self.items_with_attr.len()
    }

    pub fn n_cats(&self) -> usize {
        self.items_with_cat.len()
    }

    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        (0..self.n_items()).map(ItemId::from)
    }

    pub fn contains(&self, item: ItemId) -> bool {
        item.idx() < self.n_items()
    }

    pub fn attrs_of(&self, item: ItemId) -> &[AttrId] {
        &self.attrs_of[item.idx()]
    }

    pub fn cats_of(&self, item: ItemId) -> &[CatId] {
        &self.cats_of[item.idx()]
    }

    pub fn items_with_attr(&self, attr: AttrId) -> &[ItemId] {
        &self.items_with_attr[attr.idx()]
    }

    pub fn items_with_cat(&self, cat: CatId) -> &[ItemId] {
        &self.items_with_cat[cat.idx()]
    }

    pub fn has_attr(&self, item: ItemId, attr: AttrId) -> bool {
        self.attrs_of(item).binary_search(&attr).is_ok()
    }

    pub fn has_cat(&self, item: ItemId, cat: CatId) -> bool {
        self.cats_of(item).binary_search(&cat).is_ok()
    }

    pub fn records(&self) -> Vec<ItemRecord> {
        self.items()
            .map(|i| ItemRecord {
                item: i.0,
                cats: self.cats_of(i).iter().map(|c| c.0).collect(),
                attrs: self.attrs_of(i).iter().map(|a| a.0).collect(),
            })
            .collect()
    }
}

/// Loads a line-delimited catalog file.
pub fn load_catalog(path: impl AsRef<Path>) -> Result<Catalog> {
    let path = path.as_ref();
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    read_records(path, |line, r: ItemRecord| {
        if !seen.insert(r.item) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("duplicate item id {}", r.item),
            });
        }
        records.push(r);
        Ok(())
    })?;
    Catalog::from_records(records)
}

pub fn write_catalog(path: impl AsRef<Path>, catalog: &Catalog) -> Result<()> {
    write_lines(path.as_ref(), catalog.records())
}
