use crate::data::{Bundle, Catalog, UserHistory};
use crate::error::{Error, Result};
use crate::ids::{AttrId, CatId, ItemId, UserId};
use crate::nn::{Hyperparameters, SlotInput};
use rand::seq::index::sample;
use rand::Rng;

/// One masked-bundle training example.
#[derive(Clone, Debug, PartialEq)]
pub struct ClozeInstance {
    pub user: UserId,
    /// Encoder input: the user's bundles except the target.
    pub history: Vec<Bundle>,
    /// One entry per sampled item; masked positions carry `item: None`.
    pub slots: Vec<SlotInput>,
    /// Positions in `slots` that are masked, with their labels below.
    pub masked: Vec<usize>,
    pub item_labels: Vec<ItemId>,
    pub attr_labels: Vec<Vec<AttrId>>,
    pub cat_labels: Vec<Vec<CatId>>,
}

impl ClozeInstance {
    pub fn k(&self) -> usize {
        self.masked.len()
    }
}

/// Picks a target bundle uniformly and builds a cloze instance from it.
pub fn sample_cloze_instance<R: Rng + ?Sized>(
    history: &UserHistory,
    catalog: &Catalog,
    hp: &Hyperparameters,
    rng: &mut R,
) -> Result<ClozeInstance> {
    if history.bundles.len() < 2 {
        return Err(Error::Contract(format!("user {} has fewer than two bundles", history.user)));
    }
    let n = rng.random_range(0..history.bundles.len());
    let context: Vec<Bundle> = history
        .bundles
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != n)
        .map(|(_, b)| b.clone())
        .collect();
    cloze_from_target(history.user, context, &history.bundles[n], catalog, hp, rng)
}

/// Builds a cloze instance for a given target bundle and encoder context.
pub fn cloze_from_target<R: Rng + ?Sized>(
    user: UserId,
    context: Vec<Bundle>,
    target: &Bundle,
    catalog: &Catalog,
    hp: &Hyperparameters,
    rng: &mut R,
) -> Result<ClozeInstance> {
    build(user, context, target, catalog, hp, false, rng)
}

/// Like [`cloze_from_target`] but with the partial bundle as large as
/// allowed, so the masked items are exactly the bundle items not shown.
/// Used for evaluation, where a smaller partial bundle would make the
/// masked items indistinguishable from the items left out of it.
pub fn full_cloze_from_target<R: Rng + ?Sized>(
    user: UserId,
    context: Vec<Bundle>,
    target: &Bundle,
    catalog: &Catalog,
    hp: &Hyperparameters,
    rng: &mut R,
) -> Result<ClozeInstance> {
    build(user, context, target, catalog, hp, true, rng)
}

fn build<R: Rng + ?Sized>(
    user: UserId,
    context: Vec<Bundle>,
    target: &Bundle,
    catalog: &Catalog,
    hp: &Hyperparameters,
    full: bool,
    rng: &mut R,
) -> Result<ClozeInstance> {
    if target.is_empty() {
        return Err(Error::Contract("empty target bundle".into()));
    }
    let size = target.len();
    let k = rng.random_range(1..=hp.k).min(size);
    let l_max = size.min(hp.max_bundle).max(k);
    let l = if full { l_max } else { rng.random_range(k..=l_max) };
    let picked: Vec<ItemId> = sample(rng, size, l).into_iter().map(|i| target.items()[i]).collect();

    let mut slots = Vec::with_capacity(l);
    let mut masked = Vec::with_capacity(k);
    let mut item_labels = Vec::with_capacity(k);
    let mut attr_labels = Vec::with_capacity(k);
    let mut cat_labels = Vec::with_capacity(k);
    for (pos, &item) in picked.iter().enumerate() {
        let (mut vis_a, mut hid_a) = (Vec::new(), Vec::new());
        for &a in catalog.attrs_of(item) {
            if rng.random_bool(hp.mask_ratio) {
                hid_a.push(a)
            } else {
                vis_a.push(a)
            }
        }
        let (mut vis_c, mut hid_c) = (Vec::new(), Vec::new());
        for &c in catalog.cats_of(item) {
            if rng.random_bool(hp.mask_ratio) {
                hid_c.push(c)
            } else {
                vis_c.push(c)
            }
        }
        let is_masked = pos < k;
        slots.push(SlotInput {
            item: (!is_masked).then_some(item),
            attrs: vis_a,
            cats: vis_c,
        });
        if is_masked {
            masked.push(pos);
            item_labels.push(item);
            attr_labels.push(hid_a);
            cat_labels.push(hid_c);
        }
    }
    Ok(ClozeInstance {
        user,
        history: context,
        slots,
        masked,
        item_labels,
        attr_labels,
        cat_labels,
    })
}
