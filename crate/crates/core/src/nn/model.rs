use super::matrix::Matrix;
use super::params::{ParamGroup, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::data::{Bundle, Catalog};
use crate::env::{ConversationState, ResultId};
use crate::error::{Error, Result};
use crate::ids::{AttrId, CatId, ItemId};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// How per-slot manage distributions are combined into the round decision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManageAggregate {
    #[default]
    Mean,
    First,
}

/// Architectural switches used by the ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub no_long_term: bool,
    pub no_short_term_tags: bool,
    pub no_short_term_items: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparameters {
    pub d: usize,
    pub fusion_layers: usize,
    pub heads: usize,
    pub item_layers: usize,
    pub bundle_layers: usize,
    pub ffn_mult: usize,
    pub k: usize,
    pub max_rounds: u32,
    pub mask_ratio: f64,
    pub lambda: f64,
    pub max_bundle: usize,
    pub max_history: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub manage_aggregate: ManageAggregate,
    pub ablation: Ablation,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            d: 32,
            fusion_layers: 1,
            heads: 1,
            item_layers: 1,
            bundle_layers: 1,
            ffn_mult: 2,
            k: 2,
            max_rounds: 10,
            mask_ratio: 0.5,
            lambda: 0.1,
            max_bundle: 20,
            max_history: 50,
            lr: 1e-3,
            batch_size: 32,
            manage_aggregate: ManageAggregate::Mean,
            ablation: Ablation::default(),
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let small = |name: &str, v: usize| {
            if [1, 2, 4].contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be 1, 2 or 4, got {v}")))
            }
        };
        small("fusion_layers", self.fusion_layers)?;
        small("heads", self.heads)?;
        small("item_layers", self.item_layers)?;
        small("bundle_layers", self.bundle_layers)?;
        if self.d == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("d={} not divisible by heads={}", self.d, self.heads)));
        }
        if self.k == 0 || self.max_rounds == 0 || self.max_bundle == 0 || self.max_history == 0 {
            return Err(Error::Config("k, max_rounds, max_bundle and max_history must be positive".into()));
        }
        if self.ffn_mult == 0 || self.batch_size == 0 {
            return Err(Error::Config("ffn_mult and batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} outside [0, 1]", self.mask_ratio)));
        }
        if !(self.lambda >= 0.0 && self.lr >= 0.0) {
            return Err(Error::Config("lambda and lr must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub n_items: usize,
    pub n_attrs: usize,
    pub n_cats: usize,
}

impl Vocab {
    pub fn of(catalog: &Catalog) -> Self {
        Vocab {
            n_items: catalog.n_items(),
            n_attrs: catalog.n_attrs(),
            n_cats: catalog.n_cats(),
        }
    }

    pub fn item_mask(&self) -> usize {
        self.n_items
    }

    pub fn item_pad(&self) -> usize {
        self.n_items + 1
    }
}

const RESULT_PAD: usize = 5;

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    attn: Attention,
    ln1: Norm,
    ff1: Linear,
    ff2: Linear,
    ln2: Norm,
}

#[derive(Clone, Debug)]
struct FusionBlock {
    w_attr: ParamId,
    w_cat: ParamId,
    ln0: Norm,
    self_attn: Attention,
    ln1: Norm,
    cross_attn: Attention,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
    ln3: Norm,
}

#[derive(Clone, Debug)]
struct Mlp {
    l1: Linear,
    l2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    item_emb: ParamId,
    attr_emb: ParamId,
    cat_emb: ParamId,
    result_emb: ParamId,
    item_enc: Vec<EncoderBlock>,
    bundle_enc: Vec<EncoderBlock>,
    fusion: Vec<FusionBlock>,
    manage_result: Mlp,
    manage_slot: Mlp,
    gate: Mlp,
    item_head: Mlp,
    attr_head: Mlp,
    cat_head: Mlp,
    value_manage: Mlp,
    value_item: Mlp,
    value_attr: Mlp,
    value_cat: Mlp,
}

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    fn uniform(&mut self, name: String, group: ParamGroup, rows: usize, cols: usize) -> ParamId {
        let a = (6.0 / (rows + cols).max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.random_range(-a..a)).collect();
        self.store.add(name, group, Matrix::from_vec(rows, cols, data))
    }

    fn normal(&mut self, name: String, group: ParamGroup, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.add(name, group, Matrix::from_vec(rows, cols, data))
    }

    fn constant(&mut self, name: String, group: ParamGroup, cols: usize, v: f64) -> ParamId {
        self.store.add(name, group, Matrix::from_vec(1, cols, vec![v; cols]))
    }

    fn linear(&mut self, name: &str, group: ParamGroup, i: usize, o: usize) -> Linear {
        Linear {
            w: self.uniform(format!("{name}.w"), group, i, o),
            b: self.constant(format!("{name}.b"), group, o, 0.0),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.constant(format!("{name}.g"), ParamGroup::Backbone, d, 1.0),
            b: self.constant(format!("{name}.b"), ParamGroup::Backbone, d, 0.0),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        let g = ParamGroup::Backbone;
        Attention {
            q: self.linear(&format!("{name}.q"), g, d, d),
            k: self.linear(&format!("{name}.k"), g, d, d),
            v: self.linear(&format!("{name}.v"), g, d, d),
            o: self.linear(&format!("{name}.o"), g, d, d),
        }
    }

    fn encoder(&mut self, name: &str, d: usize, ff: usize) -> EncoderBlock {
        EncoderBlock {
            attn: self.attention(&format!("{name}.attn"), d),
            ln1: self.norm(&format!("{name}.ln1"), d),
            ff1: self.linear(&format!("{name}.ff1"), ParamGroup::Backbone, d, ff),
            ff2: self.linear(&format!("{name}.ff2"), ParamGroup::Backbone, ff, d),
            ln2: self.norm(&format!("{name}.ln2"), d),
        }
    }

    fn fusion(&mut self, name: &str, d: usize, ff: usize) -> FusionBlock {
        FusionBlock {
            w_attr: self.uniform(format!("{name}.w_attr"), ParamGroup::Backbone, d, d),
            w_cat: self.uniform(format!("{name}.w_cat"), ParamGroup::Backbone, d, d),
            ln0: self.norm(&format!("{name}.ln0"), d),
            self_attn: self.attention(&format!("{name}.self"), d),
            ln1: self.norm(&format!("{name}.ln1"), d),
            cross_attn: self.attention(&format!("{name}.cross"), d),
            ln2: self.norm(&format!("{name}.ln2"), d),
            ff1: self.linear(&format!("{name}.ff1"), ParamGroup::Backbone, d, ff),
            ff2: self.linear(&format!("{name}.ff2"), ParamGroup::Backbone, ff, d),
            ln3: self.norm(&format!("{name}.ln3"), d),
        }
    }

    fn mlp(&mut self, name: &str, group: ParamGroup, i: usize, h: usize, o: usize) -> Mlp {
        Mlp {
            l1: self.linear(&format!("{name}.1"), group, i, h),
            l2: self.linear(&format!("{name}.2"), group, h, o),
        }
    }
}

/// Short-term context of one slot as seen by the network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SlotInput {
    pub item: Option<ItemId>,
    pub attrs: Vec<AttrId>,
    pub cats: Vec<CatId>,
}

/// Slot inputs for every slot ever opened, in slot-id order.
pub fn slot_inputs(state: &ConversationState) -> Vec<SlotInput> {
    state
        .slots
        .values()
        .map(|s| SlotInput {
            item: s.accepted_item,
            attrs: s.accepted_attrs.iter().copied().collect(),
            cats: s.accepted_cats.iter().copied().collect(),
        })
        .collect()
}

/// Long-term input: raw bundles or an already encoded `E_u`.
#[derive(Clone, Copy, Debug)]
pub enum HistoryInput<'a> {
    Bundles(&'a [Bundle]),
    Encoded(&'a Matrix),
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `|slots| × d`
    pub o: Var,
    /// `1 × d`
    pub result: Var,
}

/// The BUNT network: parameters plus the layout that names them.
#[derive(Clone, Debug)]
pub struct Bunt {
    pub hp: Hyperparameters,
    pub vocab: Vocab,
    pub params: ParamStore,
    layout: Layout,
}

impl Bunt {
    pub fn new(hp: Hyperparameters, vocab: Vocab, seed: u64) -> Result<Self> {
        hp.validate()?;
        if vocab.n_items == 0 {
            return Err(Error::Config("empty item vocabulary".into()));
        }
        let d = hp.d;
        let ff = d * hp.ffn_mult;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: ParamStore::default(),
        };
        let bb = ParamGroup::Backbone;
        let std = 1.0 / (d as f64).sqrt();
        let item_emb = init.normal("emb.item".into(), bb, vocab.n_items + 2, d, std);
        let attr_emb = init.normal("emb.attr".into(), bb, vocab.n_attrs + 1, d, std);
        let cat_emb = init.normal("emb.cat".into(), bb, vocab.n_cats + 1, d, std);
        let result_emb = init.normal("emb.result".into(), bb, RESULT_PAD + 1, d, std);
        let item_enc = (0..hp.item_layers)
            .map(|l| init.encoder(&format!("enc.item.{l}"), d, ff))
            .collect();
        let bundle_enc = (0..hp.bundle_layers)
            .map(|l| init.encoder(&format!("enc.bundle.{l}"), d, ff))
            .collect();
        let fusion = (0..hp.fusion_layers)
            .map(|l| init.fusion(&format!("fusion.{l}"), d, ff))
            .collect();
        let (m, i, a, c) = (ParamGroup::Manage, ParamGroup::Item, ParamGroup::Attr, ParamGroup::Cat);
        let layout = Layout {
            item_emb,
            attr_emb,
            cat_emb,
            result_emb,
            item_enc,
            bundle_enc,
            fusion,
            manage_result: init.mlp("head.manage_result", m, d, d, 2),
            manage_slot: init.mlp("head.manage_slot", m, d, d, 2),
            gate: init.mlp("head.gate", m, 2 * d, d, 1),
            item_head: init.mlp("head.item", i, d, d, vocab.n_items),
            attr_head: init.mlp("head.attr", a, d, d, vocab.n_attrs),
            cat_head: init.mlp("head.cat", c, d, d, vocab.n_cats),
            value_manage: init.mlp("value.manage", m, 2 * d, d, 1),
            value_item: init.mlp("value.item", i, d, d, 1),
            value_attr: init.mlp("value.attr", a, d, d, 1),
            value_cat: init.mlp("value.cat", c, d, d, 1),
        };
        Ok(Bunt {
            hp,
            vocab,
            params: init.store,
            layout,
        })
    }

    /// Replaces every tensor of `group` with a fresh initialisation.
    pub fn reinit_group(&mut self, group: ParamGroup, seed: u64) -> Result<()> {
        let fresh = Bunt::new(self.hp.clone(), self.vocab, seed)?;
        for id in self.params.ids().collect::<Vec<_>>() {
            if self.params.group(id) == group {
                *self.params.get_mut(id) = fresh.params.get(id).clone();
            }
        }
        Ok(())
    }

    fn linear(&self, t: &mut Tape, l: &Linear, x: Var) -> Var {
        let w = t.param(l.w);
        let b = t.param(l.b);
        let y = t.matmul(x, w);
        t.add_bias(y, b)
    }

    fn norm(&self, t: &mut Tape, n: &Norm, x: Var) -> Var {
        let g = t.param(n.g);
        let b = t.param(n.b);
        t.layer_norm(x, g, b)
    }

    fn mlp(&self, t: &mut Tape, m: &Mlp, x: Var) -> Var {
        let h = self.linear(t, &m.l1, x);
        let h = t.relu(h);
        self.linear(t, &m.l2, h)
    }

    fn attention(&self, t: &mut Tape, a: &Attention, q_in: Var, kv_in: Var) -> Var {
        let q = self.linear(t, &a.q, q_in);
        let k = self.linear(t, &a.k, kv_in);
        let v = self.linear(t, &a.v, kv_in);
        let heads = self.hp.heads;
        let dh = self.hp.d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    t.slice_cols(q, h * dh, dh),
                    t.slice_cols(k, h * dh, dh),
                    t.slice_cols(v, h * dh, dh),
                )
            };
            let s = t.matmul_bt(qh, kh);
            let s = t.scale(s, scale);
            let w = t.softmax_rows(s);
            outs.push(t.matmul(w, vh));
        }
        let cat = if heads == 1 { outs[0] } else { t.concat_cols(outs) };
        self.linear(t, &a.o, cat)
    }

    fn feed_forward(&self, t: &mut Tape, ff1: &Linear, ff2: &Linear, x: Var) -> Var {
        let h = self.linear(t, ff1, x);
        let h = t.relu(h);
        self.linear(t, ff2, h)
    }

    fn encoder_block(&self, t: &mut Tape, b: &EncoderBlock, x: Var) -> Var {
        let a = self.attention(t, &b.attn, x, x);
        let h = t.add(x, a);
        let h = self.norm(t, &b.ln1, h);
        let f = self.feed_forward(t, &b.ff1, &b.ff2, h);
        let o = t.add(h, f);
        self.norm(t, &b.ln2, o)
    }

    fn check_item(&self, item: ItemId) -> Result<usize> {
        if item.idx() < self.vocab.n_items {
            Ok(item.idx())
        } else {
            Err(Error::Model(format!("item {item} outside vocabulary of {}", self.vocab.n_items)))
        }
    }

    /// Hierarchical long-term encoding `E_u`, one row per history bundle.
    pub fn encode_history(&self, t: &mut Tape, history: &[Bundle]) -> Result<Var> {
        if history.is_empty() {
            return Err(Error::Contract("cannot encode an empty history".into()));
        }
        let start = history.len().saturating_sub(self.hp.max_history);
        let emb = t.param(self.layout.item_emb);
        let mut pooled = Vec::with_capacity(history.len() - start);
        for bundle in &history[start..] {
            let items = truncate_bundle(bundle, self.hp.max_bundle);
            let rows = items
                .iter()
                .map(|&i| self.check_item(i).map(|r| vec![r]))
                .collect::<Result<Vec<_>>>()?;
            let n = rows.len();
            let mut h = t.pool_rows(emb, rows);
            for blk in &self.layout.item_enc {
                h = self.encoder_block(t, blk, h);
            }
            pooled.push(t.pool_rows(h, vec![(0..n).collect()]));
        }
        let mut e = if pooled.len() == 1 { pooled[0] } else { t.concat_rows(pooled) };
        for blk in &self.layout.bundle_enc {
            e = self.encoder_block(t, blk, e);
        }
        Ok(e)
    }

    /// Numeric `E_u`, for callers that keep the backbone fixed.
    pub fn encode_history_value(&self, history: &[Bundle]) -> Result<Matrix> {
        let mut t = Tape::new(&self.params);
        let e = self.encode_history(&mut t, history)?;
        Ok(t.value(e).clone())
    }

    /// Short-term embeddings `(E_I, E_A, E_C)`, one row per slot.
    pub fn embed_short_term(&self, t: &mut Tape, slots: &[SlotInput]) -> Result<(Var, Var, Var)> {
        let v = self.vocab;
        let mut items = Vec::with_capacity(slots.len());
        let mut attrs = Vec::with_capacity(slots.len());
        let mut cats = Vec::with_capacity(slots.len());
        for s in slots {
            items.push(vec![match s.item {
                Some(i) if !self.hp.ablation.no_short_term_items => self.check_item(i)?,
                _ => v.item_mask(),
            }]);
            attrs.push(tag_rows(s.attrs.iter().map(|a| a.idx()), v.n_attrs, "attribute")?);
            cats.push(tag_rows(s.cats.iter().map(|c| c.idx()), v.n_cats, "category")?);
        }
        let (ie, ae, ce) = (
            t.param(self.layout.item_emb),
            t.param(self.layout.attr_emb),
            t.param(self.layout.cat_emb),
        );
        Ok((t.pool_rows(ie, items), t.pool_rows(ae, attrs), t.pool_rows(ce, cats)))
    }

    /// Fusion stack producing `O^L`. `e_u = None` skips cross-attention.
    pub fn fuse(&self, t: &mut Tape, e_u: Option<Var>, e_i: Var, e_a: Var, e_c: Var) -> Var {
        let mut o = e_i;
        for blk in &self.layout.fusion {
            let base = if self.hp.ablation.no_short_term_tags {
                o
            } else {
                let wa = t.param(blk.w_attr);
                let wc = t.param(blk.w_cat);
                let pa = t.matmul(e_a, wa);
                let pc = t.matmul(e_c, wc);
                t.sum(vec![o, pa, pc])
            };
            let ot = self.norm(t, &blk.ln0, base);
            let sa = self.attention(t, &blk.self_attn, ot, ot);
            let h = t.add(ot, sa);
            let mut h = self.norm(t, &blk.ln1, h);
            if let Some(eu) = e_u.filter(|_| !self.hp.ablation.no_long_term) {
                let ca = self.attention(t, &blk.cross_attn, h, eu);
                let h2 = t.add(h, ca);
                h = self.norm(t, &blk.ln2, h2);
            }
            let f = self.feed_forward(t, &blk.ff1, &blk.ff2, h);
            let out = t.add(h, f);
            o = self.norm(t, &blk.ln3, out);
        }
        o
    }

    /// Mean of the result-id embeddings, or the PAD row for an empty log.
    pub fn result_vec(&self, t: &mut Tape, results: &[ResultId]) -> Var {
        let rows = if results.is_empty() {
            vec![RESULT_PAD]
        } else {
            results.iter().map(|r| r.index()).collect()
        };
        let emb = t.param(self.layout.result_emb);
        t.pool_rows(emb, vec![rows])
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        history: HistoryInput<'_>,
        slots: &[SlotInput],
        results: &[ResultId],
    ) -> Result<Forward> {
        if slots.is_empty() {
            return Err(Error::Contract("no slots to encode".into()));
        }
        let e_u = if self.hp.ablation.no_long_term {
            None
        } else {
            Some(match history {
                HistoryInput::Bundles(b) => self.encode_history(t, b)?,
                HistoryInput::Encoded(m) => t.constant(m.clone()),
            })
        };
        let (e_i, e_a, e_c) = self.embed_short_term(t, slots)?;
        let o = self.fuse(t, e_u, e_i, e_a, e_c);
        let result = self.result_vec(t, results);
        Ok(Forward { o, result })
    }

    pub fn item_logits(&self, t: &mut Tape, rows: Var) -> Var {
        self.mlp(t, &self.layout.item_head, rows)
    }

    pub fn attr_logits(&self, t: &mut Tape, rows: Var) -> Var {
        self.mlp(t, &self.layout.attr_head, rows)
    }

    pub fn cat_logits(&self, t: &mut Tape, rows: Var) -> Var {
        self.mlp(t, &self.layout.cat_head, rows)
    }

    /// `π_M″` logits per slot row, columns `[recommend, ask]`.
    pub fn manage_slot_logits(&self, t: &mut Tape, rows: Var) -> Var {
        self.mlp(t, &self.layout.manage_slot, rows)
    }

    /// Gated per-slot manage distributions `P_M` (`m × 2`) and the gates `β` (`m × 1`).
    pub fn manage_probs(&self, t: &mut Tape, result: Var, rows: Var) -> (Var, Var) {
        let m = t.value(rows).rows;
        let lr = self.mlp(t, &self.layout.manage_result, result);
        let p_result = t.softmax_rows(lr);
        let ls = self.manage_slot_logits(t, rows);
        let p_slot = t.softmax_rows(ls);
        let rb = t.pool_rows(result, vec![vec![0]; m]);
        let gin = t.concat_cols(vec![rb, rows]);
        let gl = self.mlp(t, &self.layout.gate, gin);
        let beta = t.sigmoid(gl);
        (t.mix_rows(beta, p_result, p_slot), beta)
    }

    /// Round-level manage distribution `1 × 2` from the per-slot ones.
    pub fn aggregate_manage(&self, t: &mut Tape, per_slot: Var) -> Var {
        let m = t.value(per_slot).rows;
        let group = match self.hp.manage_aggregate {
            ManageAggregate::Mean => (0..m).collect(),
            ManageAggregate::First => vec![0],
        };
        t.pool_rows(per_slot, vec![group])
    }

    pub fn manage_value(&self, t: &mut Tape, result: Var, rows: Var) -> Var {
        let m = t.value(rows).rows;
        let mean = t.pool_rows(rows, vec![(0..m).collect()]);
        let x = t.concat_cols(vec![result, mean]);
        self.mlp(t, &self.layout.value_manage, x)
    }

    pub fn item_value(&self, t: &mut Tape, rows: Var) -> Var {
        self.mlp(t, &self.layout.value_item, rows)
    }

    pub fn attr_value(&self, t: &mut Tape, rows: Var) -> Var {
        self.mlp(t, &self.layout.value_attr, rows)
    }

    pub fn cat_value(&self, t: &mut Tape, rows: Var) -> Var {
        self.mlp(t, &self.layout.value_cat, rows)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Bunt::from_checkpoint(ckpt)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            hyper: self.hp.clone(),
            vocab: self.vocab,
            tensors: self
                .params
                .ids()
                .map(|id| {
                    let m = self.params.get(id);
                    TensorRecord {
                        name: self.params.name(id).to_string(),
                        group: self.params.group(id),
                        rows: m.rows,
                        cols: m.cols,
                        data: m.data.clone(),
                    }
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut model = Bunt::new(ckpt.hyper, ckpt.vocab, 0)?;
        if ckpt.tensors.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                ckpt.tensors.len()
            )));
        }
        for rec in ckpt.tensors {
            let id = model
                .params
                .find(&rec.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", rec.name)))?;
            let slot = model.params.get_mut(id);
            if (slot.rows, slot.cols) != (rec.rows, rec.cols) || rec.data.len() != rec.rows * rec.cols {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {}: expected {}x{}, found {}x{} ({} values)",
                    rec.name,
                    slot.rows,
                    slot.cols,
                    rec.rows,
                    rec.cols,
                    rec.data.len()
                )));
            }
            slot.data = rec.data;
        }
        Ok(model)
    }
}

pub const CHECKPOINT_FORMAT: &str = "bunt-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Self-describing checkpoint file contents.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub hyper: Hyperparameters,
    pub vocab: Vocab,
    pub tensors: Vec<TensorRecord>,
}

fn tag_rows(tags: impl Iterator<Item = usize>, n: usize, what: &str) -> Result<Vec<usize>> {
    let rows: Vec<usize> = tags.collect();
    if let Some(bad) = rows.iter().find(|&&r| r >= n) {
        return Err(Error::Model(format!("{what} {bad} outside vocabulary of {n}")));
    }
    Ok(if rows.is_empty() { vec![n] } else { rows })
}

/// Keeps at most `max` items, chosen uniformly with a seed derived from the
/// bundle contents so the same bundle always truncates the same way.
pub fn truncate_bundle(bundle: &Bundle, max: usize) -> Vec<ItemId> {
    let items = bundle.items();
    if items.len() <= max {
        return items.to_vec();
    }
    let seed = items
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, i| (h ^ i.0 as u64).wrapping_mul(0x100_0000_01b3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, items.len(), max).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i]).collect()
}
