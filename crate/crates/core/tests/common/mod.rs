//! Independent oracles shared by the property tests and the acceptance run.
#![allow(dead_code)]

use bundle_mcr::data::{Bundle, Catalog, ItemRecord};
use bundle_mcr::env::{
    Action, ConversationState, Env, Feedback, ItemFeedback, ItemVerdict, ResultId, Rewards, TagFeedback, TagVerdict,
};
use bundle_mcr::simulator::SimulatedUser;
use bundle_mcr::{AttrId, CatId, ItemId, SlotId, UserId};
use rand::seq::IndexedRandom;
use rand::Rng;
use std::collections::{BTreeMap, BTreeSet};

pub fn random_catalog<R: Rng>(rng: &mut R, max_items: usize) -> Catalog {
    let n_items = rng.random_range(2..=max_items);
    let n_attrs = rng.random_range(1..=5);
    let n_cats = rng.random_range(1..=4);
    let records = (0..n_items)
        .map(|i| {
            let mut attrs: Vec<u32> = (0..n_attrs as u32).filter(|_| rng.random_bool(0.35)).collect();
            if attrs.is_empty() {
                attrs.push(rng.random_range(0..n_attrs as u32));
            }
            let mut cats: Vec<u32> = vec![rng.random_range(0..n_cats as u32)];
            if rng.random_bool(0.2) {
                let c = rng.random_range(0..n_cats as u32);
                if !cats.contains(&c) {
                    cats.push(c);
                }
            }
            ItemRecord {
                item: i as u32,
                cats,
                attrs,
            }
        })
        .collect();
    Catalog::with_vocab(records, Some(n_attrs), Some(n_cats)).unwrap()
}

pub fn random_bundle<R: Rng>(rng: &mut R, n_items: usize, max_len: usize) -> Bundle {
    let len = rng.random_range(1..=max_len.min(n_items));
    Bundle::new(rand::seq::index::sample(rng, n_items, len).into_iter().map(ItemId::from)).unwrap()
}

// ---------------------------------------------------------------------------
// Environment oracle: everything is recomputed from the event log.

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSlot {
    pub id: SlotId,
    pub item: Option<ItemId>,
    pub attrs: BTreeSet<AttrId>,
    pub cats: BTreeSet<CatId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleView {
    pub active: Vec<OracleSlot>,
    pub accepted: BTreeSet<ItemId>,
    pub results: Vec<ResultId>,
    pub item_pool: BTreeSet<ItemId>,
    pub attr_pools: BTreeMap<SlotId, BTreeSet<AttrId>>,
    pub cat_pools: BTreeMap<SlotId, BTreeSet<CatId>>,
    pub last_rewards: Option<Rewards>,
    pub done: bool,
}

/// Folds the whole log from scratch; O(log length × catalog) per call.
pub fn oracle_view(
    catalog: &Catalog,
    k: usize,
    max_rounds: u32,
    target: Option<&Bundle>,
    log: &[(Action, Feedback)],
) -> OracleView {
    let mut active: Vec<OracleSlot> = (0..k)
        .map(|i| OracleSlot {
            id: SlotId(i as u32),
            item: None,
            attrs: BTreeSet::new(),
            cats: BTreeSet::new(),
        })
        .collect();
    let mut next_id = k as u32;
    let mut accepted = BTreeSet::new();
    let mut results = Vec::new();
    let mut recommended = BTreeSet::new();
    let mut rej_a = BTreeSet::new();
    let mut rej_c = BTreeSet::new();
    let mut asked: BTreeSet<(SlotId, Option<AttrId>, Option<CatId>)> = BTreeSet::new();
    let mut last_rewards = None;
    let mut done = false;
    for (n, (action, fb)) in log.iter().enumerate() {
        match (action, fb) {
            (Action::Recommend(p), Feedback::Items(f)) => {
                let mut rw = BTreeMap::new();
                let mut closed = Vec::new();
                for (&s, &i) in p {
                    recommended.insert(i);
                    let acc = f.verdicts[&s] == ItemVerdict::Accept;
                    rw.insert(s, if acc { 1.0 } else { 0.0 });
                    if acc {
                        accepted.insert(i);
                        closed.push(s);
                    }
                }
                let complete = f.satisfied || target.is_some_and(|t| t.to_set() == accepted);
                results.push(if complete {
                    ResultId::BundleSuc
                } else if closed.is_empty() {
                    ResultId::RecFail
                } else {
                    ResultId::RecSuc
                });
                active.retain(|s| !closed.contains(&s.id));
                for _ in &closed {
                    active.push(OracleSlot {
                        id: SlotId(next_id),
                        item: None,
                        attrs: BTreeSet::new(),
                        cats: BTreeSet::new(),
                    });
                    next_id += 1;
                }
                last_rewards = Some(Rewards::Items(rw));
                done = complete;
            }
            (Action::Ask(q), Feedback::Tags(f)) => {
                let mut ra = BTreeMap::new();
                let mut rc = BTreeMap::new();
                let mut any = false;
                for (&s, &(a, c)) in q {
                    asked.insert((s, Some(a), None));
                    asked.insert((s, None, Some(c)));
                    let (va, vc) = f.verdicts[&s];
                    let slot = active.iter_mut().find(|x| x.id == s).unwrap();
                    match va {
                        TagVerdict::Accept => {
                            slot.attrs.insert(a);
                        }
                        TagVerdict::Reject => {
                            rej_a.insert(a);
                        }
                        TagVerdict::Ignore => {}
                    }
                    match vc {
                        TagVerdict::Accept => {
                            slot.cats.insert(c);
                        }
                        TagVerdict::Reject => {
                            rej_c.insert(c);
                        }
                        TagVerdict::Ignore => {}
                    }
                    any |= va == TagVerdict::Accept || vc == TagVerdict::Accept;
                    ra.insert(s, if va == TagVerdict::Accept { 1.0 } else { 0.0 });
                    rc.insert(s, if vc == TagVerdict::Accept { 1.0 } else { 0.0 });
                }
                results.push(if any { ResultId::AskSuc } else { ResultId::AskFail });
                last_rewards = Some(Rewards::Tags { attr: ra, cat: rc });
                done = false;
            }
            _ => panic!("mismatched log entry"),
        }
        if n + 1 >= max_rounds as usize {
            done = true;
        }
    }
    let item_pool = catalog
        .items()
        .filter(|i| !recommended.contains(i))
        .filter(|&i| catalog.attrs_of(i).iter().all(|a| !rej_a.contains(a)))
        .filter(|&i| catalog.cats_of(i).iter().all(|c| !rej_c.contains(c)))
        .collect();
    let attr_pools = active
        .iter()
        .map(|s| {
            let pool = (0..catalog.n_attrs())
                .map(AttrId::from)
                .filter(|a| !rej_a.contains(a) && !asked.contains(&(s.id, Some(*a), None)))
                .collect();
            (s.id, pool)
        })
        .collect();
    let cat_pools = active
        .iter()
        .map(|s| {
            let pool = (0..catalog.n_cats())
                .map(CatId::from)
                .filter(|c| !rej_c.contains(c) && !asked.contains(&(s.id, None, Some(*c))))
                .collect();
            (s.id, pool)
        })
        .collect();
    OracleView {
        active,
        accepted,
        results,
        item_pool,
        attr_pools,
        cat_pools,
        last_rewards,
        done,
    }
}

fn random_action<R: Rng>(env: &Env<'_>, st: &ConversationState, rng: &mut R) -> Option<Action> {
    let (can_rec, can_ask) = env.available_moves(st);
    let rec = match (can_rec, can_ask) {
        (false, false) => return None,
        (true, false) => true,
        (false, true) => false,
        _ => rng.random_bool(0.5),
    };
    if rec {
        let pool = st.pools.item_pool(st.active[0]);
        let picks = rand::seq::index::sample(rng, pool.len(), st.active.len());
        Some(Action::Recommend(st.active.iter().copied().zip(picks.into_iter().map(|j| pool[j])).collect()))
    } else {
        Some(Action::Ask(
            st.active
                .iter()
                .map(|&s| {
                    let a = *st.pools.attr_pool(s).choose(rng).unwrap();
                    let c = *st.pools.cat_pool(s).choose(rng).unwrap();
                    (s, (a, c))
                })
                .collect(),
        ))
    }
}

fn random_feedback<R: Rng>(action: &Action, rng: &mut R) -> Feedback {
    let tag = |rng: &mut R| match rng.random_range(0..3) {
        0 => TagVerdict::Accept,
        1 => TagVerdict::Reject,
        _ => TagVerdict::Ignore,
    };
    match action {
        Action::Recommend(p) => Feedback::Items(ItemFeedback {
            verdicts: p
                .keys()
                .map(|&s| (s, if rng.random_bool(0.3) { ItemVerdict::Accept } else { ItemVerdict::Ignore }))
                .collect(),
            satisfied: rng.random_bool(0.02),
        }),
        Action::Ask(q) => Feedback::Tags(TagFeedback {
            verdicts: q.keys().map(|&s| (s, (tag(rng), tag(rng)))).collect(),
        }),
    }
}

/// Compares the environment against the oracle and checks the structural
/// invariants. Returns the violations found.
fn check_step(
    env: &Env<'_>,
    prev: &ConversationState,
    next: &ConversationState,
    out_rewards: &Rewards,
    out_done: bool,
    view: &OracleView,
    recommended_so_far: &BTreeSet<ItemId>,
) -> Vec<String> {
    let mut v = Vec::new();
    let slot0 = next.active[0];
    let pool: BTreeSet<ItemId> = next.pools.item_pool(slot0).into_iter().collect();
    let prev_pool: BTreeSet<ItemId> = prev.pools.item_pool(prev.active[0]).into_iter().collect();
    if next.active.len() != env.k {
        v.push(format!("active slot count {} != K {}", next.active.len(), env.k));
    }
    if !pool.is_subset(&prev_pool) {
        v.push("item pool grew".into());
    }
    for &s in &next.active {
        if prev.active.contains(&s) {
            let pa: BTreeSet<_> = prev.pools.attr_pool(s).into_iter().collect();
            let na: BTreeSet<_> = next.pools.attr_pool(s).into_iter().collect();
            let pc: BTreeSet<_> = prev.pools.cat_pool(s).into_iter().collect();
            let nc: BTreeSet<_> = next.pools.cat_pool(s).into_iter().collect();
            if !na.is_subset(&pa) || !nc.is_subset(&pc) {
                v.push(format!("tag pool of slot {s} grew"));
            }
        }
        let ip: BTreeSet<ItemId> = next.pools.item_pool(s).into_iter().collect();
        if ip != pool {
            v.push(format!("slot {s} item pool differs from the shared pool"));
        }
        if let Some(i) = recommended_so_far.iter().find(|i| ip.contains(i)) {
            v.push(format!("recommended item {i} still in slot {s}'s pool"));
        }
        for &a in next.pools.rejected_attrs() {
            if next.pools.has_attr(s, a) {
                v.push(format!("rejected attribute {a} in slot {s}'s pool"));
            }
            if let Some(i) = ip.iter().find(|&&i| env.catalog.has_attr(i, a)) {
                v.push(format!("item {i} carries rejected attribute {a}"));
            }
        }
        for &c in next.pools.rejected_cats() {
            if next.pools.has_cat(s, c) {
                v.push(format!("rejected category {c} in slot {s}'s pool"));
            }
            if let Some(i) = ip.iter().find(|&&i| env.catalog.has_cat(i, c)) {
                v.push(format!("item {i} carries rejected category {c}"));
            }
        }
    }
    // oracle equivalence
    if pool != view.item_pool {
        v.push(format!("item pool {:?} != oracle {:?}", pool, view.item_pool));
    }
    let ids: Vec<SlotId> = view.active.iter().map(|s| s.id).collect();
    if next.active != ids {
        v.push(format!("active {:?} != oracle {:?}", next.active, ids));
    } else {
        for os in &view.active {
            let ctx = &next.slots[&os.id];
            if ctx.accepted_item != os.item || ctx.accepted_attrs != os.attrs || ctx.accepted_cats != os.cats {
                v.push(format!("slot {} context differs from oracle", os.id));
            }
            let ap: BTreeSet<_> = next.pools.attr_pool(os.id).into_iter().collect();
            let cp: BTreeSet<_> = next.pools.cat_pool(os.id).into_iter().collect();
            if ap != view.attr_pools[&os.id] || cp != view.cat_pools[&os.id] {
                v.push(format!("slot {} tag pools differ from oracle", os.id));
            }
        }
    }
    if next.accepted != view.accepted {
        v.push("accepted set differs from oracle".into());
    }
    if next.result_log != view.results {
        v.push(format!("result log {:?} != oracle {:?}", next.result_log, view.results));
    }
    if Some(out_rewards) != view.last_rewards.as_ref() {
        v.push("rewards differ from oracle".into());
    }
    if out_done != view.done {
        v.push(format!("done {out_done} != oracle {}", view.done));
    }
    v
}

#[derive(Debug, Default)]
pub struct EnvSuiteReport {
    pub steps: usize,
    pub episodes: usize,
    pub violations: Vec<String>,
}

/// Random conversations on random catalogs of at most `max_items` items.
/// Half use the rule-based simulator with a known target, half use
/// arbitrary feedback.
pub fn env_suite<R: Rng>(rng: &mut R, min_steps: usize, max_items: usize) -> EnvSuiteReport {
    let mut report = EnvSuiteReport::default();
    while report.steps < min_steps {
        run_env_episode(rng, max_items, &mut report);
    }
    report
}

pub fn run_env_episode<R: Rng>(rng: &mut R, max_items: usize, report: &mut EnvSuiteReport) {
    let catalog = random_catalog(rng, max_items);
    let k = rng.random_range(1..=3.min(catalog.n_items()));
    let t = rng.random_range(1..=10u32);
    let env = Env::new(&catalog, k, t).unwrap();
    let history = vec![random_bundle(rng, catalog.n_items(), 3)];
    let use_sim = rng.random_bool(0.5);
    let target = random_bundle(rng, catalog.n_items(), 4);
    let sim = SimulatedUser::new(&catalog, target.clone()).unwrap();
    let mut st = env.init_conversation(UserId(0), &history).unwrap();
    let mut log: Vec<(Action, Feedback)> = Vec::new();
    let mut recommended = BTreeSet::new();
    report.episodes += 1;
    let mut steps = 0u32;
    loop {
        let Some(action) = random_action(&env, &st, rng) else { break };
        let fb = if use_sim { sim.respond(&st, &action) } else { random_feedback(&action, rng) };
        let out = match env.step(&st, &action, &fb, use_sim.then_some(&target)) {
            Ok(o) => o,
            Err(e) => {
                report.violations.push(format!("legal step rejected: {e}"));
                return;
            }
        };
        if let Action::Recommend(p) = &action {
            recommended.extend(p.values().copied());
        }
        log.push((action, fb));
        steps += 1;
        report.steps += 1;
        let view = oracle_view(&catalog, k, t, use_sim.then_some(&target), &log);
        report
            .violations
            .extend(check_step(&env, &st, &out.state, &out.rewards, out.done, &view, &recommended));
        if out.state.round != steps + 1 {
            report.violations.push("round counter out of step".into());
        }
        st = out.state;
        if out.done {
            break;
        }
        if steps > t {
            report.violations.push(format!("conversation exceeded T = {t}"));
            break;
        }
    }
    if steps > t {
        report.violations.push(format!("{steps} rounds played with T = {t}"));
    }
}

// ---------------------------------------------------------------------------
// Simulator oracle written directly from the behaviour rules.

pub fn oracle_feedback(catalog: &Catalog, target: &Bundle, st: &ConversationState, action: &Action) -> Feedback {
    let in_target = |i: ItemId| target.items().contains(&i);
    match action {
        Action::Recommend(p) => {
            let mut taken = st.accepted.clone();
            let verdicts = st
                .active
                .iter()
                .map(|s| {
                    let i = p[s];
                    let v = if in_target(i) && !taken.contains(&i) {
                        taken.insert(i);
                        ItemVerdict::Accept
                    } else {
                        ItemVerdict::Ignore
                    };
                    (*s, v)
                })
                .collect();
            Feedback::Items(ItemFeedback {
                verdicts,
                satisfied: false,
            })
        }
        Action::Ask(q) => {
            let verdicts = q
                .iter()
                .map(|(&s, &(a, c))| {
                    let ctx = &st.slots[&s];
                    let mut potential: Vec<ItemId> = Vec::new();
                    for &i in target.items() {
                        if st.accepted.contains(&i) {
                            continue;
                        }
                        let ok_a = ctx.accepted_attrs.iter().all(|x| catalog.attrs_of(i).contains(x));
                        let ok_c = ctx.accepted_cats.iter().all(|x| catalog.cats_of(i).contains(x));
                        if ok_a && ok_c {
                            potential.push(i);
                        }
                    }
                    let has_a = |i: &ItemId| catalog.attrs_of(*i).contains(&a);
                    let has_c = |i: &ItemId| catalog.cats_of(*i).contains(&c);
                    let va = if potential.iter().any(has_a) {
                        TagVerdict::Accept
                    } else if !target.items().iter().any(has_a) {
                        TagVerdict::Reject
                    } else {
                        TagVerdict::Ignore
                    };
                    if va == TagVerdict::Accept {
                        potential.retain(has_a);
                    }
                    let vc = if potential.iter().any(has_c) {
                        TagVerdict::Accept
                    } else if !target.items().iter().any(has_c) {
                        TagVerdict::Reject
                    } else {
                        TagVerdict::Ignore
                    };
                    (s, (va, vc))
                })
                .collect();
            Feedback::Tags(TagFeedback { verdicts })
        }
    }
}

/// Every single-round action from `st`: all injective item assignments and
/// all (attribute, category) choices per slot.
pub fn all_actions(catalog: &Catalog, st: &ConversationState) -> Vec<Action> {
    let mut out = Vec::new();
    let pool = st.pools.item_pool(st.active[0]);
    let mut cur: Vec<ItemId> = Vec::new();
    fn items(pool: &[ItemId], slots: &[SlotId], cur: &mut Vec<ItemId>, out: &mut Vec<Action>) {
        if cur.len() == slots.len() {
            out.push(Action::Recommend(slots.iter().copied().zip(cur.iter().copied()).collect()));
            return;
        }
        for &i in pool {
            if !cur.contains(&i) {
                cur.push(i);
                items(pool, slots, cur, out);
                cur.pop();
            }
        }
    }
    items(&pool, &st.active, &mut cur, &mut out);
    let per_slot: Vec<Vec<(AttrId, CatId)>> = st
        .active
        .iter()
        .map(|&s| {
            let mut v = Vec::new();
            for a in st.pools.attr_pool(s) {
                for c in st.pools.cat_pool(s) {
                    v.push((a, c));
                }
            }
            v
        })
        .collect();
    if per_slot.iter().all(|v| !v.is_empty()) {
        let mut idx = vec![0usize; per_slot.len()];
        loop {
            out.push(Action::Ask(
                st.active.iter().zip(&idx).zip(&per_slot).map(|((&s, &j), v)| (s, v[j])).collect(),
            ));
            let mut d = 0;
            loop {
                if d == idx.len() {
                    return out;
                }
                idx[d] += 1;
                if idx[d] < per_slot[d].len() {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
        }
    }
    let _ = catalog;
    out
}

#[derive(Debug, Default)]
pub struct SimSuiteReport {
    pub cases: usize,
    pub mismatches: Vec<String>,
}

const MAX_REACHED: usize = 24;

/// Exhaustive comparison on one catalog: every target of size 1..=3, the
/// initial state and a spread of states one accepting round away, every
/// action from each.
pub fn simulator_suite(catalog: &Catalog, k: usize) -> SimSuiteReport {
    let mut report = SimSuiteReport::default();
    let env = Env::new(catalog, k, 10).unwrap();
    let n = catalog.n_items();
    let history = vec![Bundle::new([ItemId(0)]).unwrap()];
    let mut targets = Vec::new();
    for mask in 1u32..(1 << n) {
        if mask.count_ones() <= 3 {
            targets.push(Bundle::new((0..n).filter(|i| mask & (1 << i) != 0).map(ItemId::from)).unwrap());
        }
    }
    let init = env.init_conversation(UserId(0), &history).unwrap();
    for target in &targets {
        let sim = SimulatedUser::new(catalog, target.clone()).unwrap();
        let mut reached = Vec::new();
        for a in all_actions(catalog, &init) {
            let fb = sim.respond(&init, &a);
            let accepted_any = match &fb {
                Feedback::Items(f) => f.verdicts.values().any(|&v| v == ItemVerdict::Accept),
                Feedback::Tags(f) => f.verdicts.values().any(|&(x, y)| x == TagVerdict::Accept || y == TagVerdict::Accept),
            };
            if accepted_any {
                let out = env.step(&init, &a, &fb, Some(target)).unwrap();
                if !out.done {
                    reached.push(out.state);
                }
            }
        }
        // an evenly spaced sample keeps the case count near a million
        let stride = reached.len().div_ceil(MAX_REACHED).max(1);
        let mut states = vec![init.clone()];
        states.extend(reached.into_iter().step_by(stride));
        for st in &states {
            for a in all_actions(catalog, st) {
                report.cases += 1;
                let got = sim.respond(st, &a);
                let want = oracle_feedback(catalog, target, st, &a);
                if got != want {
                    report
                        .mismatches
                        .push(format!("target {:?} action {a:?}: {got:?} != {want:?}", target.items()));
                }
            }
        }
    }
    report
}

/// A fixed 8-item catalog with overlapping tags.
pub fn oracle_catalog() -> Catalog {
    let spec: [(&[u32], &[u32]); 8] = [
        (&[0], &[0, 1]),
        (&[0], &[1]),
        (&[1], &[0, 2]),
        (&[1, 2], &[2]),
        (&[2], &[3]),
        (&[0], &[0, 3]),
        (&[1], &[1, 2]),
        (&[2], &[]),
    ];
    let records = spec
        .iter()
        .enumerate()
        .map(|(i, (c, a))| ItemRecord {
            item: i as u32,
            cats: c.to_vec(),
            attrs: a.to_vec(),
        })
        .collect();
    Catalog::with_vocab(records, Some(4), Some(3)).unwrap()
}

// ---------------------------------------------------------------------------
// Metric oracle: counts over the item universe.

pub fn oracle_metrics(pred: &BTreeSet<ItemId>, target: &Bundle, universe: usize) -> (f64, f64, f64, f64) {
    let (mut inter, mut uni, mut np, mut nt) = (0usize, 0usize, 0usize, 0usize);
    for i in (0..universe).map(ItemId::from) {
        let p = pred.contains(&i);
        let t = target.items().contains(&i);
        inter += usize::from(p && t);
        uni += usize::from(p || t);
        np += usize::from(p);
        nt += usize::from(t);
    }
    let precision = if np == 0 { 0.0 } else { inter as f64 / np as f64 };
    let recall = inter as f64 / nt as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1, inter as f64 / uni as f64)
}

// ---------------------------------------------------------------------------
// Central finite differences on the offline loss.

use bundle_mcr::nn::{Bunt, Hyperparameters, Tape, Vocab};
use bundle_mcr::pretrain::{compute_tag_weights, sample_cloze_instance, offline_loss, ClozeInstance, TagWeights};

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
    /// Entries checked per group with a nonzero analytic gradient.
    pub nonzero_by_group: BTreeMap<String, usize>,
}

/// Denominator floor so entries with both gradients ~0 do not divide by zero.
pub const GRAD_FLOOR: f64 = 1e-7;

fn loss_value(model: &Bunt, inst: &ClozeInstance, w: &TagWeights, labels: &[i8]) -> f64 {
    let mut t = Tape::new(&model.params);
    let l = offline_loss(&mut t, model, inst, w, Some(labels)).unwrap();
    t.scalar(l.loss)
}

/// Checks every entry of every tensor (`max_per_tensor` caps large ones,
/// sampled with a fixed stride).
pub fn gradient_check(seed: u64, max_per_tensor: usize, eps: f64) -> GradReport {
    use rand::SeedableRng;
    let cfg = bundle_mcr::data::SyntheticConfig {
        n_users: 6,
        n_items: 16,
        n_attrs: 6,
        n_cats: 3,
        n_user_types: 2,
        ..Default::default()
    };
    let (catalog, hs) = bundle_mcr::data::generate_synthetic(&cfg, seed).unwrap();
    let hp = Hyperparameters {
        d: 8,
        heads: 2,
        item_layers: 1,
        bundle_layers: 1,
        fusion_layers: 1,
        ..Hyperparameters::default()
    };
    let mut model = Bunt::new(hp.clone(), Vocab::of(&catalog), seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    // resample until attribute and category labels both occur, so every head gets a loss term
    let inst = loop {
        let inst = sample_cloze_instance(&hs[0], &catalog, &hp, &mut rng).unwrap();
        if inst.attr_labels.iter().any(|a| !a.is_empty()) && inst.cat_labels.iter().any(|c| !c.is_empty()) {
            break inst;
        }
    };
    let w = compute_tag_weights(&hs, &catalog).unwrap();
    // both manager classes present so the conversation head is exercised
    let labels: Vec<i8> = (0..inst.k()).map(|r| if r % 2 == 0 { 1 } else { 0 }).collect();

    let grads = {
        let mut t = Tape::new(&model.params);
        let l = offline_loss(&mut t, &model, &inst, &w, Some(&labels)).unwrap();
        t.backward(l.loss)
    };
    let mut report = GradReport::default();
    for id in model.params.ids().collect::<Vec<_>>() {
        let n = model.params.get(id).data.len();
        let stride = n.div_ceil(max_per_tensor).max(1);
        let group = format!("{:?}", model.params.group(id));
        for j in (0..n).step_by(stride) {
            let orig = model.params.get(id).data[j];
            model.params.get_mut(id).data[j] = orig + eps;
            let up = loss_value(&model, &inst, &w, &labels);
            model.params.get_mut(id).data[j] = orig - eps;
            let down = loss_value(&model, &inst, &w, &labels);
            model.params.get_mut(id).data[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g.data[j]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
            report.checked += 1;
            if analytic != 0.0 {
                *report.nonzero_by_group.entry(group.clone()).or_default() += 1;
            }
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = format!("{}[{j}] analytic {analytic:.3e} numeric {numeric:.3e}", model.params.name(id));
            }
        }
    }
    report
}
