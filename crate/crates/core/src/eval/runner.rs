use super::metrics::{bundle_metrics, BundleMetrics};
use crate::data::{Bundle, Catalog, DatasetSplit, Partition};
use crate::env::{Action, ConversationState, Env, Manage, ResultId, RoundRecord};
use crate::error::{Error, Result};
use crate::ids::{AttrId, CatId, ItemId, SlotId};
use crate::simulator::SimulatedUser;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// A conversational recommender under evaluation.
pub trait RecommenderPolicy {
    fn name(&self) -> &str;

    /// Called once before the first round of every conversation.
    fn begin(&mut self, _state: &ConversationState) -> Result<()> {
        Ok(())
    }

    fn decide(&mut self, state: &ConversationState, rng: &mut dyn RngCore) -> Result<Manage>;

    fn recommend(&mut self, state: &ConversationState, rng: &mut dyn RngCore) -> Result<BTreeMap<SlotId, ItemId>>;

    fn ask(&mut self, state: &ConversationState, rng: &mut dyn RngCore) -> Result<BTreeMap<SlotId, (AttrId, CatId)>>;

    /// One round: the manage decision restricted to feasible moves, then
    /// the proposals. `None` when neither move is possible.
    fn act(
        &mut self,
        state: &ConversationState,
        can_recommend: bool,
        can_ask: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Option<Action>> {
        let mode = match (can_recommend, can_ask) {
            (false, false) => return Ok(None),
            (true, false) => Manage::Recommend,
            (false, true) => Manage::Ask,
            (true, true) => self.decide(state, rng)?,
        };
        Ok(Some(match mode {
            Manage::Recommend => Action::Recommend(self.recommend(state, rng)?),
            Manage::Ask => Action::Ask(self.ask(state, rng)?),
        }))
    }
}

/// One finished conversation.
#[derive(Clone, Debug)]
pub struct ConversationOutcome {
    pub state: ConversationState,
    pub records: Vec<RoundRecord>,
    pub metrics: BundleMetrics,
    /// Accuracy of the accepted bundle after each of the `T` rounds.
    pub curve: Vec<f64>,
    pub success: bool,
}

impl ConversationOutcome {
    pub fn rounds(&self) -> usize {
        self.records.len()
    }
}

/// Plays one conversation between `policy` and a simulated user.
pub fn run_conversation(
    env: &Env<'_>,
    policy: &mut dyn RecommenderPolicy,
    user: &SimulatedUser<'_>,
    initial: ConversationState,
    rng: &mut dyn RngCore,
) -> Result<ConversationOutcome> {
    let target = user.target();
    let mut state = initial;
    let mut records = Vec::new();
    let mut curve = Vec::with_capacity(env.max_rounds as usize);
    policy.begin(&state)?;
    let mut done = false;
    while !done {
        let (can_rec, can_ask) = env.available_moves(&state);
        let Some(action) = policy.act(&state, can_rec, can_ask, rng)? else {
            break;
        };
        let feedback = user.respond(&state, &action);
        let round = state.round;
        let out = env.step(&state, &action, &feedback, Some(target))?;
        records.push(RoundRecord::new(round, &action, &feedback, out.result, &out.rewards));
        state = out.state;
        done = out.done;
        curve.push(bundle_metrics(&state.accepted, target)?.accuracy);
    }
    let last = curve.last().copied().unwrap_or(0.0);
    curve.resize(env.max_rounds as usize, last);
    let success = state.result_log.last() == Some(&ResultId::BundleSuc);
    Ok(ConversationOutcome {
        metrics: bundle_metrics(&state.accepted, target)?,
        state,
        records,
        curve,
        success,
    })
}

/// Mean and standard error over seeds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub se: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        if xs.is_empty() {
            return Stat::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let se = if xs.len() < 2 {
            0.0
        } else {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        Stat { mean, se }
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.se)
    }
}

/// Evaluation summary. Means are over users within a seed, then over seeds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub policy: String,
    pub precision: Stat,
    pub recall: Stat,
    pub f1: Stat,
    pub accuracy: Stat,
    /// Cumulative accuracy after rounds `1..=T`.
    pub curve: Vec<f64>,
    pub avg_rounds: f64,
    pub success_rate: f64,
    pub users: usize,
    pub seeds: usize,
}

impl MetricReport {
    /// Table row: `policy  P  R  F1  Acc  rounds`.
    pub fn row(&self) -> String {
        format!(
            "{:<16} P {}  R {}  F1 {}  Acc {}  rounds {:.2}  success {:.3}",
            self.policy, self.precision, self.recall, self.f1, self.accuracy, self.avg_rounds, self.success_rate
        )
    }

    pub fn curve_csv(&self) -> String {
        let mut s = String::from("round,accuracy\n");
        for (t, a) in self.curve.iter().enumerate() {
            s.push_str(&format!("{},{}\n", t + 1, a));
        }
        s
    }
}

/// Per-seed, per-user results folded into a report.
#[derive(Default)]
pub(crate) struct ReportBuilder {
    per_seed: Vec<Vec<(BundleMetrics, Vec<f64>, usize, bool)>>,
}

impl ReportBuilder {
    pub(crate) fn start_seed(&mut self) {
        self.per_seed.push(Vec::new());
    }

    pub(crate) fn push(&mut self, m: BundleMetrics, curve: Vec<f64>, rounds: usize, success: bool) {
        self.per_seed.last_mut().expect("seed started").push((m, curve, rounds, success));
    }

    pub(crate) fn finish(self, policy: &str, max_rounds: usize) -> MetricReport {
        let mut p = Vec::new();
        let mut r = Vec::new();
        let mut f = Vec::new();
        let mut a = Vec::new();
        let mut curve = vec![0.0; max_rounds];
        let mut rounds = 0.0;
        let mut success = 0.0;
        let seeds = self.per_seed.len();
        let users = self.per_seed.first().map_or(0, Vec::len);
        for rows in &self.per_seed {
            let n = rows.len().max(1) as f64;
            p.push(rows.iter().map(|x| x.0.precision).sum::<f64>() / n);
            r.push(rows.iter().map(|x| x.0.recall).sum::<f64>() / n);
            f.push(rows.iter().map(|x| x.0.f1).sum::<f64>() / n);
            a.push(rows.iter().map(|x| x.0.accuracy).sum::<f64>() / n);
            for row in rows {
                for (c, v) in curve.iter_mut().zip(&row.1) {
                    *c += v / n / seeds as f64;
                }
            }
            rounds += rows.iter().map(|x| x.2 as f64).sum::<f64>() / n / seeds as f64;
            success += rows.iter().filter(|x| x.3).count() as f64 / n / seeds as f64;
        }
        MetricReport {
            policy: policy.to_string(),
            precision: Stat::of(&p),
            recall: Stat::of(&r),
            f1: Stat::of(&f),
            accuracy: Stat::of(&a),
            curve,
            avg_rounds: rounds,
            success_rate: success,
            users,
            seeds,
        }
    }
}

/// Users of a partition with their offline history and target.
pub fn partition_users<'s>(split: &'s DatasetSplit, part: Partition) -> Result<Vec<(crate::ids::UserId, &'s [Bundle], &'s Bundle)>> {
    let users: Vec<_> = split
        .users_in(part)
        .into_iter()
        .filter_map(|u| Some((u, split.history(u)?, split.target(u)?)))
        .filter(|(_, h, _)| !h.is_empty())
        .collect();
    if users.is_empty() {
        return Err(Error::Validation(format!("partition {part:?} has no evaluable users")));
    }
    Ok(users)
}

/// One conversation per user of `part`, repeated for every seed.
pub fn evaluate_policy(
    policy: &mut dyn RecommenderPolicy,
    split: &DatasetSplit,
    part: Partition,
    catalog: &Catalog,
    k: usize,
    max_rounds: u32,
    seeds: &[u64],
) -> Result<MetricReport> {
    let env = Env::new(catalog, k, max_rounds)?;
    let users = partition_users(split, part)?;
    let mut builder = ReportBuilder::default();
    for &seed in seeds {
        builder.start_seed();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &(u, history, target) in &users {
            let sim = SimulatedUser::new(catalog, target.clone())?;
            let init = env.init_conversation(u, history)?;
            let out = run_conversation(&env, policy, &sim, init, &mut rng)?;
            builder.push(out.metrics, out.curve.clone(), out.rounds(), out.success);
        }
    }
    Ok(builder.finish(policy.name(), max_rounds as usize))
}
