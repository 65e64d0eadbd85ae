use super::buffer::{Agent, Buffers, StateRepr, TransitionRecord};
use super::collect::collect_episode;
use super::ppo::{ppo_update, PpoConfig, PpoStats};
use crate::data::{Catalog, DatasetSplit, Partition};
use crate::env::{Env, RewardMetric};
use crate::error::{Error, Result};
use crate::eval::{evaluate_policy, partition_users, BuntMode, BuntPolicy, MetricReport};
use crate::nn::{Adam, Bunt, Matrix, Sampling, Tape};
use crate::simulator::SimulatedUser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub episodes: usize,
    /// Episodes between VALID evaluations.
    pub eval_every: usize,
    /// An agent is updated once its buffer holds this many transitions.
    pub buffer_threshold: usize,
    pub ppo: PpoConfig,
    /// Agents whose heads are updated; the others stay frozen.
    pub agents: Vec<Agent>,
    pub reward_metric: RewardMetric,
    pub valid_seeds: Vec<u64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            episodes: 2000,
            eval_every: 200,
            buffer_threshold: 512,
            ppo: PpoConfig::default(),
            agents: Agent::ALL.to_vec(),
            reward_metric: RewardMetric::F1,
            valid_seeds: vec![0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub episodes: usize,
    pub valid_f1: f64,
    pub valid_acc: f64,
    pub avg_rounds: f64,
    /// Mean conversation-level reward of the training episodes since the last entry.
    pub train_reward: f64,
    pub updates: BTreeMap<Agent, PpoStats>,
}

pub struct FinetuneOutcome {
    /// Parameters with the best VALID F1 (the input model if nothing improved).
    pub model: Bunt,
    pub best_episodes: usize,
    pub log: Vec<FinetuneLog>,
}

const COLLECT_STREAM: u64 = 0x5050_4f43;
const UPDATE_STREAM: u64 = 0x5050_4f55;

fn validate(model: &Bunt, split: &DatasetSplit, catalog: &Catalog, cfg: &FinetuneConfig) -> Result<MetricReport> {
    let mut policy = BuntPolicy::new(model, BuntMode::Learn, Sampling::Greedy);
    evaluate_policy(&mut policy, split, Partition::Valid, catalog, model.hp.k, model.hp.max_rounds, &cfg.valid_seeds)
}

/// Online fine-tuning against simulated ONLINE users.
pub fn finetune(
    model: Bunt,
    split: &DatasetSplit,
    catalog: &Catalog,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    if cfg.buffer_threshold == 0 || cfg.eval_every == 0 {
        return Err(Error::Config("buffer_threshold and eval_every must be positive".into()));
    }
    let mut model = model;
    let env = Env::new(catalog, model.hp.k, model.hp.max_rounds)?;
    let users = partition_users(split, Partition::Online)?;
    let mut collect_rng = ChaCha8Rng::seed_from_u64(seed ^ COLLECT_STREAM);
    let mut update_rng = ChaCha8Rng::seed_from_u64(seed ^ UPDATE_STREAM);
    let mut adams: BTreeMap<Agent, Adam> = cfg.agents.iter().map(|&a| (a, Adam::new(cfg.ppo.lr))).collect();

    let first = validate(&model, split, catalog, cfg)?;
    let mut best_f1 = first.f1.mean;
    let mut best = model.clone();
    let mut best_episodes = 0;
    let mut log = vec![FinetuneLog {
        episodes: 0,
        valid_f1: first.f1.mean,
        valid_acc: first.accuracy.mean,
        avg_rounds: first.avg_rounds,
        train_reward: 0.0,
        updates: BTreeMap::new(),
    }];
    if cfg.agents.is_empty() {
        return Ok(FinetuneOutcome {
            model,
            best_episodes,
            log,
        });
    }

    let mut buffers = Buffers::default();
    let mut reward_sum = 0.0;
    let mut reward_n = 0usize;
    let mut updates = BTreeMap::new();
    for ep in 1..=cfg.episodes {
        let (u, history, target) = users[collect_rng.random_range(0..users.len())];
        let sim = SimulatedUser::new(catalog, target.clone())?;
        let init = env.init_conversation(u, history)?;
        let episode = collect_episode(&model, &env, &sim, init, cfg.reward_metric, &mut collect_rng)?;
        reward_sum += episode.final_reward;
        reward_n += 1;
        buffers.append(episode.buffers);
        for a in Agent::ALL {
            let Some(adam) = adams.get_mut(&a) else {
                buffers.get_mut(a).clear();
                continue;
            };
            if buffers.get(a).len() >= cfg.buffer_threshold {
                let records = std::mem::take(buffers.get_mut(a));
                let stats = ppo_update(&mut model, a, &records, &cfg.ppo, adam, &mut update_rng)?;
                updates.insert(a, stats);
            }
        }
        if ep % cfg.eval_every == 0 || ep == cfg.episodes {
            let r = validate(&model, split, catalog, cfg)?;
            log::info!("finetune episode {ep}: valid F1 {:.4}", r.f1.mean);
            log.push(FinetuneLog {
                episodes: ep,
                valid_f1: r.f1.mean,
                valid_acc: r.accuracy.mean,
                avg_rounds: r.avg_rounds,
                train_reward: reward_sum / reward_n.max(1) as f64,
                updates: std::mem::take(&mut updates),
            });
            reward_sum = 0.0;
            reward_n = 0;
            if r.f1.mean > best_f1 {
                best_f1 = r.f1.mean;
                best = model.clone();
                best_episodes = ep;
            }
        }
    }
    Ok(FinetuneOutcome {
        model: best,
        best_episodes,
        log,
    })
}

/// Outcome of the manager bandit check.
#[derive(Clone, Debug, PartialEq)]
pub struct BanditRun {
    /// Steps taken until the rewarding action reached the target probability.
    pub steps: Option<usize>,
    pub final_prob: f64,
}

/// Probability that the manager assigns to `action` in a fixed state.
pub fn manager_prob(model: &Bunt, rows: &Matrix, result: &Matrix, action: usize) -> f64 {
    let mut t = Tape::new(&model.params);
    let r = t.constant(rows.clone());
    let res = t.constant(result.clone());
    let (pm, _) = model.manage_probs(&mut t, res, r);
    let p = model.aggregate_manage(&mut t, pm);
    t.value(p).data[action]
}

/// One-state, two-action bandit: the manager sees a fixed state, action
/// `rewarding` pays 1 and the other 0. Each step is a one-step episode.
pub fn manager_bandit(
    model: &mut Bunt,
    rows: &Matrix,
    result: &Matrix,
    rewarding: usize,
    max_steps: usize,
    target: f64,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<BanditRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(cfg.ppo.lr);
    let mut buf: Vec<TransitionRecord> = Vec::new();
    let mut p = manager_prob(model, rows, result, rewarding);
    for step in 1..=max_steps {
        let p_rec = manager_prob(model, rows, result, 0);
        let action = if rng.random::<f64>() < p_rec { 0 } else { 1 };
        let prob = if action == 0 { p_rec } else { 1.0 - p_rec };
        let value = {
            let mut t = Tape::new(&model.params);
            let r = t.constant(rows.clone());
            let res = t.constant(result.clone());
            let v = model.manage_value(&mut t, res, r);
            t.scalar(v)
        };
        buf.push(TransitionRecord {
            state: StateRepr::Manager {
                rows: rows.clone(),
                result: result.clone(),
            },
            next_state: None,
            mask: Vec::new(),
            action,
            reward: if action == rewarding { 1.0 } else { 0.0 },
            logp: prob.ln(),
            value,
            done: true,
        });
        if buf.len() >= cfg.buffer_threshold {
            ppo_update(model, Agent::Manage, &buf, &cfg.ppo, &mut adam, &mut rng)?;
            buf.clear();
            p = manager_prob(model, rows, result, rewarding);
            if p >= target {
                return Ok(BanditRun {
                    steps: Some(step),
                    final_prob: p,
                });
            }
        }
    }
    Ok(BanditRun { steps: None, final_prob: p })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split_leave_one_out, SyntheticConfig};
    use crate::nn::{Hyperparameters, ParamGroup, Vocab};

    fn setup() -> (Catalog, DatasetSplit, Bunt) {
        let cfg = SyntheticConfig {
            n_users: 20,
            n_items: 40,
            n_cats: 4,
            n_user_types: 2,
            ..SyntheticConfig::default()
        };
        let (c, hs) = generate_synthetic(&cfg, 3).unwrap();
        let split = split_leave_one_out(&hs, 3).unwrap();
        let hp = Hyperparameters {
            d: 8,
            ..Hyperparameters::default()
        };
        let m = Bunt::new(hp, Vocab::of(&c), 3).unwrap();
        (c, split, m)
    }

    fn small_cfg(agents: Vec<Agent>) -> FinetuneConfig {
        FinetuneConfig {
            episodes: 30,
            eval_every: 15,
            buffer_threshold: 32,
            agents,
            ..FinetuneConfig::default()
        }
    }

    #[test]
    fn frozen_finetune_is_identity() {
        let (c, split, m) = setup();
        let out = finetune(m.clone(), &split, &c, &small_cfg(vec![]), 1).unwrap();
        for id in m.params.ids() {
            assert_eq!(m.params.get(id), out.model.params.get(id));
        }
    }

    #[test]
    fn only_item_head_moves() {
        let (c, split, m) = setup();
        let cfg = small_cfg(vec![Agent::Item]);
        let mut moved = m.clone();
        let env = Env::new(&c, m.hp.k, m.hp.max_rounds).unwrap();
        let (u, h, t) = partition_users(&split, Partition::Online).unwrap()[0];
        let sim = SimulatedUser::new(&c, t.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = collect_episode(&m, &env, &sim, env.init_conversation(u, h).unwrap(), cfg.reward_metric, &mut rng)
            .unwrap();
        assert!(!ep.buffers.item.is_empty());
        let mut adam = Adam::new(1e-2);
        super::ppo_update(&mut moved, Agent::Item, &ep.buffers.item, &cfg.ppo, &mut adam, &mut rng).unwrap();
        for id in m.params.ids() {
            let same = m.params.get(id) == moved.params.get(id);
            if m.params.group(id) != ParamGroup::Item {
                assert!(same, "{} changed", m.params.name(id));
            }
        }
        assert!(m.params.ids().any(|id| m.params.get(id) != moved.params.get(id)));
    }

    #[test]
    fn episode_records_are_consistent() {
        let (c, split, m) = setup();
        let env = Env::new(&c, m.hp.k, m.hp.max_rounds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (u, h, t) in partition_users(&split, Partition::Online).unwrap() {
            let sim = SimulatedUser::new(&c, t.clone()).unwrap();
            let ep = collect_episode(&m, &env, &sim, env.init_conversation(u, h).unwrap(), RewardMetric::F1, &mut rng)
                .unwrap();
            assert!(ep.records.len() <= 10);
            assert_eq!(ep.buffers.manage.len(), ep.records.len());
            let item_reward: f64 = ep.buffers.item.iter().map(|r| r.reward).sum();
            assert_eq!(item_reward as usize, ep.state.accepted.len());
            for a in Agent::ALL {
                for r in ep.buffers.get(a) {
                    assert!(r.logp.is_finite() && r.logp <= 0.0);
                    assert!((0.0..=1.0).contains(&r.reward));
                    if a != Agent::Manage {
                        assert!(r.mask[r.action]);
                    }
                }
            }
            if let Some(last) = ep.buffers.manage.last() {
                assert_eq!(last.reward, ep.final_reward);
            }
        }
    }

    #[test]
    fn bandit_reaches_target() {
        let (c, split, mut m) = setup();
        let env = Env::new(&c, m.hp.k, m.hp.max_rounds).unwrap();
        let (u, h, _) = partition_users(&split, Partition::Online).unwrap()[0];
        let st = env.init_conversation(u, h).unwrap();
        let enc = m.encode_state(&st, None).unwrap();
        let rows = enc.rows(&st.active).unwrap();
        let worse = if manager_prob(&m, &rows, &enc.result_vec, 0) < 0.5 { 0 } else { 1 };
        let run = manager_bandit(&mut m, &rows, &enc.result_vec, worse, 5000, 0.9, &FinetuneConfig::default(), 1).unwrap();
        assert!(run.steps.is_some(), "{run:?}");
    }

    #[test]
    fn finetune_is_deterministic() {
        let (c, split, m) = setup();
        let cfg = small_cfg(Agent::ALL.to_vec());
        let a = finetune(m.clone(), &split, &c, &cfg, 9).unwrap();
        let b = finetune(m, &split, &c, &cfg, 9).unwrap();
        assert_eq!(a.log, b.log);
        for id in a.model.params.ids() {
            assert_eq!(a.model.params.get(id), b.model.params.get(id));
        }
    }
}
