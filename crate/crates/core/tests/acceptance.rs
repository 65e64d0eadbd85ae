//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on failure.
//!
//! `cargo test -p bundle-mcr --test acceptance` (several minutes; the dev
//! profile is optimised).

mod common;

use bundle_mcr::data::{generate_synthetic, split_leave_one_out, Catalog, DatasetSplit, Partition, SyntheticConfig};
use bundle_mcr::env::Env;
use bundle_mcr::eval::{
    bundle_metrics, evaluate_one_shot, evaluate_policy, partition_users, run_conversation, AskOnlyPolicy, BuntMode,
    BuntPolicy, FmConfig, FmPolicy, FmScorer, FreqPolicy, MetricReport, OraclePolicy, RandomPolicy, RecommenderPolicy,
};
use bundle_mcr::finetune::{finetune, manager_bandit, manager_prob, FinetuneConfig};
use bundle_mcr::nn::{Bunt, Hyperparameters, Sampling, Vocab};
use bundle_mcr::pretrain::{pretrain, PretrainConfig};
use bundle_mcr::simulator::SimulatedUser;
use bundle_mcr::ItemId;
use common::{env_suite, gradient_check, oracle_catalog, oracle_metrics, random_bundle, random_catalog, simulator_suite};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::time::Instant;

type Outcome = (bool, String);

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("gradient suite", gradients),
        ("environment invariants", environment),
        ("simulator oracle", simulator),
        ("metric oracle", metrics),
        ("memorization", memorization),
        ("ordering", ordering),
        ("rl sanity", rl_sanity),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let t0 = Instant::now();
        let (ok, detail) = run();
        failed += usize::from(!ok);
        println!("{} {name}: {detail} [{:.1?}]", if ok { "PASS" } else { "FAIL" }, t0.elapsed());
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let r = gradient_check(0, usize::MAX, 1e-3);
    let groups = ["Backbone", "Manage", "Item", "Attr", "Cat"];
    let missing: Vec<&str> = groups.iter().copied().filter(|g| !r.nonzero_by_group.contains_key(*g)).collect();
    // other instances at a smaller step, where ReLU kinks rarely fall inside the stencil
    let others = (1..5).map(|s| gradient_check(s, 256, 1e-4).max_rel).fold(0.0, f64::max);
    let fast = t0.elapsed().as_secs() < 120;
    (
        r.max_rel <= 1e-4 && others <= 1e-4 && missing.is_empty() && fast,
        format!(
            "{} entries, max rel err {:.2e} (eps 1e-3), other instances {:.2e} (eps 1e-4), groups without gradient {:?}",
            r.checked, r.max_rel, others, missing
        ),
    )
}

fn environment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let r = env_suite(&mut rng, 10_000, 10);
    let first = r.violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default();
    (
        r.steps >= 10_000 && r.violations.is_empty(),
        format!("{} steps over {} episodes, {} violations{first}", r.steps, r.episodes, r.violations.len()),
    )
}

fn simulator() -> Outcome {
    let mut cases = 0;
    let mut mismatches = Vec::new();
    let fixed = oracle_catalog();
    for k in 1..=2 {
        let r = simulator_suite(&fixed, k);
        cases += r.cases;
        mismatches.extend(r.mismatches);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..6 {
        let r = simulator_suite(&random_catalog(&mut rng, 8), 1);
        cases += r.cases;
        mismatches.extend(r.mismatches);
    }
    (mismatches.is_empty(), format!("{cases} cases, {} mismatches", mismatches.len()))
}

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut wrong = 0;
    for _ in 0..1000 {
        let target = random_bundle(&mut rng, 12, 6);
        let pred: BTreeSet<ItemId> = (0..12u32).filter(|_| rng.random_bool(0.3)).map(ItemId).collect();
        let m = bundle_metrics(&pred, &target).unwrap();
        if (m.precision, m.recall, m.f1, m.accuracy) != oracle_metrics(&pred, &target, 12) {
            wrong += 1;
        }
    }
    let b = bench(1);
    let (convs, decreasing) = curves_monotone(&b);
    (
        wrong == 0 && decreasing.is_empty(),
        format!("1000 pairs, {wrong} mismatches; {convs} conversation curves, non-monotone policies {decreasing:?}"),
    )
}

/// Checks every per-conversation accuracy curve of every policy on TEST.
fn curves_monotone(b: &Bench) -> (usize, Vec<String>) {
    let hp = &b.pretrained.hp;
    let env = Env::new(&b.catalog, hp.k, hp.max_rounds).unwrap();
    let hist = b.split.offline_histories();
    let mut fm = FmScorer::new(b.n_users, &b.catalog, FmConfig::default().dim, 1);
    fm.train(&hist, &b.catalog, &FmConfig::default(), 1).unwrap();
    let mut policies: Vec<Box<dyn RecommenderPolicy + '_>> = vec![
        Box::new(RandomPolicy),
        Box::new(FreqPolicy::new(&hist).unwrap()),
        Box::new(OraclePolicy::new(&b.split)),
        Box::new(AskOnlyPolicy),
        Box::new(BuntPolicy::new(&b.finetuned, BuntMode::Learn, Sampling::Greedy)),
        Box::new(BuntPolicy::new(&b.finetuned, BuntMode::All, Sampling::Greedy)),
        Box::new(BuntPolicy::new(&b.finetuned, BuntMode::Learn, Sampling::Sample)),
        Box::new(FmPolicy::all(&fm, &b.catalog)),
        Box::new(FmPolicy::learn(&fm, &b.catalog, BuntPolicy::new(&b.finetuned, BuntMode::Learn, Sampling::Greedy))),
    ];
    let users = partition_users(&b.split, Partition::Test).unwrap();
    let mut n = 0;
    let mut bad = BTreeSet::new();
    for p in policies.iter_mut() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(u, h, t) in &users {
            let sim = SimulatedUser::new(&b.catalog, t.clone()).unwrap();
            let out = run_conversation(&env, p.as_mut(), &sim, env.init_conversation(u, h).unwrap(), &mut rng).unwrap();
            n += 1;
            if out.curve.windows(2).any(|w| w[1] < w[0]) {
                bad.insert(p.name().to_string());
            }
        }
    }
    // one-shot emits its bundle once, so its curve is flat by construction
    let one = evaluate_one_shot(&b.pretrained, &b.split, Partition::Test, &b.catalog, hp.max_rounds).unwrap();
    if one.curve.windows(2).any(|w| w[1] < w[0]) {
        bad.insert(one.policy);
    }
    (n, bad.into_iter().collect())
}

fn memorization() -> Outcome {
    let t0 = Instant::now();
    let (catalog, hs) = generate_synthetic(&SyntheticConfig::default(), 7).unwrap();
    let split = split_leave_one_out(&hs, 7).unwrap();
    let cfg = PretrainConfig {
        epochs: 200,
        patience: None,
        track_train_accuracy: true,
        stop_at_train_accuracy: Some(0.9),
        ..PretrainConfig::default()
    };
    let out = pretrain(&split, &catalog, &Hyperparameters::default(), &cfg, 7).unwrap();
    let accs: Vec<f64> = out.log.iter().filter_map(|e| e.train_accuracy).collect();
    let reached = accs.iter().position(|&a| a >= 0.9);
    let best = accs.iter().copied().fold(0.0, f64::max);
    let secs = t0.elapsed().as_secs();
    (
        reached.is_some() && secs < 600,
        format!("train top-1 {best:.3}, first >= 0.9 at epoch {:?}, {secs}s", reached.map(|e| e + 1)),
    )
}

struct Bench {
    catalog: Catalog,
    split: DatasetSplit,
    n_users: usize,
    pretrained: Bunt,
    finetuned: Bunt,
    no_pretrain: Bunt,
}

thread_local! {
    static BENCH: std::cell::RefCell<std::collections::BTreeMap<u64, std::rc::Rc<Bench>>> = Default::default();
}

/// Benchmark corpus for `seed`: pretrain, fine-tune, and fine-tune a fresh model.
fn bench(seed: u64) -> std::rc::Rc<Bench> {
    if let Some(b) = BENCH.with(|c| c.borrow().get(&seed).cloned()) {
        return b;
    }
    let (catalog, hs) = generate_synthetic(&SyntheticConfig::benchmark(), seed).unwrap();
    let split = split_leave_one_out(&hs, seed).unwrap();
    let hp = Hyperparameters::default();
    let pt = pretrain(&split, &catalog, &hp, &PretrainConfig::default(), seed).unwrap();
    let fc = FinetuneConfig::default();
    let ft = finetune(pt.model.clone(), &split, &catalog, &fc, seed).unwrap();
    let fresh = Bunt::new(hp, Vocab::of(&catalog), seed).unwrap();
    let ft0 = finetune(fresh, &split, &catalog, &fc, seed).unwrap();
    let b = std::rc::Rc::new(Bench {
        n_users: hs.len(),
        catalog,
        split,
        pretrained: pt.model,
        finetuned: ft.model,
        no_pretrain: ft0.model,
    });
    BENCH.with(|c| c.borrow_mut().insert(seed, b.clone()));
    b
}

fn test_f1(b: &Bench, policy: &mut dyn RecommenderPolicy, seed: u64) -> f64 {
    let hp = &b.pretrained.hp;
    evaluate_policy(policy, &b.split, Partition::Test, &b.catalog, hp.k, hp.max_rounds, &[seed]).unwrap().f1.mean
}

fn ordering() -> Outcome {
    let seeds = [1u64, 2, 3];
    let (mut learn, mut all, mut random, mut one, mut nopt) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let n = seeds.len() as f64;
    for &s in &seeds {
        let b = bench(s);
        learn += test_f1(&b, &mut BuntPolicy::new(&b.finetuned, BuntMode::Learn, Sampling::Greedy), s) / n;
        all += test_f1(&b, &mut BuntPolicy::new(&b.finetuned, BuntMode::All, Sampling::Greedy), s) / n;
        random += test_f1(&b, &mut RandomPolicy, s) / n;
        nopt += test_f1(&b, &mut BuntPolicy::new(&b.no_pretrain, BuntMode::Learn, Sampling::Greedy), s) / n;
        let hp = &b.pretrained.hp;
        one += evaluate_one_shot(&b.pretrained, &b.split, Partition::Test, &b.catalog, hp.max_rounds).unwrap().f1.mean / n;
    }
    let ok = learn >= all && all >= random && learn > one && learn >= 5.0 * nopt;
    (
        ok,
        format!(
            "TEST F1 over seeds 1-3: learn {learn:.3} all {all:.3} random {random:.3} one-shot {one:.3} w/o pretraining {nopt:.3} (ratio {:.1})",
            learn / nopt.max(1e-12)
        ),
    )
}

fn rl_sanity() -> Outcome {
    let (catalog, hs) = generate_synthetic(&SyntheticConfig::default(), 11).unwrap();
    let split = split_leave_one_out(&hs, 11).unwrap();
    let hp = Hyperparameters::default();
    let model = Bunt::new(hp.clone(), Vocab::of(&catalog), 11).unwrap();
    let env = Env::new(&catalog, hp.k, hp.max_rounds).unwrap();
    let (u, h, _) = partition_users(&split, Partition::Online).unwrap()[0];
    let st = env.init_conversation(u, h).unwrap();
    let enc = model.encode_state(&st, None).unwrap();
    let rows = enc.rows(&st.active).unwrap();
    let mut steps = Vec::new();
    for rewarding in [0, 1] {
        let mut m = model.clone();
        let run = manager_bandit(&mut m, &rows, &enc.result_vec, rewarding, 5000, 0.9, &FinetuneConfig::default(), 3)
            .unwrap();
        steps.push((rewarding, run.steps, manager_prob(&m, &rows, &enc.result_vec, rewarding)));
    }
    let bandit_ok = steps.iter().all(|s| s.1.is_some());

    let frozen_cfg = FinetuneConfig {
        agents: Vec::new(),
        episodes: 200,
        ..FinetuneConfig::default()
    };
    let frozen = finetune(model.clone(), &split, &catalog, &frozen_cfg, 11).unwrap().model;
    let report = |m: &Bunt| -> MetricReport {
        let mut p = BuntPolicy::new(m, BuntMode::Learn, Sampling::Greedy);
        evaluate_policy(&mut p, &split, Partition::Test, &catalog, hp.k, hp.max_rounds, &[0, 1]).unwrap()
    };
    let identical = report(&model) == report(&frozen);
    let desc: Vec<String> = steps
        .iter()
        .map(|(a, s, p)| format!("action {a}: {} (p {p:.3})", s.map_or("not reached".into(), |s| format!("{s} steps"))))
        .collect();
    (bandit_ok && identical, format!("bandit {}; frozen fine-tuning identical metrics: {identical}", desc.join(", ")))
}

fn determinism() -> Outcome {
    let cfg = SyntheticConfig {
        n_users: 40,
        ..SyntheticConfig::default()
    };
    let hp = Hyperparameters {
        d: 16,
        ..Hyperparameters::default()
    };
    let run = || {
        let (catalog, hs) = generate_synthetic(&cfg, 5).unwrap();
        let split = split_leave_one_out(&hs, 5).unwrap();
        let pc = PretrainConfig {
            epochs: 10,
            ..PretrainConfig::default()
        };
        let pt = pretrain(&split, &catalog, &hp, &pc, 5).unwrap();
        let fc = FinetuneConfig {
            episodes: 200,
            eval_every: 100,
            ..FinetuneConfig::default()
        };
        let ft = finetune(pt.model.clone(), &split, &catalog, &fc, 5).unwrap();
        let mut p = BuntPolicy::new(&ft.model, BuntMode::Learn, Sampling::Sample);
        let rep = evaluate_policy(&mut p, &split, Partition::Test, &catalog, hp.k, hp.max_rounds, &[0, 1]).unwrap();
        let params: Vec<Vec<f64>> = ft.model.params.ids().map(|id| ft.model.params.get(id).data.clone()).collect();
        (
            serde_json::to_string(&pt.log).unwrap(),
            serde_json::to_string(&ft.log).unwrap(),
            params,
            rep,
        )
    };
    let (a, b) = (run(), run());
    let same = [a.0 == b.0, a.1 == b.1, a.2 == b.2, a.3 == b.3];
    (
        same.iter().all(|&x| x),
        format!("pretrain log, fine-tune log, parameters, sampled evaluation identical: {same:?}"),
    )
}
