//! The `bmcr` command line.

use crate::api::{router, spawn_sweeper, AppState};
use crate::config::PipelineConfig;
use crate::session::ServiceData;
use crate::turn::Labels;
use anyhow::{bail, Context};
use bundle_mcr::data::{
    generate_synthetic, load_catalog, load_interactions, load_split, split_leave_one_out, write_catalog,
    write_interactions, write_split, Catalog, DatasetSplit, Partition, UserHistory,
};
use bundle_mcr::env::Env;
use bundle_mcr::eval::{
    evaluate_one_shot, evaluate_policy, partition_users, run_conversation, AskOnlyPolicy, BuntMode, BuntPolicy,
    FmPolicy, FmScorer, FreqPolicy, MetricReport, OraclePolicy, RandomPolicy, RecommenderPolicy,
};
use bundle_mcr::finetune::finetune;
use bundle_mcr::nn::{Bunt, Sampling};
use bundle_mcr::pretrain::pretrain;
use bundle_mcr::simulator::SimulatedUser;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const INTERACTIONS_FILE: &str = "interactions.jsonl";
pub const SPLIT_FILE: &str = "split.jsonl";

#[derive(Debug, Parser)]
#[command(name = "bmcr", version, about = "Conversational bundle recommendation pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// TOML pipeline configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct DataArg {
    /// Directory holding catalog.jsonl, interactions.jsonl and split.jsonl.
    #[arg(long, default_value = ".")]
    pub data: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic catalog and interactions.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Leave-one-out split with a 6:2:2 user partition.
    Split {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Offline cloze pre-training.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Online fine-tuning against the simulator.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Evaluate a policy on a partition and print its metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_enum)]
        policy: EvalPolicy,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Partition,
    },
    /// Print conversation trajectories as JSON lines.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_enum)]
        policy: EvalPolicy,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Partition,
        /// Number of users to simulate.
        #[arg(long, default_value_t = 5)]
        users: usize,
    },
    /// Run the HTTP session service.
    Serve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Checkpoint as `name=path` or `path` (named after the file stem). Repeatable.
        #[arg(long, required = true)]
        ckpt: Vec<String>,
        /// JSON file with display names for items and tags.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Listen address; overrides the config.
        #[arg(long)]
        addr: Option<String>,
        /// Append each session's trajectory to a file in this directory.
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalPolicy {
    BuntLearn,
    BuntAll,
    BuntOneShot,
    Random,
    Freq,
    Oracle,
    AskOnly,
    FmAll,
    FmLearn,
}

impl EvalPolicy {
    fn needs_model(self) -> bool {
        matches!(
            self,
            EvalPolicy::BuntLearn | EvalPolicy::BuntAll | EvalPolicy::BuntOneShot | EvalPolicy::FmLearn
        )
    }

    fn label(self) -> String {
        self.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default()
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { common } => synth(&common),
        Command::Split { common, data } => split(&common, &data.data),
        Command::Pretrain { common, data } => pretrain_cmd(&common, &data.data),
        Command::Finetune { common, data, ckpt } => finetune_cmd(&common, &data.data, &ckpt),
        Command::Eval {
            common,
            data,
            policy,
            ckpt,
            split,
        } => eval_cmd(&common, &data.data, policy, ckpt.as_deref(), split),
        Command::Simulate {
            common,
            data,
            policy,
            ckpt,
            split,
            users,
        } => simulate(&common, &data.data, policy, ckpt.as_deref(), split, users),
        Command::Serve {
            common,
            data,
            ckpt,
            labels,
            addr,
            trajectories,
        } => serve(&common, &data.data, &ckpt, labels.as_deref(), addr, trajectories),
    }
}

fn prepare(common: &Common) -> anyhow::Result<PipelineConfig> {
    let cfg = PipelineConfig::load(common.config.as_deref())?;
    std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(cfg)
}

fn require(path: PathBuf) -> anyhow::Result<PathBuf> {
    if !path.exists() {
        bail!("missing input file {}", path.display());
    }
    Ok(path)
}

fn load_corpus(dir: &Path) -> anyhow::Result<(Catalog, Vec<UserHistory>)> {
    let catalog = load_catalog(require(dir.join(CATALOG_FILE))?)?;
    let inter = load_interactions(require(dir.join(INTERACTIONS_FILE))?, &catalog)?;
    if inter.dropped > 0 {
        log::info!("dropped {} users with fewer than two bundles", inter.dropped);
    }
    Ok((catalog, inter.histories))
}

fn load_all(dir: &Path) -> anyhow::Result<(Catalog, Vec<UserHistory>, DatasetSplit)> {
    let (catalog, hs) = load_corpus(dir)?;
    let split = load_split(require(dir.join(SPLIT_FILE))?, &hs)?;
    Ok((catalog, hs, split))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(common: &Common) -> anyhow::Result<()> {
    let cfg = prepare(common)?;
    let (catalog, hs) = generate_synthetic(&cfg.synthetic, common.seed)?;
    write_catalog(common.out.join(CATALOG_FILE), &catalog)?;
    write_interactions(common.out.join(INTERACTIONS_FILE), &hs)?;
    println!(
        "wrote {} items and {} users to {}",
        catalog.n_items(),
        hs.len(),
        common.out.display()
    );
    Ok(())
}

fn split(common: &Common, data: &Path) -> anyhow::Result<()> {
    prepare(common)?;
    let (_, hs) = load_corpus(data)?;
    let s = split_leave_one_out(&hs, common.seed)?;
    write_split(common.out.join(SPLIT_FILE), &s)?;
    println!(
        "online {} valid {} test {}",
        s.users_in(Partition::Online).len(),
        s.users_in(Partition::Valid).len(),
        s.users_in(Partition::Test).len()
    );
    Ok(())
}

fn pretrain_cmd(common: &Common, data: &Path) -> anyhow::Result<()> {
    let cfg = prepare(common)?;
    let (catalog, _, split) = load_all(data)?;
    let out = pretrain(&split, &catalog, &cfg.model, &cfg.pretrain, common.seed)?;
    out.model.save(common.out.join("pretrained.ckpt"))?;
    write_json(&common.out.join("pretrain_log.json"), &out.log)?;
    let best = out.log.iter().find(|e| e.epoch == out.best_epoch).map_or(0.0, |e| e.valid_f1);
    println!("best epoch {} valid F1 {best:.4}", out.best_epoch);
    Ok(())
}

fn finetune_cmd(common: &Common, data: &Path, ckpt: &Path) -> anyhow::Result<()> {
    let cfg = prepare(common)?;
    let (catalog, _, split) = load_all(data)?;
    let model = Bunt::load(require(ckpt.to_path_buf())?)?;
    let out = finetune(model, &split, &catalog, &cfg.finetune, common.seed)?;
    out.model.save(common.out.join("finetuned.ckpt"))?;
    write_json(&common.out.join("finetune_log.json"), &out.log)?;
    let best = out.log.iter().find(|l| l.episodes == out.best_episodes).map_or(0.0, |l| l.valid_f1);
    println!("best after {} episodes, valid F1 {best:.4}", out.best_episodes);
    Ok(())
}

/// Everything a policy may borrow while it runs.
struct PolicyInputs {
    catalog: Catalog,
    histories: Vec<UserHistory>,
    split: DatasetSplit,
    model: Option<Bunt>,
    fm: Option<FmScorer>,
}

impl PolicyInputs {
    fn load(cfg: &PipelineConfig, data: &Path, policy: EvalPolicy, ckpt: Option<&Path>, seed: u64) -> anyhow::Result<Self> {
        let (catalog, histories, split) = load_all(data)?;
        let model = match (policy.needs_model(), ckpt) {
            (true, None) => bail!("policy {} needs --ckpt", policy.label()),
            (_, Some(p)) => Some(Bunt::load(require(p.to_path_buf())?)?),
            (false, None) => None,
        };
        let fm = if matches!(policy, EvalPolicy::FmAll | EvalPolicy::FmLearn) {
            let n_users = histories.iter().map(|h| h.user.idx() + 1).max().unwrap_or(0);
            let mut fm = FmScorer::new(n_users, &catalog, cfg.fm.dim, seed);
            fm.train(&split.offline_histories(), &catalog, &cfg.fm, seed)?;
            Some(fm)
        } else {
            None
        };
        Ok(PolicyInputs {
            catalog,
            histories,
            split,
            model,
            fm,
        })
    }

    fn k_and_rounds(&self, cfg: &PipelineConfig) -> (usize, u32) {
        match &self.model {
            Some(m) => (m.hp.k, m.hp.max_rounds),
            None => (cfg.model.k, cfg.model.max_rounds),
        }
    }

    fn policy(&self, policy: EvalPolicy) -> anyhow::Result<Box<dyn RecommenderPolicy + '_>> {
        let model = || self.model.as_ref().context("no checkpoint loaded");
        let fm = || self.fm.as_ref().context("factorization machine not trained");
        let _ = &self.histories;
        Ok(match policy {
            EvalPolicy::BuntLearn => Box::new(BuntPolicy::new(model()?, BuntMode::Learn, Sampling::Greedy)),
            EvalPolicy::BuntAll => Box::new(BuntPolicy::new(model()?, BuntMode::All, Sampling::Greedy)),
            EvalPolicy::Random => Box::new(RandomPolicy),
            EvalPolicy::Freq => Box::new(FreqPolicy::new(&self.split.offline_histories())?),
            EvalPolicy::Oracle => Box::new(OraclePolicy::new(&self.split)),
            EvalPolicy::AskOnly => Box::new(AskOnlyPolicy),
            EvalPolicy::FmAll => Box::new(FmPolicy::all(fm()?, &self.catalog)),
            EvalPolicy::FmLearn => Box::new(FmPolicy::learn(
                fm()?,
                &self.catalog,
                BuntPolicy::new(model()?, BuntMode::Learn, Sampling::Greedy),
            )),
            EvalPolicy::BuntOneShot => bail!("one-shot recommendation is not conversational"),
        })
    }
}

fn eval_cmd(common: &Common, data: &Path, policy: EvalPolicy, ckpt: Option<&Path>, part: Partition) -> anyhow::Result<()> {
    let cfg = prepare(common)?;
    let inputs = PolicyInputs::load(&cfg, data, policy, ckpt, common.seed)?;
    let (k, rounds) = inputs.k_and_rounds(&cfg);
    let report: MetricReport = if policy == EvalPolicy::BuntOneShot {
        let m = inputs.model.as_ref().context("no checkpoint loaded")?;
        evaluate_one_shot(m, &inputs.split, part, &inputs.catalog, rounds)?
    } else {
        let mut p = inputs.policy(policy)?;
        evaluate_policy(p.as_mut(), &inputs.split, part, &inputs.catalog, k, rounds, &cfg.eval.seeds)?
    };
    println!("{}", report.row());
    let name = policy.label();
    write_json(&common.out.join(format!("report_{name}.json")), &report)?;
    std::fs::write(common.out.join(format!("curve_{name}.csv")), report.curve_csv())?;
    Ok(())
}

fn simulate(
    common: &Common,
    data: &Path,
    policy: EvalPolicy,
    ckpt: Option<&Path>,
    part: Partition,
    users: usize,
) -> anyhow::Result<()> {
    let cfg = prepare(common)?;
    let inputs = PolicyInputs::load(&cfg, data, policy, ckpt, common.seed)?;
    let (k, rounds) = inputs.k_and_rounds(&cfg);
    let env = Env::new(&inputs.catalog, k, rounds)?;
    let mut p = inputs.policy(policy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
    let path = common.out.join(format!("trajectories_{}.jsonl", policy.label()));
    let mut file = std::io::BufWriter::new(std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    let stdout = std::io::stdout();
    let mut stdout = stdout.lock();
    for (u, history, target) in partition_users(&inputs.split, part)?.into_iter().take(users) {
        let sim = SimulatedUser::new(&inputs.catalog, target.clone())?;
        let out = run_conversation(&env, p.as_mut(), &sim, env.init_conversation(u, history)?, &mut rng)?;
        let line = serde_json::to_string(&serde_json::json!({
            "user": u,
            "target": target,
            "rounds": out.records,
            "accepted": out.state.accepted,
            "metrics": out.metrics,
        }))?;
        writeln!(stdout, "{line}")?;
        writeln!(file, "{line}")?;
    }
    file.flush()?;
    Ok(())
}

/// `name=path`, or a bare path named after its file stem.
fn parse_ckpt_arg(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((name, path)) => (name.to_string(), PathBuf::from(path)),
        None => {
            let p = PathBuf::from(arg);
            let name = p.file_stem().map_or_else(|| arg.to_string(), |s| s.to_string_lossy().into_owned());
            (name, p)
        }
    }
}

/// Service data from a data directory: offline bundles when a split exists,
/// all bundles otherwise.
pub fn service_data(data: &Path, ckpts: &[String], labels: Option<&Path>) -> anyhow::Result<ServiceData> {
    let (catalog, hs) = load_corpus(data)?;
    let split_path = data.join(SPLIT_FILE);
    let histories: BTreeMap<_, _> = if split_path.exists() {
        load_split(&split_path, &hs)?.offline.into_iter().filter(|(_, b)| !b.is_empty()).collect()
    } else {
        hs.into_iter().map(|h| (h.user, h.bundles)).collect()
    };
    let mut checkpoints = BTreeMap::new();
    for arg in ckpts {
        let (name, path) = parse_ckpt_arg(arg);
        let m = Bunt::load(require(path)?)?;
        if checkpoints.insert(name.clone(), m).is_some() {
            bail!("checkpoint name {name} given twice");
        }
    }
    let labels = labels.map(Labels::load).transpose()?.unwrap_or_default();
    ServiceData::new(catalog, histories, checkpoints, labels)
}

fn serve(
    common: &Common,
    data: &Path,
    ckpts: &[String],
    labels: Option<&Path>,
    addr: Option<String>,
    trajectories: Option<PathBuf>,
) -> anyhow::Result<()> {
    let cfg = prepare(common)?;
    let service = service_data(data, ckpts, labels)?;
    if let Some(dir) = &trajectories {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let state = AppState::new(service, Duration::from_secs(cfg.serve.ttl_secs), trajectories);
    let addr = addr.unwrap_or(cfg.serve.addr);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        spawn_sweeper(state.store.clone(), Duration::from_secs(60));
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        log::info!("listening on {addr}");
        println!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
