use anyhow::Context;
use bundle_mcr::data::SyntheticConfig;
use bundle_mcr::eval::FmConfig;
use bundle_mcr::finetune::FinetuneConfig;
use bundle_mcr::nn::Hyperparameters;
use bundle_mcr::pretrain::PretrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Everything the pipeline reads from `--config`. Missing sections take
/// their defaults, so an empty file is a valid config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub synthetic: SyntheticConfig,
    pub model: Hyperparameters,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub fm: FmConfig,
    pub eval: EvalConfig,
    pub serve: ServeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Conversation seeds; metrics are averaged over them.
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { seeds: vec![0, 1, 2] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub addr: String,
    pub ttl_secs: u64,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            addr: "127.0.0.1:8080".into(),
            ttl_secs: 30 * 60,
        }
    }
}

impl PipelineConfig {
    /// Reads a TOML file, or returns the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(PipelineConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
