//! Run configuration: a flat JSON object with dotted keys, overridden by
//! command-line flags, resolved once and echoed to the run directory.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use danmaku_core::models::ModelKind;
use danmaku_core::ranking::Normalization;
use danmaku_core::training::TrainConfig;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

mod text {
    use super::*;

    pub fn serialize<T: Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,

    #[serde(rename = "data.manifest")]
    pub manifest: Option<PathBuf>,
    #[serde(rename = "data.comments")]
    pub comments: Option<PathBuf>,
    #[serde(rename = "data.features")]
    pub features: Option<PathBuf>,
    /// JSON file `{"train": [ids], "dev": [ids], "test": [ids]}`.
    #[serde(rename = "data.splits")]
    pub splits: Option<PathBuf>,
    #[serde(rename = "data.test_videos")]
    pub test_videos: Option<usize>,
    #[serde(rename = "data.dev_videos")]
    pub dev_videos: Option<usize>,
    /// Directory of `<video_id>/<seconds>.png` frames for `ingest`.
    #[serde(rename = "data.frame_images")]
    pub frame_images: Option<PathBuf>,

    #[serde(rename = "model.kind", with = "text")]
    pub kind: ModelKind,
    #[serde(rename = "model.dim")]
    pub dim: usize,
    #[serde(rename = "model.m")]
    pub m: usize,
    #[serde(rename = "model.n")]
    pub n: usize,
    #[serde(rename = "model.heads")]
    pub heads: usize,
    #[serde(rename = "model.layers")]
    pub layers: usize,
    #[serde(rename = "model.dropout")]
    pub dropout: f64,
    #[serde(rename = "model.vocab_size")]
    pub vocab_size: usize,

    #[serde(rename = "train.epochs")]
    pub epochs: usize,
    #[serde(rename = "train.max_steps")]
    pub max_steps: Option<u64>,
    #[serde(rename = "train.batch_size")]
    pub batch_size: usize,
    #[serde(rename = "train.learning_rate")]
    pub learning_rate: f64,
    #[serde(rename = "train.beta1")]
    pub beta1: f64,
    #[serde(rename = "train.beta2")]
    pub beta2: f64,
    #[serde(rename = "train.epsilon")]
    pub epsilon: f64,
    #[serde(rename = "train.clip_norm")]
    pub clip_norm: f64,
    #[serde(rename = "train.eval_every")]
    pub eval_every: u64,
    #[serde(rename = "train.dev_limit")]
    pub dev_limit: Option<usize>,

    #[serde(rename = "rank.norm", with = "text")]
    pub norm: Normalization,
    #[serde(rename = "rank.limit")]
    pub rank_limit: Option<usize>,

    /// Beam width; greedy decoding when unset or 1.
    #[serde(rename = "generate.beam")]
    pub beam: Option<usize>,

    #[serde(rename = "analyze.neighbors")]
    pub neighbors: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            run_dir: PathBuf::from("run"),
            seed: 0,
            checkpoint: None,
            manifest: None,
            comments: None,
            features: None,
            splits: None,
            test_videos: None,
            dev_videos: None,
            frame_images: None,
            kind: ModelKind::UnifiedTransformer,
            dim: 512,
            m: 5,
            n: 5,
            heads: 8,
            layers: 1,
            dropout: 0.0,
            vocab_size: 30_000,
            epochs: t.epochs,
            max_steps: t.max_steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            clip_norm: t.clip_norm,
            eval_every: t.eval_every,
            dev_limit: t.dev_limit,
            norm: Normalization::Sum,
            rank_limit: None,
            beam: None,
            neighbors: 20,
        }
    }
}

impl RunConfig {
    /// Merges the optional config file with `overrides` (flags win) and
    /// checks every key.
    pub fn resolve(file: Option<&Path>, overrides: Map<String, Value>) -> Result<Self> {
        let mut map = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                match serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))? {
                    Value::Object(map) => map,
                    _ => bail!("config {} must be a JSON object", path.display()),
                }
            }
            None => Map::new(),
        };
        map.extend(overrides);
        let config: RunConfig = serde_json::from_value(Value::Object(map)).context("invalid configuration")?;
        config.train_config().validate()?;
        if config.dim == 0 || config.heads == 0 || config.layers == 0 {
            bail!("model.dim, model.heads and model.layers must be positive");
        }
        if config.beam == Some(0) {
            bail!("generate.beam must be at least 1");
        }
        Ok(config)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            max_steps: self.max_steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            clip_norm: self.clip_norm,
            seed: self.seed,
            eval_every: self.eval_every,
            dev_limit: self.dev_limit,
            checkpoint_dir: Some(self.run_dir.join("checkpoints")),
        }
    }

    pub fn require<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        value.as_deref().with_context(|| format!("{key} is not set (use the config file or a flag)"))
    }
}

/// Parses `KEY=VALUE`; the value is read as JSON when possible, else as a string.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (key, value) = s.split_once('=').with_context(|| format!("expected KEY=VALUE, got {s:?}"))?;
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.trim().to_string(), value))
}
