//! Teacher-forced maximum-likelihood training with Adam, periodic dev
//! evaluation, checkpoints and exact resumption.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use danmaku_tensor::{Adam, AdamConfig, Grads, Tape, Tensor, TensorError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Batcher, CommentRef, ContextWindow, CorpusError, CorpusStore, DatasetSplit, Splits, Vocabulary, WindowParams};
use crate::models::{load_bundle, save_bundle, Forward, ModelBundle, ModelError, ModelInput};

/// Instances per gradient worker. Fixed so the summation order, and hence
/// every bit of the result, does not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("split {0} has no instances")]
    EmptySplit(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stops early once this many optimizer steps have run in total.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub eval_every: u64,
    /// Evaluates dev loss on at most this many instances (all when unset).
    pub dev_limit: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 1,
            max_steps: None,
            batch_size: 64,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            clip_norm: 5.0,
            seed: 0,
            eval_every: 500,
            dev_limit: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.epsilon, self.clip_norm];
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 || positive.iter().any(|v| v.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)) {
            return Err(TrainError::Config("epochs, batch_size, eval_every, learning_rate, epsilon and clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    /// Mean NLL per target token over the batch.
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevPoint {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
}

/// One progress line, emitted every `eval_every` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    pub step: u64,
    pub train_nll: f64,
    pub dev_nll: Option<f64>,
    pub tokens_per_sec: f64,
}

impl std::fmt::Display for Progress {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "step {:>7}  train-nll {:.4}  dev-nll ", self.step, self.train_nll)?;
        match self.dev_nll {
            Some(d) => write!(f, "{d:.4}")?,
            None => write!(f, "   -  ")?,
        }
        write!(f, "  tok/s {:.0}", self.tokens_per_sec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub dev: Vec<DevPoint>,
    pub best: Option<DevPoint>,
    pub wall_clock_secs: f64,
    pub parameter_count: usize,
}

/// Model input and target ids for one window.
pub fn prepare_instance(bundle: &ModelBundle, vocab: &Vocabulary, window: &ContextWindow) -> Result<(ModelInput, Vec<u32>)> {
    let input = ModelInput::from_window(window, vocab, bundle.config())?;
    let target = window
        .target
        .as_ref()
        .map(|t| vocab.encode_target(&t.tokens))
        .ok_or_else(|| TrainError::Config("window has no target comment".into()))?;
    Ok((input, target))
}

fn window_params(bundle: &ModelBundle) -> WindowParams {
    WindowParams {
        m: bundle.config().m,
        n: bundle.config().n,
    }
}

/// Summed NLL and token count over `windows`, evaluated in parallel with
/// dropout off. Per-instance terms are added in input order.
fn summed_nll(bundle: &ModelBundle, vocab: &Vocabulary, windows: &[ContextWindow]) -> Result<(f64, usize)> {
    let parts: Vec<(f64, usize)> = windows
        .par_iter()
        .map(|w| {
            let (input, target) = prepare_instance(bundle, vocab, w)?;
            let tape = Tape::new();
            let fx = Forward::eval(&tape, bundle.params());
            let enc = bundle.encode(&fx, &input)?;
            let (nll, count) = bundle.nll(&fx, &enc, &target)?;
            let v = tape.value(nll).item();
            Ok((v, count))
        })
        .collect::<Result<_>>()?;
    Ok(parts.iter().fold((0.0, 0), |(s, c), (v, n)| (s + v, c + n)))
}

/// Mean per-token NLL of a split (optionally its first `limit` instances).
pub fn evaluate_loss(
    bundle: &ModelBundle,
    vocab: &Vocabulary,
    store: &CorpusStore,
    split: &DatasetSplit,
    limit: Option<usize>,
) -> Result<f64> {
    let batcher = Batcher::new(store, split, window_params(bundle), 1, 0)?;
    let refs: Vec<CommentRef> = batcher.instances().iter().take(limit.unwrap_or(usize::MAX)).copied().collect();
    if refs.is_empty() {
        return Err(TrainError::EmptySplit(split.name.to_string()));
    }
    let windows = refs.iter().map(|r| batcher.window(*r)).collect::<std::result::Result<Vec<_>, _>>()?;
    let (sum, count) = summed_nll(bundle, vocab, &windows)?;
    Ok(sum / count as f64)
}

/// Optimizer, model and position in the data stream.
pub struct Trainer<'a> {
    store: &'a CorpusStore,
    splits: &'a Splits,
    config: TrainConfig,
    bundle: ModelBundle,
    vocab: Vocabulary,
    adam: Adam,
    step: u64,
    best: Option<DevPoint>,
}

impl<'a> Trainer<'a> {
    pub fn new(bundle: ModelBundle, vocab: Vocabulary, store: &'a CorpusStore, splits: &'a Splits, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if vocab.len() != bundle.config().vocab_size {
            return Err(TrainError::Config(format!(
                "vocabulary has {} entries, model expects {}",
                vocab.len(),
                bundle.config().vocab_size
            )));
        }
        let adam = Adam::new(config.adam(), bundle.params());
        Ok(Self {
            store,
            splits,
            config,
            bundle,
            vocab,
            adam,
            step: 0,
            best: None,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::save`]. `config`
    /// should match the original run for an identical trajectory.
    pub fn resume(path: &Path, store: &'a CorpusStore, splits: &'a Splits, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let saved = load_bundle(BufReader::new(File::open(path)?))?;
        let vocab = saved
            .vocab
            .ok_or_else(|| TrainError::Checkpoint("checkpoint has no vocabulary".into()))?;
        let state: TrainState = serde_json::from_value(saved.extra.get("train").cloned().unwrap_or_default())
            .map_err(|e| TrainError::Checkpoint(format!("missing training state: {e}")))?;
        let moments = |prefix: &str| -> Result<Vec<Tensor>> {
            saved
                .bundle
                .params()
                .iter()
                .map(|(_, name, t)| {
                    let key = format!("{prefix}{name}");
                    let m = saved
                        .tensors
                        .iter()
                        .find(|(n, _)| *n == key)
                        .map(|(_, m)| m.clone())
                        .ok_or_else(|| TrainError::Checkpoint(format!("missing optimizer state {key}")))?;
                    if m.shape() != t.shape() {
                        return Err(TrainError::Checkpoint(format!("optimizer state {key} has the wrong shape")));
                    }
                    Ok(m)
                })
                .collect()
        };
        let adam = Adam::from_state(config.adam(), moments(FIRST)?, moments(SECOND)?, state.adam_steps);
        Ok(Self {
            store,
            splits,
            config,
            bundle: saved.bundle,
            vocab,
            adam,
            step: state.step,
            best: state.best,
        })
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn into_bundle(self) -> ModelBundle {
        self.bundle
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn batcher(&self) -> Result<Batcher<'a>> {
        Ok(Batcher::new(
            self.store,
            &self.splits.train,
            window_params(&self.bundle),
            self.config.batch_size,
            self.config.seed,
        )?)
    }

    pub fn total_steps(&self) -> Result<u64> {
        let per_epoch = self.batcher()?.batches_per_epoch() as u64;
        let planned = per_epoch * self.config.epochs as u64;
        Ok(self.config.max_steps.map_or(planned, |m| m.min(planned)))
    }

    /// The batch for global step `step`: epoch `step / B`, slot `step % B`
    /// of that epoch's seeded order.
    fn batch_at(&self, batcher: &Batcher, step: u64) -> Result<Vec<ContextWindow>> {
        let per_epoch = batcher.batches_per_epoch() as u64;
        if per_epoch == 0 {
            return Err(TrainError::EmptySplit("train".into()));
        }
        let order = batcher.epoch_order(step / per_epoch);
        let start = (step % per_epoch) as usize * batcher.batch_size();
        let end = (start + batcher.batch_size()).min(order.len());
        Ok(order[start..end].iter().map(|r| batcher.window(*r)).collect::<std::result::Result<_, _>>()?)
    }

    /// One optimizer step on the next batch.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let batcher = self.batcher()?;
        let windows = self.batch_at(&batcher, self.step)?;
        let instances = windows
            .iter()
            .map(|w| prepare_instance(&self.bundle, &self.vocab, w))
            .collect::<Result<Vec<_>>>()?;
        let tokens: usize = instances.iter().map(|(_, y)| y.len() + 1).sum();
        let inv = 1.0 / tokens as f64;
        let step = self.step;
        let bundle = &self.bundle;
        let dropout = bundle.config().dropout;
        let seed = self.config.seed;

        let parts: Vec<(f64, Grads)> = instances
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(chunk, items)| {
                let tape = Tape::new();
                let fx = Forward::train(&tape, bundle.params(), dropout, mix(seed, step, chunk as u64));
                let mut total = None;
                for (input, target) in items {
                    let enc = bundle.encode(&fx, input)?;
                    let (nll, _) = bundle.nll(&fx, &enc, target)?;
                    total = Some(match total {
                        Some(t) => tape.add(t, nll)?,
                        None => nll,
                    });
                }
                let loss = tape.scale(total.expect("chunks are non-empty"), inv)?;
                let value = tape.value(loss).item();
                tape.backward(loss)?;
                Ok((value, tape.param_grads(bundle.params())))
            })
            .collect::<Result<_>>()
            .map_err(|e: TrainError| match e {
                TrainError::Tensor(TensorError::NonFinite { op }) | TrainError::Model(ModelError::Tensor(TensorError::NonFinite { op })) => {
                    TrainError::NonFinite {
                        step,
                        detail: format!("non-finite value produced by {op}"),
                    }
                }
                other => other,
            })?;

        let mut grads = Grads::zeros_like(bundle.params());
        let mut loss = 0.0;
        for (v, g) in &parts {
            loss += v;
            grads.accumulate(g);
        }
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                detail: format!("batch loss {loss}"),
            });
        }
        let grad_norm = grads.clip_global_norm(self.config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                detail: format!("gradient norm {grad_norm}"),
            });
        }
        self.adam.step(self.bundle.params_mut(), &grads)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss,
            grad_norm,
            tokens,
        })
    }

    /// Trains until the planned step count, evaluating and checkpointing every
    /// `eval_every` steps and at the end.
    pub fn run(&mut self, mut progress: impl FnMut(&Progress)) -> Result<TrainReport> {
        let started = Instant::now();
        let total = self.total_steps()?;
        let per_epoch = self.batcher()?.batches_per_epoch() as u64;
        let mut report = TrainReport {
            steps: Vec::new(),
            dev: Vec::new(),
            best: self.best,
            wall_clock_secs: 0.0,
            parameter_count: self.bundle.num_parameters(),
        };
        let mut window_loss = 0.0;
        let mut window_steps = 0u64;
        let mut window_tokens = 0usize;
        let mut window_start = Instant::now();

        while self.step < total {
            let rec = self.train_step()?;
            report.steps.push(rec);
            window_loss += rec.loss;
            window_steps += 1;
            window_tokens += rec.tokens;

            let epoch_end = rec.step % per_epoch == 0;
            if rec.step % self.config.eval_every == 0 || rec.step == total || epoch_end {
                let dev = self.dev_loss()?;
                if let Some(loss) = dev {
                    let point = DevPoint {
                        step: rec.step,
                        epoch: (rec.step - 1) / per_epoch,
                        loss,
                    };
                    report.dev.push(point);
                    if self.best.is_none_or(|b| loss < b.loss) {
                        self.best = Some(point);
                        report.best = self.best;
                        self.checkpoint("best")?;
                    }
                }
                if rec.step % self.config.eval_every == 0 || rec.step == total {
                    let secs = window_start.elapsed().as_secs_f64().max(1e-9);
                    progress(&Progress {
                        step: rec.step,
                        train_nll: window_loss / window_steps.max(1) as f64,
                        dev_nll: dev,
                        tokens_per_sec: window_tokens as f64 / secs,
                    });
                    self.checkpoint(&format!("step_{:07}", rec.step))?;
                    self.checkpoint("last")?;
                    window_loss = 0.0;
                    window_steps = 0;
                    window_tokens = 0;
                    window_start = Instant::now();
                }
            }
        }
        report.wall_clock_secs = started.elapsed().as_secs_f64();
        Ok(report)
    }

    fn dev_loss(&self) -> Result<Option<f64>> {
        let dev = &self.splits.dev;
        if dev.is_empty() || dev.num_comments(self.store)? == 0 {
            return Ok(None);
        }
        evaluate_loss(&self.bundle, &self.vocab, self.store, dev, self.config.dev_limit).map(Some)
    }

    fn checkpoint(&self, tag: &str) -> Result<()> {
        if let Some(dir) = &self.config.checkpoint_dir {
            fs::create_dir_all(dir)?;
            self.save(&dir.join(format!("{tag}.ckpt")))?;
        }
        Ok(())
    }

    /// Writes model, vocabulary, optimizer moments and stream position.
    pub fn save(&self, path: &Path) -> Result<()> {
        let state = TrainState {
            step: self.step,
            adam_steps: self.adam.step_count(),
            best: self.best,
            // The output location is not part of the run's identity.
            config: TrainConfig {
                checkpoint_dir: None,
                ..self.config.clone()
            },
        };
        let extra = serde_json::json!({ "train": state });
        let names: Vec<String> = self.bundle.params().iter().map(|(_, n, _)| n.to_string()).collect();
        let mut tensors: Vec<(String, &Tensor)> = Vec::with_capacity(2 * names.len());
        for (name, m) in names.iter().zip(self.adam.first_moments()) {
            tensors.push((format!("{FIRST}{name}"), m));
        }
        for (name, v) in names.iter().zip(self.adam.second_moments()) {
            tensors.push((format!("{SECOND}{name}"), v));
        }
        let tmp = path.with_extension("tmp");
        {
            let w = BufWriter::new(File::create(&tmp)?);
            save_bundle(w, &self.bundle, Some(&self.vocab), &extra, &tensors)?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

const FIRST: &str = "adam.m/";
const SECOND: &str = "adam.v/";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainState {
    step: u64,
    adam_steps: u64,
    best: Option<DevPoint>,
    config: TrainConfig,
}

/// Seed for the dropout stream of one gradient chunk.
fn mix(seed: u64, step: u64, chunk: u64) -> u64 {
    let mut x = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ chunk.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 33;
    x = x.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    x ^ (x >> 33)
}

/// Builds a trainer and runs it to completion.
pub fn train(
    bundle: ModelBundle,
    vocab: Vocabulary,
    store: &CorpusStore,
    splits: &Splits,
    config: TrainConfig,
    progress: impl FnMut(&Progress),
) -> Result<(ModelBundle, TrainReport)> {
    let mut trainer = Trainer::new(bundle, vocab, store, splits, config)?;
    let report = trainer.run(progress)?;
    Ok((trainer.into_bundle(), report))
}
