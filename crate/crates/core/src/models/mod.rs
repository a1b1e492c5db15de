//! Comment generators: the hierarchical LSTM model, the stacked-attention
//! transformer and the three sequence-to-sequence baselines. All five share
//! one token embedding and one bias-free output projection.

mod config;
mod generate;
mod persist;
mod rnn;
mod transformer;

use std::cell::RefCell;

use danmaku_tensor::nn::Linear;
use danmaku_tensor::params::xavier_uniform;
use danmaku_tensor::{log_softmax, ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{ContextWindow, Vocabulary, BOS, EOS, MAX_TARGET_LEN};

pub use config::{ModelConfig, ModelKind};
pub use generate::{beam_search, generate, greedy, BundleDecoder, DecodeMode, StepModel};
pub use persist::{load_bundle, save_bundle, SavedModel};
pub use rnn::{encode_frames, fusional_encode_comments, fusional_encode_video, CommentEncoding};
pub use transformer::{concat_comments, tx_encode_text, tx_encode_video};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("dim mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence to score is empty")]
    EmptySequence,
    #[error("{what} of length {len} exceeds the maximum {max}")]
    TooLong { what: &'static str, len: usize, max: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// A forward pass: the tape being recorded, the parameters read from, and the
/// dropout source when training.
pub struct Forward<'a> {
    pub tape: &'a Tape,
    pub params: &'a ParamStore,
    dropout: Option<(f64, RefCell<ChaCha8Rng>)>,
}

impl<'a> Forward<'a> {
    /// Deterministic pass with dropout off.
    pub fn eval(tape: &'a Tape, params: &'a ParamStore) -> Self {
        Self {
            tape,
            params,
            dropout: None,
        }
    }

    /// Training pass; dropout masks are drawn from a generator seeded by `seed`.
    pub fn train(tape: &'a Tape, params: &'a ParamStore, dropout: f64, seed: u64) -> Self {
        Self {
            tape,
            params,
            dropout: (dropout > 0.0).then(|| (dropout, RefCell::new(ChaCha8Rng::seed_from_u64(seed)))),
        }
    }

    pub(crate) fn drop(&self, x: Var) -> Result<Var> {
        match &self.dropout {
            Some((p, rng)) => Ok(self.tape.dropout(x, *p, true, &mut *rng.borrow_mut())?),
            None => Ok(x),
        }
    }

    pub(crate) fn param(&self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    pub(crate) fn linear(&self, l: &Linear, x: Var) -> Result<Var> {
        Ok(l.forward(self.tape, self.params, x)?)
    }
}

/// A context window as model-ready ids and masks, padded or cut to the
/// model's `m` frame slots and `n` comment slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub frames: Vec<Vec<f32>>,
    pub frame_mask: Vec<bool>,
    pub comments: Vec<Vec<u32>>,
    pub comment_mask: Vec<bool>,
}

impl ModelInput {
    pub fn from_window(window: &ContextWindow, vocab: &Vocabulary, config: &ModelConfig) -> Result<Self> {
        let dim = config.frame_dim;
        let mut frames = Vec::with_capacity(config.m);
        let mut frame_mask = Vec::with_capacity(config.m);
        for i in 0..config.m {
            match window.frames.get(i) {
                Some(f) if window.frame_mask[i] => {
                    if f.len() != dim {
                        return Err(ModelError::DimMismatch {
                            expected: dim,
                            found: f.len(),
                        });
                    }
                    frames.push(f.clone());
                    frame_mask.push(config.use_video);
                }
                _ => {
                    frames.push(vec![0.0; dim]);
                    frame_mask.push(false);
                }
            }
        }
        let mut comments = Vec::with_capacity(config.n);
        let mut comment_mask = Vec::with_capacity(config.n);
        for i in 0..config.n {
            match window.comments.get(i) {
                Some(c) if window.comment_mask[i] && config.use_comments => {
                    comments.push(vocab.encode_target(c));
                    comment_mask.push(true);
                }
                _ => {
                    comments.push(Vec::new());
                    comment_mask.push(false);
                }
            }
        }
        Ok(Self {
            frames,
            frame_mask,
            comments,
            comment_mask,
        })
    }

    /// Hides every frame, as in the comment-only evaluation regime.
    pub fn mask_frames(&mut self) {
        self.frame_mask.iter_mut().for_each(|m| *m = false);
        self.frames.iter_mut().for_each(|f| f.iter_mut().for_each(|v| *v = 0.0));
    }

    /// Hides every surrounding comment, as in the video-only evaluation regime.
    pub fn mask_comments(&mut self) {
        self.comment_mask.iter_mut().for_each(|m| *m = false);
        self.comments.iter_mut().for_each(Vec::clear);
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.frames.len() != config.m || self.frame_mask.len() != config.m {
            return Err(ModelError::DimMismatch {
                expected: config.m,
                found: self.frames.len(),
            });
        }
        if self.comments.len() != config.n || self.comment_mask.len() != config.n {
            return Err(ModelError::DimMismatch {
                expected: config.n,
                found: self.comments.len(),
            });
        }
        if let Some(f) = self.frames.iter().find(|f| f.len() != config.frame_dim) {
            return Err(ModelError::DimMismatch {
                expected: config.frame_dim,
                found: f.len(),
            });
        }
        for c in &self.comments {
            check_ids(c, config.vocab_size)?;
        }
        Ok(())
    }
}

fn check_ids(ids: &[u32], vocab: usize) -> Result<()> {
    match ids.iter().find(|&&id| id as usize >= vocab) {
        Some(&id) => Err(ModelError::TokenOutOfRange { id, vocab }),
        None => Ok(()),
    }
}

/// Encoder states with validity flags; masked rows are zero.
#[derive(Debug, Clone)]
pub struct Memory {
    pub states: Var,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Encoded {
    /// Video states `h`.
    pub video: Option<Memory>,
    /// Text states `g`: one per comment for the hierarchical model, one per
    /// word otherwise.
    pub text: Option<Memory>,
    attention: Vec<danmaku_tensor::nn::AttentionMemory>,
}

#[derive(Debug, Clone)]
pub enum DecoderState {
    Rnn { s: Var, c: Var },
    /// Tokens fed so far, starting with BOS.
    Prefix(Vec<u32>),
}

#[derive(Debug, Clone)]
enum Net {
    Rnn(rnn::RnnNet),
    Transformer(transformer::TransformerNet),
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    config: ModelConfig,
    params: ParamStore,
    embedding: ParamId,
    output: ParamId,
    net: Net,
}

/// Initializes every parameter from `seed`.
pub fn build_model(config: ModelConfig, seed: u64) -> Result<ModelBundle> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let embedding = store.add(
        "embedding",
        xavier_uniform(&mut rng, config.vocab_size, config.embed_dim),
    )?;
    let net = match config.kind {
        ModelKind::UnifiedTransformer => {
            Net::Transformer(transformer::TransformerNet::new(&mut store, &mut rng, &config)?)
        }
        _ => Net::Rnn(rnn::RnnNet::new(&mut store, &mut rng, &config)?),
    };
    let output = store.add(
        "output.weight",
        xavier_uniform(&mut rng, config.hidden_dim, config.vocab_size),
    )?;
    Ok(ModelBundle {
        config,
        params: store,
        embedding,
        output,
        net,
    })
}

impl ModelBundle {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// The token embedding shared by every text encoder and the decoder.
    pub fn embedding(&self) -> ParamId {
        self.embedding
    }

    pub fn output_projection(&self) -> ParamId {
        self.output
    }

    pub fn encode(&self, fx: &Forward, input: &ModelInput) -> Result<Encoded> {
        input.check(&self.config)?;
        match &self.net {
            Net::Rnn(net) => net.encode(fx, self, input),
            Net::Transformer(net) => net.encode(fx, self, input),
        }
    }

    pub fn initial_state(&self, fx: &Forward) -> Result<DecoderState> {
        match &self.net {
            Net::Rnn(net) => net.initial_state(fx),
            Net::Transformer(_) => Ok(DecoderState::Prefix(Vec::new())),
        }
    }

    /// Feeds `token` (BOS first) and returns the next state with `[1, V]` logits
    /// for the following token.
    pub fn decode_step(
        &self,
        fx: &Forward,
        enc: &Encoded,
        state: &DecoderState,
        token: u32,
    ) -> Result<(DecoderState, Var)> {
        check_ids(&[token], self.config.vocab_size)?;
        match (&self.net, state) {
            (Net::Rnn(net), DecoderState::Rnn { s, c }) => net.decode_step(fx, self, enc, (*s, *c), token),
            (Net::Transformer(net), DecoderState::Prefix(prefix)) => {
                let mut prefix = prefix.clone();
                prefix.push(token);
                let logits = net.decode(fx, self, enc, &prefix)?;
                let last = fx.tape.narrow_rows(logits, prefix.len() - 1, 1)?;
                Ok((DecoderState::Prefix(prefix), last))
            }
            _ => Err(ModelError::Config("decoder state does not match the model kind".into())),
        }
    }

    /// Logits `[T, V]` for every position of `decoder_input` (which starts with BOS).
    pub fn teacher_forced_logits(&self, fx: &Forward, enc: &Encoded, decoder_input: &[u32]) -> Result<Var> {
        check_ids(decoder_input, self.config.vocab_size)?;
        match &self.net {
            Net::Rnn(net) => net.decode_all(fx, self, enc, decoder_input),
            Net::Transformer(net) => net.decode(fx, self, enc, decoder_input),
        }
    }

    /// Summed NLL of `target` followed by EOS, and the number of scored tokens.
    pub fn nll(&self, fx: &Forward, enc: &Encoded, target: &[u32]) -> Result<(Var, usize)> {
        let (input, gold) = teacher_forcing_pair(target, self.config.vocab_size, self.config.max_target_len)?;
        let logits = self.teacher_forced_logits(fx, enc, &input)?;
        let gold: Vec<Option<usize>> = gold.iter().map(|&t| Some(t as usize)).collect();
        Ok((fx.tape.cross_entropy_with_logits(logits, &gold)?, gold.len()))
    }

    pub(crate) fn embed(&self, fx: &Forward, ids: &[u32]) -> Result<Var> {
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        Ok(fx.tape.embedding(fx.param(self.embedding), &ids)?)
    }

    pub(crate) fn project(&self, fx: &Forward, s: Var) -> Result<Var> {
        Ok(fx.tape.matmul(s, fx.param(self.output))?)
    }
}

/// `([BOS] + y, y + [EOS])`.
fn teacher_forcing_pair(y: &[u32], vocab: usize, max_len: usize) -> Result<(Vec<u32>, Vec<u32>)> {
    if y.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if y.len() > max_len {
        return Err(ModelError::TooLong {
            what: "target",
            len: y.len(),
            max: max_len,
        });
    }
    check_ids(y, vocab)?;
    let mut input = Vec::with_capacity(y.len() + 1);
    input.push(BOS);
    input.extend_from_slice(y);
    let mut gold = y.to_vec();
    gold.push(EOS);
    Ok((input, gold))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceScore {
    pub log_likelihood: f64,
    /// One entry per target token plus the final EOS.
    pub token_log_probs: Vec<f64>,
}

impl SequenceScore {
    pub fn per_token(&self) -> f64 {
        self.log_likelihood / self.token_log_probs.len() as f64
    }
}

/// Teacher-forced log-likelihood of `y` (EOS appended) given `input`.
pub fn score_sequence(bundle: &ModelBundle, input: &ModelInput, y: &[u32]) -> Result<SequenceScore> {
    Ok(score_candidates(bundle, input, &[y.to_vec()])?.remove(0))
}

/// Scores several sequences against one encoding of `input`.
pub fn score_candidates(bundle: &ModelBundle, input: &ModelInput, ys: &[Vec<u32>]) -> Result<Vec<SequenceScore>> {
    let tape = Tape::new();
    let fx = Forward::eval(&tape, &bundle.params);
    let enc = bundle.encode(&fx, input)?;
    // Pin the output projection and embedding before the mark so they are
    // copied onto the tape once.
    fx.param(bundle.embedding);
    fx.param(bundle.output);
    let mark = tape.len();
    let mut out = Vec::with_capacity(ys.len());
    for y in ys {
        let (dec_in, gold) = teacher_forcing_pair(y, bundle.config.vocab_size, bundle.config.max_target_len)?;
        let logits = bundle.teacher_forced_logits(&fx, &enc, &dec_in)?;
        let token_log_probs: Vec<f64> = {
            let l = tape.value(logits);
            gold.iter()
                .enumerate()
                .map(|(r, &t)| log_softmax(l.row_slice(r))[t as usize])
                .collect()
        };
        out.push(SequenceScore {
            log_likelihood: token_log_probs.iter().sum(),
            token_log_probs,
        });
        tape.truncate(mark);
    }
    Ok(out)
}

/// Cuts a token sequence to the decoder budget, as done for training targets.
pub fn clip_target(ids: &[u32]) -> &[u32] {
    &ids[..ids.len().min(MAX_TARGET_LEN)]
}

pub(crate) fn zeros(fx: &Forward, rows: usize, cols: usize) -> Result<Var> {
    Ok(fx.tape.leaf(Tensor::zeros(&[rows, cols]))?)
}

/// Central finite-difference check of the teacher-forced NLL of `target`
/// against backpropagated gradients, probing up to `per_param` entries of
/// every parameter.
pub fn check_gradients(
    bundle: &ModelBundle,
    input: &ModelInput,
    target: &[u32],
    per_param: usize,
) -> Result<danmaku_tensor::gradcheck::GradCheckReport> {
    let mut store = bundle.params.clone();
    let report = danmaku_tensor::gradcheck::check_params(&mut store, per_param, |tape, params| {
        let fx = Forward::eval(tape, params);
        let run = || -> Result<Var> {
            let enc = bundle.encode(&fx, input)?;
            Ok(bundle.nll(&fx, &enc, target)?.0)
        };
        run().map_err(|e| match e {
            ModelError::Tensor(t) => t,
            other => TensorError::InvalidArgument(other.to_string()),
        })
    })?;
    Ok(report)
}
