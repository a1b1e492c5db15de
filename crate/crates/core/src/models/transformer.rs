use danmaku_tensor::nn::{attention_mask, sinusoidal_positions, FeedForward, LayerNormParams, Linear, MultiHeadAttention};
use danmaku_tensor::{ParamStore, Tensor, Var};
use rand::Rng;

use super::rnn::project_frames;
use super::{Encoded, Forward, Memory, ModelBundle, ModelConfig, ModelError, ModelInput, Net, Result};
use crate::corpus::{PAD, SEP};

/// Where an attention sublayer reads its keys and values from.
enum Source<'a> {
    SelfAttn(&'a [bool]),
    Cross(Var, &'a [bool]),
}

/// Pre-norm block: one residual attention sublayer per source, then a
/// residual feed-forward.
#[derive(Debug, Clone)]
struct Block {
    attn: Vec<(LayerNormParams, MultiHeadAttention)>,
    ff_norm: LayerNormParams,
    ff: FeedForward,
}

impl Block {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, c: &ModelConfig, sources: usize) -> Result<Self> {
        let d = c.hidden_dim;
        let attn = (0..sources)
            .map(|i| {
                Ok((
                    LayerNormParams::new(store, &format!("{name}.attn{i}.norm"), d)?,
                    MultiHeadAttention::new(store, rng, &format!("{name}.attn{i}"), d, c.heads)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            attn,
            ff_norm: LayerNormParams::new(store, &format!("{name}.ff.norm"), d)?,
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d, c.ff_dim)?,
        })
    }

    fn forward(&self, fx: &Forward, mut x: Var, sources: &[Source]) -> Result<Var> {
        let (tape, params) = (fx.tape, fx.params);
        for ((norm, mha), src) in self.attn.iter().zip(sources) {
            let y = norm.forward(tape, params, x)?;
            let (memory, allowed) = match src {
                Source::SelfAttn(a) => (y, *a),
                Source::Cross(m, a) => (*m, *a),
            };
            let out = mha.forward(tape, params, y, memory, allowed)?.output;
            x = tape.add(x, fx.drop(out)?)?;
        }
        let y = self.ff_norm.forward(tape, params, x)?;
        let out = self.ff.forward(tape, params, y)?;
        Ok(tape.add(x, fx.drop(out)?)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct TransformerNet {
    pub(crate) frame_proj: Linear,
    video: Vec<Block>,
    video_norm: LayerNormParams,
    text: Vec<Block>,
    text_norm: LayerNormParams,
    decoder: Vec<Block>,
    decoder_norm: LayerNormParams,
    positions: Option<Tensor>,
    max_text_len: usize,
    max_prefix_len: usize,
}

impl TransformerNet {
    pub(crate) fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, c: &ModelConfig) -> Result<Self> {
        let d = c.hidden_dim;
        let frame_proj = Linear::new(store, rng, "frame_proj", c.frame_dim, d, true)?;
        let stack = |store: &mut ParamStore, rng: &mut R, name: &str, sources: usize| {
            (0..c.layers)
                .map(|l| Block::new(store, rng, &format!("{name}.{l}"), c, sources))
                .collect::<Result<Vec<_>>>()
        };
        let video = stack(store, rng, "video", 1)?;
        let video_norm = LayerNormParams::new(store, "video.norm", d)?;
        let text = stack(store, rng, "text", 2)?;
        let text_norm = LayerNormParams::new(store, "text.norm", d)?;
        let decoder = stack(store, rng, "decoder", 3)?;
        let decoder_norm = LayerNormParams::new(store, "decoder.norm", d)?;
        let max_prefix_len = c.max_target_len + 1;
        let positions = c
            .positional_encoding
            .then(|| sinusoidal_positions(c.m.max(c.max_text_len).max(max_prefix_len), d));
        Ok(Self {
            frame_proj,
            video,
            video_norm,
            text,
            text_norm,
            decoder,
            decoder_norm,
            positions,
            max_text_len: c.max_text_len,
            max_prefix_len,
        })
    }

    fn add_positions(&self, fx: &Forward, x: Var) -> Result<Var> {
        let Some(table) = &self.positions else {
            return Ok(x);
        };
        let (rows, cols) = {
            let v = fx.tape.value(x);
            (v.rows(), v.cols())
        };
        let pe = Tensor::new(vec![rows, cols], table.data()[..rows * cols].to_vec())?;
        Ok(fx.tape.add(x, fx.tape.leaf(pe)?)?)
    }

    /// Scaled token embeddings plus positions.
    fn embed_tokens(&self, fx: &Forward, bundle: &ModelBundle, ids: &[u32]) -> Result<Var> {
        let scale = (bundle.config.hidden_dim as f64).sqrt();
        let e = fx.tape.scale(bundle.embed(fx, ids)?, scale)?;
        let e = self.add_positions(fx, e)?;
        fx.drop(e)
    }

    fn encode_video(&self, fx: &Forward, v: Var, mask: &[bool]) -> Result<Var> {
        let m = mask.len();
        let allowed = attention_mask(m, mask, false);
        let mut x = fx.drop(self.add_positions(fx, v)?)?;
        for block in &self.video {
            x = block.forward(fx, x, &[Source::SelfAttn(&allowed)])?;
        }
        let x = self.video_norm.forward(fx.tape, fx.params, x)?;
        masked(fx, x, mask)
    }

    fn encode_text(&self, fx: &Forward, bundle: &ModelBundle, ids: &[u32], video: &Memory) -> Result<Memory> {
        if ids.len() > self.max_text_len {
            return Err(ModelError::TooLong {
                what: "comment text",
                len: ids.len(),
                max: self.max_text_len,
            });
        }
        let (ids, mask) = if ids.is_empty() {
            (vec![PAD], vec![false])
        } else {
            (ids.to_vec(), vec![true; ids.len()])
        };
        let l = ids.len();
        let self_allowed = attention_mask(l, &mask, false);
        let cross_allowed = attention_mask(l, &video.mask, false);
        let mut x = self.embed_tokens(fx, bundle, &ids)?;
        for block in &self.text {
            x = block.forward(
                fx,
                x,
                &[Source::SelfAttn(&self_allowed), Source::Cross(video.states, &cross_allowed)],
            )?;
        }
        let x = self.text_norm.forward(fx.tape, fx.params, x)?;
        Ok(Memory {
            states: masked(fx, x, &mask)?,
            mask,
        })
    }

    pub(crate) fn encode(&self, fx: &Forward, bundle: &ModelBundle, input: &ModelInput) -> Result<Encoded> {
        let v = project_frames(fx, &self.frame_proj, input)?;
        let video = Memory {
            states: self.encode_video(fx, v, &input.frame_mask)?,
            mask: input.frame_mask.clone(),
        };
        let ids = concat_comments(&input.comments, &input.comment_mask);
        let text = self.encode_text(fx, bundle, &ids, &video)?;
        Ok(Encoded {
            video: Some(video),
            text: Some(text),
            attention: Vec::new(),
        })
    }

    /// Logits `[T, V]` for every prefix position under causal self-attention.
    pub(crate) fn decode(&self, fx: &Forward, bundle: &ModelBundle, enc: &Encoded, prefix: &[u32]) -> Result<Var> {
        let t = prefix.len();
        if t == 0 || t > self.max_prefix_len {
            return Err(ModelError::TooLong {
                what: "decoder prefix",
                len: t,
                max: self.max_prefix_len,
            });
        }
        let (video, text) = match (&enc.video, &enc.text) {
            (Some(v), Some(g)) => (v, g),
            _ => return Err(ModelError::Config("encoding does not come from the transformer".into())),
        };
        let causal = attention_mask(t, &vec![true; t], true);
        let to_video = attention_mask(t, &video.mask, false);
        let to_text = attention_mask(t, &text.mask, false);
        let mut x = self.embed_tokens(fx, bundle, prefix)?;
        for block in &self.decoder {
            x = block.forward(
                fx,
                x,
                &[
                    Source::SelfAttn(&causal),
                    Source::Cross(video.states, &to_video),
                    Source::Cross(text.states, &to_text),
                ],
            )?;
        }
        let s = self.decoder_norm.forward(fx.tape, fx.params, x)?;
        bundle.project(fx, fx.drop(s)?)
    }
}

fn masked(fx: &Forward, x: Var, keep: &[bool]) -> Result<Var> {
    if keep.iter().all(|k| *k) {
        Ok(x)
    } else {
        Ok(fx.tape.mask_rows(x, keep)?)
    }
}

/// Valid comments joined time-ascending into one id sequence with SEP between
/// consecutive comments.
pub fn concat_comments(comments: &[Vec<u32>], mask: &[bool]) -> Vec<u32> {
    let mut out = Vec::new();
    for (c, _) in comments.iter().zip(mask).filter(|(c, m)| **m && !c.is_empty()) {
        if !out.is_empty() {
            out.push(SEP);
        }
        out.extend_from_slice(c);
    }
    out
}

fn net(bundle: &ModelBundle) -> Result<&TransformerNet> {
    match &bundle.net {
        Net::Transformer(t) => Ok(t),
        Net::Rnn(_) => Err(ModelError::Config("operation needs the transformer model".into())),
    }
}

/// Video self-attention encoder over frame vectors `v: [m, d]`.
pub fn tx_encode_video(fx: &Forward, bundle: &ModelBundle, v: Var, frame_mask: &[bool]) -> Result<Var> {
    net(bundle)?.encode_video(fx, v, frame_mask)
}

/// Text encoder over the concatenated comment ids, cross-attending to `h`.
/// Returns one state per id (a single masked slot when `ids` is empty).
pub fn tx_encode_text(fx: &Forward, bundle: &ModelBundle, ids: &[u32], h: &Memory) -> Result<Memory> {
    super::check_ids(ids, bundle.config.vocab_size)?;
    net(bundle)?.encode_text(fx, bundle, ids, h)
}
