use danmaku_tensor::nn::{lstm_cell, lstm_unroll, AdditiveAttention, AttentionMemory, Linear, LstmParams};
use danmaku_tensor::{ParamStore, Tensor, Var};
use rand::Rng;

use super::transformer::concat_comments;
use super::{zeros, DecoderState, Encoded, Forward, Memory, ModelBundle, ModelConfig, ModelError, ModelInput, ModelKind, Net, Result};

#[derive(Debug, Clone)]
struct SentenceEncoder {
    lstm: LstmParams,
    attn: AdditiveAttention,
    combine: Linear,
}

/// LSTM decoder attending over one or more memories; the attended state
/// `tanh(W [ŝ; c_1; ..; c_k] + b)` is both the output and the next recurrent input.
#[derive(Debug, Clone)]
struct RnnDecoder {
    lstm: LstmParams,
    attns: Vec<AdditiveAttention>,
    combine: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct RnnNet {
    kind: ModelKind,
    frame_proj: Option<Linear>,
    video_lstm: Option<LstmParams>,
    /// Per-comment word LSTM (hierarchical model) or the LSTM over the
    /// concatenated comments (baselines).
    text_lstm: Option<LstmParams>,
    sentence: Option<SentenceEncoder>,
    decoder: RnnDecoder,
}

impl RnnNet {
    pub(crate) fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, c: &ModelConfig) -> Result<Self> {
        let (e, h) = (c.embed_dim, c.hidden_dim);
        let fusional = c.kind == ModelKind::FusionalRnn;
        let video = fusional || c.use_video;
        let text = fusional || c.use_comments;

        let (frame_proj, video_lstm) = if video {
            (
                Some(Linear::new(store, rng, "frame_proj", c.frame_dim, h, true)?),
                Some(LstmParams::new(store, rng, "video_lstm", h, h)?),
            )
        } else {
            (None, None)
        };
        let text_lstm = if text {
            let name = if fusional { "word_lstm" } else { "text_lstm" };
            Some(LstmParams::new(store, rng, name, e, h)?)
        } else {
            None
        };
        let sentence = if fusional {
            Some(SentenceEncoder {
                lstm: LstmParams::new(store, rng, "sentence_lstm", h, h)?,
                attn: AdditiveAttention::new(store, rng, "sentence_attn", h, h, h)?,
                combine: Linear::new(store, rng, "sentence_combine", 2 * h, h, true)?,
            })
        } else {
            None
        };
        let lstm = LstmParams::new(store, rng, "decoder_lstm", e, h)?;
        let attns = if fusional {
            vec![
                AdditiveAttention::new(store, rng, "decoder_attn_video", h, h, h)?,
                AdditiveAttention::new(store, rng, "decoder_attn_text", h, h, h)?,
            ]
        } else {
            vec![AdditiveAttention::new(store, rng, "decoder_attn", h, h, h)?]
        };
        let combine = Linear::new(store, rng, "decoder_combine", h * (1 + attns.len()), h, true)?;
        Ok(Self {
            kind: c.kind,
            frame_proj,
            video_lstm,
            text_lstm,
            sentence,
            decoder: RnnDecoder { lstm, attns, combine },
        })
    }

    pub(crate) fn encode(&self, fx: &Forward, bundle: &ModelBundle, input: &ModelInput) -> Result<Encoded> {
        let tape = fx.tape;
        let video = match (&self.frame_proj, &self.video_lstm) {
            (Some(proj), Some(lstm)) => {
                let v = project_frames(fx, proj, input)?;
                Some(Memory {
                    states: encode_video_with(fx, lstm, v, &input.frame_mask)?,
                    mask: input.frame_mask.clone(),
                })
            }
            _ => None,
        };

        if self.kind == ModelKind::FusionalRnn {
            let video = video.expect("hierarchical model always has a video encoder");
            let enc = self.encode_comments(fx, bundle, input, &video)?;
            let text = Memory {
                states: enc.g,
                mask: input.comment_mask.clone(),
            };
            let attention = vec![
                self.decoder.attns[0].prepare(tape, fx.params, video.states, &video.mask)?,
                self.decoder.attns[1].prepare(tape, fx.params, text.states, &text.mask)?,
            ];
            return Ok(Encoded {
                video: Some(video),
                text: Some(text),
                attention,
            });
        }

        let text = match &self.text_lstm {
            Some(lstm) => {
                let ids = concat_comments(&input.comments, &input.comment_mask);
                Some(if ids.is_empty() {
                    Memory {
                        states: zeros(fx, 1, lstm.hidden)?,
                        mask: vec![false],
                    }
                } else {
                    let x = fx.drop(bundle.embed(fx, &ids)?)?;
                    Memory {
                        states: lstm_rows(fx, lstm, x)?,
                        mask: vec![true; ids.len()],
                    }
                })
            }
            None => None,
        };
        let joined = match (&video, &text) {
            (Some(v), Some(t)) => Memory {
                states: tape.concat(&[v.states, t.states], 0)?,
                mask: v.mask.iter().chain(&t.mask).copied().collect(),
            },
            (Some(m), None) | (None, Some(m)) => m.clone(),
            (None, None) => return Err(ModelError::Config("model has no encoder".into())),
        };
        let attention = vec![self.decoder.attns[0].prepare(tape, fx.params, joined.states, &joined.mask)?];
        Ok(Encoded { video, text, attention })
    }

    fn encode_comments(
        &self,
        fx: &Forward,
        bundle: &ModelBundle,
        input: &ModelInput,
        video: &Memory,
    ) -> Result<CommentEncoding> {
        let word = self.text_lstm.as_ref().expect("word encoder");
        let sent = self.sentence.as_ref().expect("sentence encoder");
        let tape = fx.tape;
        let n = input.comments.len();
        let hd = word.hidden;

        // Word level: every comment is a row of one batched LSTM; a row stops
        // updating once its comment ends, so its final state is the last word's.
        let longest = input.comments.iter().map(Vec::len).max().unwrap_or(0);
        let x = if longest == 0 {
            zeros(fx, n, hd)?
        } else {
            let mut steps = Vec::with_capacity(longest);
            let mut active = Vec::with_capacity(longest);
            for j in 0..longest {
                let ids: Vec<u32> = input.comments.iter().map(|c| c.get(j).copied().unwrap_or(0)).collect();
                steps.push(fx.drop(bundle.embed(fx, &ids)?)?);
                active.push(input.comments.iter().map(|c| j < c.len()).collect::<Vec<bool>>());
            }
            let init = word.zero_state(tape, n)?;
            let (_, (last, _)) = lstm_unroll(tape, fx.params, word, &steps, Some(&active), init)?;
            last
        };

        // Sentence level: ĝ_i = LSTM(x_i, g_{i-1}); g_i = tanh(W [ĝ_i; attend(ĝ_i, h)] + b).
        let memory = sent.attn.prepare(tape, fx.params, video.states, &video.mask)?;
        let (mut g_prev, mut c_prev) = sent.lstm.zero_state(tape, 1)?;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let xi = tape.narrow_rows(x, i, 1)?;
            let (g_hat, c) = lstm_cell(tape, fx.params, &sent.lstm, xi, g_prev, c_prev)?;
            let ctx = memory.attend(tape, fx.params, g_hat)?.context;
            let g = tape.tanh(fx.linear(&sent.combine, tape.concat(&[g_hat, ctx], 1)?)?)?;
            rows.push(g);
            g_prev = g;
            c_prev = c;
        }
        let g = stack(fx, &rows, hd)?;
        let g = mask(fx, g, &input.comment_mask)?;
        Ok(CommentEncoding { x, g })
    }

    pub(crate) fn initial_state(&self, fx: &Forward) -> Result<DecoderState> {
        let (s, c) = self.decoder.lstm.zero_state(fx.tape, 1)?;
        Ok(DecoderState::Rnn { s, c })
    }

    fn step(&self, fx: &Forward, bundle: &ModelBundle, prepared: &[AttentionMemory], state: (Var, Var), token: u32) -> Result<(Var, Var)> {
        let tape = fx.tape;
        let d = &self.decoder;
        let x = fx.drop(bundle.embed(fx, &[token])?)?;
        let (s_hat, c) = lstm_cell(tape, fx.params, &d.lstm, x, state.0, state.1)?;
        let mut parts = vec![s_hat];
        for mem in prepared {
            parts.push(mem.attend(tape, fx.params, s_hat)?.context);
        }
        let s = tape.tanh(fx.linear(&d.combine, tape.concat(&parts, 1)?)?)?;
        Ok((s, c))
    }

    pub(crate) fn decode_step(
        &self,
        fx: &Forward,
        bundle: &ModelBundle,
        enc: &Encoded,
        state: (Var, Var),
        token: u32,
    ) -> Result<(DecoderState, Var)> {
        let (s, c) = self.step(fx, bundle, &enc.attention, state, token)?;
        let logits = bundle.project(fx, fx.drop(s)?)?;
        Ok((DecoderState::Rnn { s, c }, logits))
    }

    pub(crate) fn decode_all(&self, fx: &Forward, bundle: &ModelBundle, enc: &Encoded, input: &[u32]) -> Result<Var> {
        let (mut s, mut c) = self.decoder.lstm.zero_state(fx.tape, 1)?;
        let mut rows = Vec::with_capacity(input.len());
        for &token in input {
            (s, c) = self.step(fx, bundle, &enc.attention, (s, c), token)?;
            rows.push(s);
        }
        let states = stack(fx, &rows, self.decoder.lstm.hidden)?;
        bundle.project(fx, fx.drop(states)?)
    }
}

/// Word-level final states `x` (one row per comment slot) and attended
/// sentence states `g`.
#[derive(Debug, Clone, Copy)]
pub struct CommentEncoding {
    pub x: Var,
    pub g: Var,
}

fn stack(fx: &Forward, rows: &[Var], cols: usize) -> Result<Var> {
    match rows.len() {
        0 => zeros(fx, 0, cols),
        1 => Ok(rows[0]),
        _ => Ok(fx.tape.concat(rows, 0)?),
    }
}

fn mask(fx: &Forward, x: Var, keep: &[bool]) -> Result<Var> {
    if keep.iter().all(|k| *k) {
        Ok(x)
    } else {
        Ok(fx.tape.mask_rows(x, keep)?)
    }
}

/// LSTM over the rows of `x: [T, d]` from a zero state; returns `[T, hidden]`.
fn lstm_rows(fx: &Forward, lstm: &LstmParams, x: Var) -> Result<Var> {
    let t = fx.tape.value(x).rows();
    let inputs = (0..t).map(|i| fx.tape.narrow_rows(x, i, 1)).collect::<danmaku_tensor::Result<Vec<_>>>()?;
    let init = lstm.zero_state(fx.tape, 1)?;
    let (states, _) = lstm_unroll(fx.tape, fx.params, lstm, &inputs, None, init)?;
    stack(fx, &states, lstm.hidden)
}

pub(crate) fn project_frames(fx: &Forward, proj: &Linear, input: &ModelInput) -> Result<Var> {
    let m = input.frames.len();
    let d = input.frames.first().map_or(0, Vec::len);
    let data: Vec<f64> = input.frames.iter().flatten().map(|&v| v as f64).collect();
    let f = fx.tape.leaf(Tensor::new(vec![m, d], data)?)?;
    let v = fx.linear(proj, f)?;
    mask(fx, v, &input.frame_mask)
}

fn encode_video_with(fx: &Forward, lstm: &LstmParams, v: Var, frame_mask: &[bool]) -> Result<Var> {
    let h = lstm_rows(fx, lstm, v)?;
    mask(fx, h, frame_mask)
}

fn frame_projection(bundle: &ModelBundle) -> Result<Linear> {
    match &bundle.net {
        Net::Rnn(net) => net.frame_proj,
        Net::Transformer(net) => Some(net.frame_proj),
    }
    .ok_or_else(|| ModelError::Config("model has no video encoder".into()))
}

fn fusional(bundle: &ModelBundle) -> Result<&RnnNet> {
    match &bundle.net {
        Net::Rnn(net) if net.kind == ModelKind::FusionalRnn => Ok(net),
        _ => Err(ModelError::Config("operation needs the hierarchical LSTM model".into())),
    }
}

/// Frame vectors `v_i = W_f f_i + b_f` (`[m, hidden]`), zero on masked slots.
pub fn encode_frames(fx: &Forward, bundle: &ModelBundle, input: &ModelInput) -> Result<Var> {
    input.check(bundle.config())?;
    project_frames(fx, &frame_projection(bundle)?, input)
}

/// Video LSTM states `h_i = LSTM(v_i, h_{i-1})` from a zero start, zero on masked slots.
pub fn fusional_encode_video(fx: &Forward, bundle: &ModelBundle, v: Var, frame_mask: &[bool]) -> Result<Var> {
    let net = fusional(bundle)?;
    encode_video_with(fx, net.video_lstm.as_ref().expect("video encoder"), v, frame_mask)
}

/// Word and sentence encoders of the hierarchical model over `input`'s comments,
/// attending to the video states `h`.
pub fn fusional_encode_comments(
    fx: &Forward,
    bundle: &ModelBundle,
    input: &ModelInput,
    h: &Memory,
) -> Result<CommentEncoding> {
    input.check(bundle.config())?;
    fusional(bundle)?.encode_comments(fx, bundle, input, h)
}
