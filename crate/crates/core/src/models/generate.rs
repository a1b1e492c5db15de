use danmaku_tensor::{log_softmax, Tape};
use serde::{Deserialize, Serialize};

use super::{DecoderState, Encoded, Forward, ModelBundle, ModelInput, Result};
use crate::corpus::{BOS, EOS};

/// Anything that yields next-token log-probabilities one step at a time.
pub trait StepModel {
    type State: Clone;

    fn start(&self) -> Result<Self::State>;

    /// Feeds `token` and returns the new state with log-probabilities for the next token.
    fn step(&self, state: &Self::State, token: u32) -> Result<(Self::State, Vec<f64>)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

/// Highest entry, lowest index on ties.
fn argmax(xs: &[f64]) -> u32 {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best as u32
}

/// Argmax decoding until EOS or `max_len` tokens. The EOS is not returned.
pub fn greedy<M: StepModel>(model: &M, max_len: usize) -> Result<Vec<u32>> {
    let mut state = model.start()?;
    let mut last = BOS;
    let mut out = Vec::new();
    while out.len() < max_len {
        let (next, logp) = model.step(&state, last)?;
        let tok = argmax(&logp);
        if tok == EOS {
            break;
        }
        out.push(tok);
        state = next;
        last = tok;
    }
    Ok(out)
}

struct Hyp<S> {
    tokens: Vec<u32>,
    score: f64,
    state: S,
}

/// Beam search ranked by summed log-probability during the search; finished
/// hypotheses compete on log-probability per generated token (EOS included).
pub fn beam_search<M: StepModel>(model: &M, width: usize, max_len: usize) -> Result<Vec<u32>> {
    let width = width.max(1);
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
        state: model.start()?,
    }];
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();

    for _ in 0..max_len {
        // (score, parent, token) for the best `width` continuations of each parent.
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        let mut states = Vec::with_capacity(live.len());
        for (hi, h) in live.iter().enumerate() {
            let last = h.tokens.last().copied().unwrap_or(BOS);
            let (state, logp) = model.step(&h.state, last)?;
            let mut order: Vec<u32> = (0..logp.len() as u32).collect();
            order.sort_by(|&a, &b| logp[b as usize].total_cmp(&logp[a as usize]).then(a.cmp(&b)));
            cands.extend(order.into_iter().take(width).map(|t| (h.score + logp[t as usize], hi, t)));
            states.push(state);
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(width);
        for (score, hi, tok) in cands.into_iter().take(width) {
            let tokens = live[hi].tokens.clone();
            if tok == EOS {
                let len = tokens.len() + 1;
                finished.push((tokens, score / len as f64));
            } else {
                let mut tokens = tokens;
                tokens.push(tok);
                next.push(Hyp {
                    tokens,
                    score,
                    state: states[hi].clone(),
                });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    for h in live {
        let len = h.tokens.len().max(1);
        finished.push((h.tokens, h.score / len as f64));
    }
    finished.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(finished.into_iter().next().map(|(t, _)| t).unwrap_or_default())
}

/// Step-wise decoder over one encoded input.
pub struct BundleDecoder<'a> {
    bundle: &'a ModelBundle,
    fx: Forward<'a>,
    enc: Encoded,
}

impl<'a> BundleDecoder<'a> {
    pub fn new(bundle: &'a ModelBundle, tape: &'a Tape, input: &ModelInput) -> Result<Self> {
        let fx = Forward::eval(tape, bundle.params());
        let enc = bundle.encode(&fx, input)?;
        Ok(Self { bundle, fx, enc })
    }
}

impl StepModel for BundleDecoder<'_> {
    type State = DecoderState;

    fn start(&self) -> Result<DecoderState> {
        self.bundle.initial_state(&self.fx)
    }

    fn step(&self, state: &DecoderState, token: u32) -> Result<(DecoderState, Vec<f64>)> {
        let (next, logits) = self.bundle.decode_step(&self.fx, &self.enc, state, token)?;
        let logp = log_softmax(self.fx.tape.value(logits).row_slice(0));
        Ok((next, logp))
    }
}

/// Decodes a comment for `input`; returns ids without BOS/EOS.
pub fn generate(bundle: &ModelBundle, input: &ModelInput, mode: DecodeMode, max_len: usize) -> Result<Vec<u32>> {
    let tape = Tape::new();
    let dec = BundleDecoder::new(bundle, &tape, input)?;
    let max_len = max_len.min(bundle.config().max_target_len);
    match mode {
        DecodeMode::Greedy => greedy(&dec, max_len),
        DecodeMode::Beam(w) => beam_search(&dec, w, max_len),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed next-token preferences keyed on the number of tokens emitted.
    struct Script(Vec<Vec<f64>>);

    impl StepModel for Script {
        type State = usize;

        fn start(&self) -> Result<usize> {
            Ok(0)
        }

        fn step(&self, state: &usize, _token: u32) -> Result<(usize, Vec<f64>)> {
            let probs = &self.0[(*state).min(self.0.len() - 1)];
            Ok((state + 1, probs.iter().map(|p| p.ln()).collect()))
        }
    }

    const A: usize = 5;

    fn dist(top: usize) -> Vec<f64> {
        let mut p = vec![0.02; 6];
        p[top] = 0.9;
        p
    }

    #[test]
    fn eos_first_gives_empty_comment() {
        let m = Script(vec![dist(EOS as usize)]);
        assert!(greedy(&m, 20).unwrap().is_empty());
        assert!(beam_search(&m, 5, 20).unwrap().is_empty());
    }

    #[test]
    fn token_then_eos() {
        let m = Script(vec![dist(A), dist(EOS as usize)]);
        assert_eq!(greedy(&m, 20).unwrap(), vec![A as u32]);
        assert_eq!(beam_search(&m, 3, 20).unwrap(), vec![A as u32]);
    }

    #[test]
    fn greedy_stops_at_max_len() {
        let m = Script(vec![dist(A)]);
        assert_eq!(greedy(&m, 4).unwrap(), vec![A as u32; 4]);
        assert_eq!(beam_search(&m, 1, 4).unwrap(), vec![A as u32; 4]);
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let m = Script(vec![vec![0.1, 0.1, 0.1, 0.1, 0.3, 0.3], dist(EOS as usize)]);
        assert_eq!(greedy(&m, 5).unwrap(), vec![4]);
    }

    #[test]
    fn beam_finds_better_sequence_than_greedy() {
        // Greedy takes token 4 (0.5) and then faces a flat distribution; the
        // beam keeps token 5 (0.4), whose continuation is almost surely EOS.
        struct Trap;
        impl StepModel for Trap {
            type State = Vec<u32>;
            fn start(&self) -> Result<Vec<u32>> {
                Ok(Vec::new())
            }
            fn step(&self, s: &Vec<u32>, tok: u32) -> Result<(Vec<u32>, Vec<f64>)> {
                let mut s = s.clone();
                if tok != BOS {
                    s.push(tok);
                }
                let p: Vec<f64> = match s.as_slice() {
                    [] => vec![0.02, 0.02, 0.02, 0.04, 0.5, 0.4],
                    [4] => vec![1.0 / 6.0; 6],
                    _ => vec![0.0, 0.0, 0.0, 0.99, 0.005, 0.005],
                };
                Ok((s, p.iter().map(|v| v.max(1e-300).ln()).collect()))
            }
        }
        assert_eq!(greedy(&Trap, 1).unwrap(), vec![4]);
        assert_eq!(beam_search(&Trap, 2, 3).unwrap(), vec![5]);
    }
}
