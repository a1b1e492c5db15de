//! Layer primitives built on the tape: affine maps, LSTM cells, additive and
//! multi-head attention, layer normalization and the position-wise feed-forward.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(rng, d_in, d_out))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => tape.add_row(y, tape.param(store, b)),
            None => Ok(y),
        }
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).cols()
    }
}

/// Fused LSTM weights. Gate blocks along the output axis are ordered
/// input, forget, cell candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        hidden: usize,
    ) -> Result<Self> {
        let mut wx = Tensor::zeros(&[d_in, 4 * hidden]);
        let mut wh = Tensor::zeros(&[hidden, 4 * hidden]);
        // Xavier per gate block so each block sees its own fan-out.
        for gate in 0..4 {
            let bx = xavier_uniform(rng, d_in, hidden);
            let bh = xavier_uniform(rng, hidden, hidden);
            for r in 0..d_in {
                let dst = &mut wx.data_mut()[r * 4 * hidden + gate * hidden..][..hidden];
                dst.copy_from_slice(bx.row_slice(r));
            }
            for r in 0..hidden {
                let dst = &mut wh.data_mut()[r * 4 * hidden + gate * hidden..][..hidden];
                dst.copy_from_slice(bh.row_slice(r));
            }
        }
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        Ok(Self {
            w_input: store.add(format!("{name}.w_input"), wx)?,
            w_hidden: store.add(format!("{name}.w_hidden"), wh)?,
            bias: store.add(format!("{name}.bias"), b)?,
            hidden,
        })
    }

    /// Zero initial `(h, c)` for `batch` rows.
    pub fn zero_state(&self, tape: &Tape, batch: usize) -> Result<(Var, Var)> {
        let h = tape.leaf(Tensor::zeros(&[batch, self.hidden]))?;
        let c = tape.leaf(Tensor::zeros(&[batch, self.hidden]))?;
        Ok((h, c))
    }
}

/// One LSTM step over a batch of rows: `x: [B, d_in]`, `h_prev, c_prev: [B, hidden]`.
pub fn lstm_cell(
    tape: &Tape,
    store: &ParamStore,
    params: &LstmParams,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let hd = params.hidden;
    let wx = tape.param(store, params.w_input);
    let wh = tape.param(store, params.w_hidden);
    let b = tape.param(store, params.bias);
    let z = tape.add(tape.matmul(x, wx)?, tape.matmul(h_prev, wh)?)?;
    let z = tape.add_row(z, b)?;
    let i = tape.sigmoid(tape.narrow_cols(z, 0, hd)?)?;
    let f = tape.sigmoid(tape.narrow_cols(z, hd, hd)?)?;
    let g = tape.tanh(tape.narrow_cols(z, 2 * hd, hd)?)?;
    let o = tape.sigmoid(tape.narrow_cols(z, 3 * hd, hd)?)?;
    let c = tape.add(tape.mul(f, c_prev)?, tape.mul(i, g)?)?;
    let h = tape.mul(o, tape.tanh(c)?)?;
    Ok((h, c))
}

/// Runs an LSTM left to right over `inputs` (each `[B, d_in]`). Rows whose
/// `active[t][row]` flag is false keep their previous state at step `t`.
/// Returns the hidden state after every step and the final `(h, c)`.
pub fn lstm_unroll(
    tape: &Tape,
    store: &ParamStore,
    params: &LstmParams,
    inputs: &[Var],
    active: Option<&[Vec<bool>]>,
    init: (Var, Var),
) -> Result<(Vec<Var>, (Var, Var))> {
    let (mut h, mut c) = init;
    let mut states = Vec::with_capacity(inputs.len());
    for (t, &x) in inputs.iter().enumerate() {
        let (h_new, c_new) = lstm_cell(tape, store, params, x, h, c)?;
        match active {
            Some(flags) if flags[t].iter().any(|f| !f) => {
                h = tape.select_rows(&flags[t], h_new, h)?;
                c = tape.select_rows(&flags[t], c_new, c)?;
            }
            _ => {
                h = h_new;
                c = c_new;
            }
        }
        states.push(h);
    }
    Ok((states, (h, c)))
}

/// Concat-score attention: `score_j = vᵀ tanh(W_q q + W_k k_j)`.
#[derive(Debug, Clone, Copy)]
pub struct AdditiveAttention {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub v: ParamId,
}

impl AdditiveAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_query: usize,
        d_key: usize,
        d_attn: usize,
    ) -> Result<Self> {
        Ok(Self {
            w_query: store.add(format!("{name}.w_query"), xavier_uniform(rng, d_query, d_attn))?,
            w_key: store.add(format!("{name}.w_key"), xavier_uniform(rng, d_key, d_attn))?,
            v: store.add(format!("{name}.v"), xavier_uniform(rng, d_attn, 1))?,
        })
    }

    /// Projects `keys: [n, d_key]` once so several queries can reuse them.
    pub fn prepare(
        &self,
        tape: &Tape,
        store: &ParamStore,
        keys: Var,
        mask: &[bool],
    ) -> Result<AttentionMemory> {
        let n = tape.value(keys).rows();
        if mask.len() != n {
            return Err(shape_err(
                "additive_attention",
                format!("mask of {} for {n} keys", mask.len()),
            ));
        }
        let projected = tape.matmul(keys, tape.param(store, self.w_key))?;
        Ok(AttentionMemory {
            attn: *self,
            keys,
            projected,
            mask: mask.to_vec(),
        })
    }
}

/// Keys prepared for [`AdditiveAttention`].
#[derive(Debug, Clone)]
pub struct AttentionMemory {
    attn: AdditiveAttention,
    keys: Var,
    projected: Var,
    mask: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `[1, d_key]`; zero when every slot is masked.
    pub context: Var,
    /// `[1, n]`; exactly 0 on masked slots.
    pub weights: Var,
    pub all_masked: bool,
}

impl AttentionMemory {
    pub fn keys(&self) -> Var {
        self.keys
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Attends with a single `[1, d_query]` query.
    pub fn attend(&self, tape: &Tape, store: &ParamStore, query: Var) -> Result<AttentionOutput> {
        let q = tape.matmul(query, tape.param(store, self.attn.w_query))?;
        let pre = tape.tanh(tape.add_row(self.projected, q)?)?;
        let scores = tape.matmul(pre, tape.param(store, self.attn.v))?;
        let scores = tape.transpose(scores)?;
        let weights = tape.masked_softmax(scores, self.mask.clone())?;
        let context = tape.matmul(weights, self.keys)?;
        Ok(AttentionOutput {
            context,
            weights,
            all_masked: !self.mask.iter().any(|m| *m),
        })
    }
}

/// One-shot additive attention of `query: [1, d_q]` over `keys: [n, d_k]`.
pub fn additive_attention(
    tape: &Tape,
    store: &ParamStore,
    attn: &AdditiveAttention,
    query: Var,
    keys: Var,
    mask: &[bool],
) -> Result<AttentionOutput> {
    attn.prepare(tape, store, keys, mask)?.attend(tape, store, query)
}

/// `allowed[i * keys + j]` for queries `i` and keys `j`.
pub fn attention_mask(queries: usize, key_valid: &[bool], causal: bool) -> Vec<bool> {
    let keys = key_valid.len();
    let mut allowed = Vec::with_capacity(queries * keys);
    for i in 0..queries {
        for (j, valid) in key_valid.iter().enumerate() {
            allowed.push(*valid && (!causal || j <= i));
        }
    }
    allowed
}

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct MhaOutput {
    /// `[queries, d_model]`
    pub output: Var,
    /// Per-head `[queries, keys]` attention weights.
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_model: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(shape_err(
                "multi_head_attention",
                format!("model dim {d_model} not divisible by {heads} heads"),
            ));
        }
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.query"), d_model, d_model, true)?,
            key: Linear::new(store, rng, &format!("{name}.key"), d_model, d_model, true)?,
            value: Linear::new(store, rng, &format!("{name}.value"), d_model, d_model, true)?,
            output: Linear::new(store, rng, &format!("{name}.output"), d_model, d_model, true)?,
            heads,
        })
    }

    /// Scaled dot-product attention of `queries: [Lq, d]` over `memory: [Lk, d]`.
    /// `allowed` comes from [`attention_mask`]. Query rows with no allowed key
    /// produce a zero output row.
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        queries: Var,
        memory: Var,
        allowed: &[bool],
    ) -> Result<MhaOutput> {
        let (lq, d) = {
            let v = tape.value(queries);
            (v.rows(), v.cols())
        };
        let lk = tape.value(memory).rows();
        if d % self.heads != 0 {
            return Err(shape_err(
                "multi_head_attention",
                format!("model dim {d} not divisible by {} heads", self.heads),
            ));
        }
        if allowed.len() != lq * lk {
            return Err(shape_err(
                "multi_head_attention",
                format!("mask of {} for {lq}x{lk}", allowed.len()),
            ));
        }
        let dh = d / self.heads;
        let q = self.query.forward(tape, store, queries)?;
        let k = self.key.forward(tape, store, memory)?;
        let v = self.value.forward(tape, store, memory)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.narrow_cols(q, h * dh, dh)?;
            let kh = tape.narrow_cols(k, h * dh, dh)?;
            let vh = tape.narrow_cols(v, h * dh, dh)?;
            let scores = tape.scale(tape.matmul(qh, tape.transpose(kh)?)?, scale)?;
            let w = tape.masked_softmax(scores, allowed.to_vec())?;
            heads.push(tape.matmul(w, vh)?);
            weights.push(w);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, 1)?
        };
        let mut output = self.output.forward(tape, store, joined)?;
        let live: Vec<bool> = allowed.chunks(lk.max(1)).map(|r| r.iter().any(|a| *a)).collect();
        if live.iter().any(|l| !l) {
            output = tape.mask_rows(output, &live)?;
        }
        Ok(MhaOutput { output, weights })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, LAYER_NORM_EPS)?;
        let n = tape.mul_row(n, tape.param(store, self.gain))?;
        tape.add_row(n, tape.param(store, self.bias))
    }
}

/// Position-wise `relu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_model: usize,
        d_ff: usize,
    ) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(store, rng, &format!("{name}.inner"), d_model, d_ff, true)?,
            outer: Linear::new(store, rng, &format!("{name}.outer"), d_ff, d_model, true)?,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = tape.relu(self.inner.forward(tape, store, x)?)?;
        self.outer.forward(tape, store, h)
    }
}

/// Sinusoidal position encodings, `[len, dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![len, dim], data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).fill(0.0);
        }
    }

    #[test]
    fn lstm_zero_params_give_zero_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, &mut rng, "lstm", 3, 4).unwrap();
        zero_all(&mut store);
        let tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[0.3, -1.2, 2.0])).unwrap();
        let (h0, c0) = p.zero_state(&tape, 1).unwrap();
        let (h, c) = lstm_cell(&tape, &store, &p, x, h0, c0).unwrap();
        assert!(tape.value(h).data().iter().all(|v| *v == 0.0));
        assert!(tape.value(c).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lstm_forget_bias_starts_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, &mut rng, "lstm", 2, 3).unwrap();
        let b = store.get(p.bias).data();
        assert_eq!(&b[0..3], &[0.0; 3]);
        assert_eq!(&b[3..6], &[1.0; 3]);
        assert_eq!(&b[6..12], &[0.0; 6]);
    }

    #[test]
    fn lstm_zero_input_and_state_with_forget_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, &mut rng, "lstm", 2, 3).unwrap();
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2])).unwrap();
        let (h0, c0) = p.zero_state(&tape, 1).unwrap();
        let (h, c) = lstm_cell(&tape, &store, &p, x, h0, c0).unwrap();
        assert!(tape.value(h).data().iter().all(|v| *v == 0.0));
        assert!(tape.value(c).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn attention_identical_keys_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let a = AdditiveAttention::new(&mut store, &mut rng, "att", 2, 3, 4).unwrap();
        let tape = Tape::new();
        let q = tape.leaf(Tensor::row(&[0.5, -0.1])).unwrap();
        let keys = tape
            .leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let out = additive_attention(&tape, &store, &a, q, keys, &[true, true]).unwrap();
        let w = tape.value(out.weights);
        assert!((w.data()[0] - 0.5).abs() < 1e-12 && (w.data()[1] - 0.5).abs() < 1e-12);
        let ctx = tape.value(out.context);
        for (x, y) in ctx.data().iter().zip([1.0, 2.0, 3.0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_masked_slot_renormalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let a = AdditiveAttention::new(&mut store, &mut rng, "att", 2, 2, 2).unwrap();
        let tape = Tape::new();
        let q = tape.leaf(Tensor::row(&[0.5, -0.1])).unwrap();
        let keys = tape
            .leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, -3.0, 4.0]).unwrap())
            .unwrap();
        let out = additive_attention(&tape, &store, &a, q, keys, &[false, true]).unwrap();
        assert_eq!(tape.value(out.weights).data(), &[0.0, 1.0]);
        assert_eq!(tape.value(out.context).data(), &[-3.0, 4.0]);
    }

    #[test]
    fn attention_all_masked_gives_zero_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let a = AdditiveAttention::new(&mut store, &mut rng, "att", 2, 2, 2).unwrap();
        let tape = Tape::new();
        let q = tape.leaf(Tensor::row(&[0.5, -0.1])).unwrap();
        let keys = tape.leaf(Tensor::full(&[3, 2], 7.0)).unwrap();
        let out = additive_attention(&tape, &store, &a, q, keys, &[false; 3]).unwrap();
        assert!(out.all_masked);
        assert!(tape.value(out.context).data().iter().all(|v| *v == 0.0));
    }

    fn identity(d: usize) -> Tensor {
        let mut t = Tensor::zeros(&[d, d]);
        for i in 0..d {
            t.data_mut()[i * d + i] = 1.0;
        }
        t
    }

    #[test]
    fn mha_single_slot_identity_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "mha", 3, 1).unwrap();
        for lin in [mha.query, mha.key, mha.value, mha.output] {
            *store.get_mut(lin.weight) = identity(3);
        }
        let tape = Tape::new();
        let u = tape.leaf(Tensor::row(&[0.2, -0.7, 1.5])).unwrap();
        let q = tape.leaf(Tensor::row(&[1.0, 1.0, 1.0])).unwrap();
        let out = mha.forward(&tape, &store, q, u, &[true]).unwrap();
        assert_eq!(tape.value(out.output).data(), &[0.2, -0.7, 1.5]);
    }

    #[test]
    fn mha_rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        assert!(MultiHeadAttention::new(&mut store, &mut rng, "mha", 10, 4).is_err());
    }

    #[test]
    fn causal_mask_is_lower_triangular() {
        let m = attention_mask(3, &[true, true, false], true);
        assert_eq!(
            m,
            vec![true, false, false, true, true, false, true, true, false]
        );
    }

    #[test]
    fn positions_start_with_sin_cos_of_zero() {
        let pe = sinusoidal_positions(2, 4);
        assert_eq!(pe.row_slice(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at(1, 0) - 1f64.sin()).abs() < 1e-12);
    }
}
