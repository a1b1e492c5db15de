//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! Every operation appends a node holding its forward value and the
//! information its backward rule needs. [`Tape::backward`] walks the nodes in
//! reverse creation order, which is a valid reverse topological order because
//! a node can only reference nodes created before it.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use rand::Rng;

use crate::error::{shape_err, Result, TensorError};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{matmul_at, matmul_bt, matmul_raw, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    MaskedSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<(Var, usize)>, axis: usize },
    NarrowCols { x: Var, start: usize },
    NarrowRows { x: Var, start: usize },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64> },
    Dropout { x: Var, scale: Vec<f64> },
    SelectRows { a: Var, b: Var, take_a: Vec<bool> },
    MaskRows { x: Var, keep: Vec<bool> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations for one forward pass and replays them once in reverse.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, Var>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    backward_done: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            grads: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid; earlier handles stay usable. Used to reuse an
    /// encoder pass across several forward-only decodes.
    pub fn truncate(&self, len: usize) {
        self.nodes.borrow_mut().truncate(len);
        self.params.borrow_mut().retain(|_, v| v.0 < len);
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }

    fn push(&self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Ok(Var(nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    /// A constant or input leaf. Leaves receive gradients like any other node.
    pub fn leaf(&self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    /// The tape-local handle for a stored parameter. Repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.borrow().get(&id) {
            return *v;
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param,
        });
        let v = Var(nodes.len() - 1);
        self.params.borrow_mut().insert(id, v);
        v
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.shape().len() != 2 || y.shape().len() != 2 || x.cols() != y.rows() {
                return Err(shape_err(
                    "matmul",
                    format!("{:?} @ {:?}", x.shape(), y.shape()),
                ));
            }
            let (m, k, n) = (x.rows(), x.cols(), y.cols());
            Tensor::new(vec![m, n], matmul_raw(x.data(), y.data(), m, k, n))?
        };
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    fn zip_same(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        if x.shape() != y.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |p, q| p + q)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |p, q| p - q)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |p, q| p * q)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    fn row_broadcast(
        &self,
        a: Var,
        row: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (x, r) = (&nodes[a.0].value, &nodes[row.0].value);
        let c = x.cols();
        if r.numel() != c {
            return Err(shape_err(name, format!("{:?} with row {:?}", x.shape(), r.shape())));
        }
        let data = x
            .data()
            .chunks(c.max(1))
            .flat_map(|chunk| chunk.iter().zip(r.data()).map(|(p, q)| f(*p, *q)))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    /// Adds a row vector (numel = cols) to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, "add_row", |p, q| p + q)?;
        self.push(out, Op::AddRow(a, row), "add_row")
    }

    /// Multiplies every row of `a` elementwise by a row vector.
    pub fn mul_row(&self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, "mul_row", |p, q| p * q)?;
        self.push(out, Op::MulRow(a, row), "mul_row")
    }

    pub fn scale(&self, a: Var, factor: f64) -> Result<Var> {
        let out = self.map(a, |x| x * factor);
        self.push(out, Op::Scale(a, factor), "scale")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let nodes = self.nodes.borrow();
        let x = &nodes[a.0].value;
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| f(*v)).collect())
            .expect("same shape")
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        let out = self.map(a, f64::tanh);
        self.push(out, Op::Tanh(a), "tanh")
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        let out = self.map(a, sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a), "relu")
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let (out, outer, len, inner) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let shape = x.shape();
            if axis >= shape.len() {
                return Err(shape_err("softmax", format!("axis {axis} for {shape:?}")));
            }
            let outer: usize = shape[..axis].iter().product();
            let len = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut out = x.data().to_vec();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let max = (0..len).map(|j| out[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for j in 0..len {
                        let e = (out[idx(j)] - max).exp();
                        out[idx(j)] = e;
                        total += e;
                    }
                    for j in 0..len {
                        out[idx(j)] /= total;
                    }
                }
            }
            (Tensor::new(shape.to_vec(), out)?, outer, len, inner)
        };
        self.push(out, Op::Softmax { x: a, outer, len, inner }, "softmax")
    }

    /// Row-wise softmax of a rank-2 tensor where `allowed[r * cols + c] == false`
    /// entries get weight exactly 0. A row with nothing allowed is all zeros.
    pub fn masked_softmax(&self, a: Var, allowed: Vec<bool>) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if allowed.len() != x.numel() {
                return Err(shape_err(
                    "masked_softmax",
                    format!("mask of {} for {:?}", allowed.len(), x.shape()),
                ));
            }
            let c = x.cols();
            let mut out = vec![0.0; x.numel()];
            for r in 0..x.rows() {
                let row = &x.data()[r * c..(r + 1) * c];
                let ok = &allowed[r * c..(r + 1) * c];
                let max = row
                    .iter()
                    .zip(ok)
                    .filter(|(_, m)| **m)
                    .map(|(v, _)| *v)
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for j in 0..c {
                    if ok[j] {
                        let e = (row[j] - max).exp();
                        out[r * c + j] = e;
                        total += e;
                    }
                }
                for j in 0..c {
                    out[r * c + j] /= total;
                }
            }
            Tensor::new(x.shape().to_vec(), out)?
        };
        self.push(out, Op::MaskedSoftmax(a), "masked_softmax")
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, a: Var, eps: f64) -> Result<Var> {
        let (out, inv_std) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let c = x.cols();
            let mut out = Vec::with_capacity(x.numel());
            let mut inv_std = Vec::with_capacity(x.rows());
            for row in x.data().chunks(c.max(1)) {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                out.extend(row.iter().map(|v| (v - mean) * inv));
                inv_std.push(inv);
            }
            (Tensor::new(x.shape().to_vec(), out)?, inv_std)
        };
        self.push(out, Op::LayerNorm { x: a, inv_std }, "layer_norm")
    }

    /// Selects rows of a `[vocab, dim]` table.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.0].value;
            let (rows, c) = (t.rows(), t.cols());
            let mut data = Vec::with_capacity(ids.len() * c);
            for &id in ids {
                if id >= rows {
                    return Err(TensorError::IndexOutOfRange { index: id, size: rows });
                }
                data.extend_from_slice(t.row_slice(id));
            }
            Tensor::new(vec![ids.len(), c], data)?
        };
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(shape_err("concat", "need at least one part and axis 0 or 1"));
        }
        let (out, sizes) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.0].value).collect();
            let (r0, c0) = (vals[0].rows(), vals[0].cols());
            if axis == 0 {
                if vals.iter().any(|v| v.cols() != c0) {
                    return Err(shape_err("concat", "column counts differ"));
                }
                let rows: usize = vals.iter().map(|v| v.rows()).sum();
                let data = vals.iter().flat_map(|v| v.data().iter().copied()).collect();
                let sizes = vals.iter().map(|v| v.rows()).collect::<Vec<_>>();
                (Tensor::new(vec![rows, c0], data)?, sizes)
            } else {
                if vals.iter().any(|v| v.rows() != r0) {
                    return Err(shape_err("concat", "row counts differ"));
                }
                let cols: usize = vals.iter().map(|v| v.cols()).sum();
                let mut data = Vec::with_capacity(r0 * cols);
                for r in 0..r0 {
                    for v in &vals {
                        data.extend_from_slice(v.row_slice(r));
                    }
                }
                let sizes = vals.iter().map(|v| v.cols()).collect::<Vec<_>>();
                (Tensor::new(vec![r0, cols], data)?, sizes)
            }
        };
        let parts = parts.iter().copied().zip(sizes).collect();
        self.push(out, Op::Concat { parts, axis }, "concat")
    }

    pub fn narrow_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if start + len > x.cols() {
                return Err(shape_err(
                    "narrow_cols",
                    format!("[{start}, {}) of {:?}", start + len, x.shape()),
                ));
            }
            let data = (0..x.rows())
                .flat_map(|r| x.row_slice(r)[start..start + len].iter().copied())
                .collect();
            Tensor::new(vec![x.rows(), len], data)?
        };
        self.push(out, Op::NarrowCols { x: a, start }, "narrow_cols")
    }

    pub fn narrow_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if start + len > x.rows() {
                return Err(shape_err(
                    "narrow_rows",
                    format!("[{start}, {}) of {:?}", start + len, x.shape()),
                ));
            }
            let c = x.cols();
            Tensor::new(vec![len, c], x.data()[start * c..(start + len) * c].to_vec())?
        };
        self.push(out, Op::NarrowRows { x: a, start }, "narrow_rows")
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = self.value(a).transposed();
        self.push(out, Op::Transpose(a), "transpose")
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), "sum")
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[rows, vocab]`. `None` targets are ignored.
    pub fn cross_entropy_with_logits(&self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[logits.0].value;
            let (rows, c) = (x.rows(), x.cols());
            if targets.len() != rows {
                return Err(shape_err(
                    "cross_entropy",
                    format!("{} targets for {rows} rows", targets.len()),
                ));
            }
            let mut probs = vec![0.0; rows * c];
            let mut loss = 0.0;
            for (r, target) in targets.iter().enumerate() {
                let row = x.row_slice(r);
                let lse = log_sum_exp(row);
                for (j, v) in row.iter().enumerate() {
                    probs[r * c + j] = (v - lse).exp();
                }
                if let Some(t) = *target {
                    if t >= c {
                        return Err(TensorError::IndexOutOfRange { index: t, size: c });
                    }
                    loss += lse - row[t];
                }
            }
            (loss, probs)
        };
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Inverted dropout. Identity when `training` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&self, a: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !training || p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(TensorError::InvalidArgument(format!("dropout p={p} must be < 1")));
        }
        let n = self.value(a).numel();
        let keep = 1.0 / (1.0 - p);
        let scale: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = {
            let x = self.value(a);
            let data = x.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        self.push(out, Op::Dropout { x: a, scale }, "dropout")
    }

    /// Row `r` of the result is row `r` of `a` when `take_a[r]`, otherwise of `b`.
    pub fn select_rows(&self, take_a: &[bool], a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.shape() != y.shape() || take_a.len() != x.rows() {
                return Err(shape_err("select_rows", format!("{:?} vs {:?}", x.shape(), y.shape())));
            }
            let data = (0..x.rows())
                .flat_map(|r| {
                    let src = if take_a[r] { x } else { y };
                    src.row_slice(r).iter().copied()
                })
                .collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        self.push(
            out,
            Op::SelectRows {
                a,
                b,
                take_a: take_a.to_vec(),
            },
            "select_rows",
        )
    }

    /// Zeroes the rows where `keep[r]` is false.
    pub fn mask_rows(&self, a: Var, keep: &[bool]) -> Result<Var> {
        let out = {
            let x = self.value(a);
            if keep.len() != x.rows() {
                return Err(shape_err("mask_rows", format!("{} flags for {:?}", keep.len(), x.shape())));
            }
            let c = x.cols();
            let mut data = x.data().to_vec();
            for (r, k) in keep.iter().enumerate() {
                if !k {
                    data[r * c..(r + 1) * c].iter_mut().for_each(|v| *v = 0.0);
                }
            }
            Tensor::new(x.shape().to_vec(), data)?
        };
        self.push(
            out,
            Op::MaskRows {
                x: a,
                keep: keep.to_vec(),
            },
            "mask_rows",
        )
    }

    /// Populates gradients of `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<()> {
        if self.backward_done.get() {
            return Err(TensorError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.0].value.shape().to_vec();
        if nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        self.backward_done.set(true);
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&loss_shape, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            backprop(&nodes, node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`; zeros if unreachable.
    pub fn grad(&self, v: Var) -> Tensor {
        self.grads
            .borrow()
            .get(v.0)
            .and_then(Clone::clone)
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    /// Parameter gradients aligned with `store`. Parameters never touched get zeros.
    pub fn param_grads(&self, store: &ParamStore) -> Grads {
        let params = self.params.borrow();
        let grads = store
            .ids()
            .map(|id| match params.get(&id) {
                Some(v) => self.grad(*v),
                None => Tensor::zeros(store.get(id).shape()),
            })
            .collect();
        Grads::from_vec(grads)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-softmax of one row of logits.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| v - lse).collect()
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn with_data(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("gradient shape matches value")
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |v: Var| &nodes[v.0].value;
    let out = &node.value;
    match &node.op {
        Op::Leaf | Op::Param => {}
        Op::MatMul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let (m, k, n) = (x.rows(), x.cols(), y.cols());
            let ga = matmul_bt(g.data(), y.data(), m, n, k);
            let gb = matmul_at(x.data(), g.data(), m, k, n);
            accumulate(grads, *a, with_data(x, ga));
            accumulate(grads, *b, with_data(y, gb));
        }
        Op::Add(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, g.clone());
            let neg = g.data().iter().map(|v| -v).collect();
            accumulate(grads, *b, with_data(g, neg));
        }
        Op::Mul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let ga = g.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
            let gb = g.data().iter().zip(x.data()).map(|(p, q)| p * q).collect();
            accumulate(grads, *a, with_data(x, ga));
            accumulate(grads, *b, with_data(y, gb));
        }
        Op::AddRow(a, row) => {
            let r = val(*row);
            let c = r.numel();
            let mut gr = vec![0.0; c];
            for chunk in g.data().chunks(c.max(1)) {
                for (acc, v) in gr.iter_mut().zip(chunk) {
                    *acc += v;
                }
            }
            accumulate(grads, *a, g.clone());
            accumulate(grads, *row, with_data(r, gr));
        }
        Op::MulRow(a, row) => {
            let (x, r) = (val(*a), val(*row));
            let c = r.numel();
            let mut ga = Vec::with_capacity(g.numel());
            let mut gr = vec![0.0; c];
            for (gc, xc) in g.data().chunks(c.max(1)).zip(x.data().chunks(c.max(1))) {
                for j in 0..c {
                    ga.push(gc[j] * r.data()[j]);
                    gr[j] += gc[j] * xc[j];
                }
            }
            accumulate(grads, *a, with_data(x, ga));
            accumulate(grads, *row, with_data(r, gr));
        }
        Op::Scale(a, f) => {
            let d = g.data().iter().map(|v| v * f).collect();
            accumulate(grads, *a, with_data(g, d));
        }
        Op::Tanh(a) => {
            let d = g.data().iter().zip(out.data()).map(|(gv, y)| gv * (1.0 - y * y)).collect();
            accumulate(grads, *a, with_data(g, d));
        }
        Op::Sigmoid(a) => {
            let d = g.data().iter().zip(out.data()).map(|(gv, y)| gv * y * (1.0 - y)).collect();
            accumulate(grads, *a, with_data(g, d));
        }
        Op::Relu(a) => {
            let x = val(*a);
            let d = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                .collect();
            accumulate(grads, *a, with_data(g, d));
        }
        Op::Softmax { x, outer, len, inner } => {
            let (y, gd) = (out.data(), g.data());
            let mut d = vec![0.0; y.len()];
            for o in 0..*outer {
                for i in 0..*inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..*len).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                    for j in 0..*len {
                        d[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                    }
                }
            }
            accumulate(grads, *x, with_data(g, d));
        }
        Op::MaskedSoftmax(x) => {
            let c = out.cols();
            let (y, gd) = (out.data(), g.data());
            let mut d = vec![0.0; y.len()];
            for r in 0..out.rows() {
                let s = r * c..(r + 1) * c;
                let dot: f64 = gd[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                for j in s {
                    d[j] = y[j] * (gd[j] - dot);
                }
            }
            accumulate(grads, *x, with_data(g, d));
        }
        Op::LayerNorm { x, inv_std } => {
            let c = out.cols();
            let n = c as f64;
            let mut d = Vec::with_capacity(out.numel());
            for (r, inv) in inv_std.iter().enumerate() {
                let xh = out.row_slice(r);
                let gr = g.row_slice(r);
                let mean_g = gr.iter().sum::<f64>() / n;
                let mean_gx = gr.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
                d.extend(
                    gr.iter()
                        .zip(xh)
                        .map(|(gv, xv)| inv * (gv - mean_g - xv * mean_gx)),
                );
            }
            accumulate(grads, *x, with_data(g, d));
        }
        Op::Gather { table, ids } => {
            let t = val(*table);
            let c = t.cols();
            let mut d = vec![0.0; t.numel()];
            for (r, &id) in ids.iter().enumerate() {
                for (acc, v) in d[id * c..(id + 1) * c].iter_mut().zip(g.row_slice(r)) {
                    *acc += v;
                }
            }
            accumulate(grads, *table, with_data(t, d));
        }
        Op::Concat { parts, axis } => {
            if *axis == 0 {
                let c = g.cols();
                let mut row = 0;
                for (p, rows) in parts {
                    let d = g.data()[row * c..(row + rows) * c].to_vec();
                    accumulate(grads, *p, with_data(val(*p), d));
                    row += rows;
                }
            } else {
                let mut col = 0;
                for (p, cols) in parts {
                    let d = (0..g.rows())
                        .flat_map(|r| g.row_slice(r)[col..col + cols].iter().copied())
                        .collect();
                    accumulate(grads, *p, with_data(val(*p), d));
                    col += cols;
                }
            }
        }
        Op::NarrowCols { x, start } => {
            let src = val(*x);
            let (c, len) = (src.cols(), g.cols());
            let mut d = vec![0.0; src.numel()];
            for r in 0..g.rows() {
                d[r * c + start..r * c + start + len].copy_from_slice(g.row_slice(r));
            }
            accumulate(grads, *x, with_data(src, d));
        }
        Op::NarrowRows { x, start } => {
            let src = val(*x);
            let c = src.cols();
            let mut d = vec![0.0; src.numel()];
            d[start * c..start * c + g.numel()].copy_from_slice(g.data());
            accumulate(grads, *x, with_data(src, d));
        }
        Op::Transpose(a) => {
            let d = g.transposed().into_data();
            accumulate(grads, *a, with_data(val(*a), d));
        }
        Op::Reshape(a) => {
            accumulate(grads, *a, with_data(val(*a), g.data().to_vec()));
        }
        Op::Sum(a) => {
            let x = val(*a);
            accumulate(grads, *a, Tensor::full(x.shape(), g.item()));
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let x = val(*logits);
            let c = x.cols();
            let scale = g.item();
            let mut d = vec![0.0; x.numel()];
            for (r, t) in targets.iter().enumerate() {
                if let Some(t) = t {
                    for j in 0..c {
                        d[r * c + j] = scale * probs[r * c + j];
                    }
                    d[r * c + t] -= scale;
                }
            }
            accumulate(grads, *logits, with_data(x, d));
        }
        Op::Dropout { x, scale } => {
            let d = g.data().iter().zip(scale).map(|(a, b)| a * b).collect();
            accumulate(grads, *x, with_data(g, d));
        }
        Op::SelectRows { a, b, take_a } => {
            let c = g.cols();
            let mut da = vec![0.0; g.numel()];
            let mut db = vec![0.0; g.numel()];
            for (r, t) in take_a.iter().enumerate() {
                let dst = if *t { &mut da } else { &mut db };
                dst[r * c..(r + 1) * c].copy_from_slice(g.row_slice(r));
            }
            accumulate(grads, *a, with_data(g, da));
            accumulate(grads, *b, with_data(g, db));
        }
        Op::MaskRows { x, keep } => {
            let c = g.cols();
            let mut d = g.data().to_vec();
            for (r, k) in keep.iter().enumerate() {
                if !k {
                    d[r * c..(r + 1) * c].iter_mut().for_each(|v| *v = 0.0);
                }
            }
            accumulate(grads, *x, with_data(g, d));
        }
    }
}
