//! Reverse-mode tape over a closed primitive set.
//!
//! Every operation appends one node holding the forward value and enough
//! metadata for its backward rule. Node order is a valid topological order,
//! so one reverse sweep from the loss visits each recorded op exactly once.
//!
//! Broadcasting is deliberately minimal: binary elementwise ops accept equal
//! shapes, or a right operand of shape `[cols]` / `[1, cols]` broadcast over
//! the rows of the left operand. Nothing else.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Watermark for [`Tape::truncate`]; only ids at or below the mark survive.
#[derive(Debug, Clone, Copy)]
pub struct Mark(usize);

enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId, bcast: bool },
    Sub { a: TensorId, b: TensorId, bcast: bool },
    Mul { a: TensorId, b: TensorId, bcast: bool },
    Scale { x: TensorId, c: f64 },
    Sum { x: TensorId },
    Mean { x: TensorId },
    Transpose { x: TensorId },
    Reshape { x: TensorId },
    Concat { parts: Vec<TensorId> },
    Slice { x: TensorId, start: usize, end: usize },
    Softmax { x: TensorId },
    // Per-row statistics are saved at forward time for the backward rule.
    LayerNorm { x: TensorId, inv_std: Vec<f64> },
    Gelu { x: TensorId },
    Tanh { x: TensorId },
    Exp { x: TensorId },
    Sin { x: TensorId },
    Cos { x: TensorId },
    Embedding { table: TensorId, indices: Vec<usize> },
    ScaledGrad { x: TensorId, lambda: f64 },
    StopGrad,
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Computation record: values plus the op that produced each of them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// ── Kernels ──────────────────────────────────────────────────────────────

/// C[m,n] += A[m,k] * B[k,n], row-major. The j-loop vectorizes without
/// reassociating any accumulation chain, so results are bit-stable across
/// optimization levels.
fn mm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += a_ik * *bj;
            }
        }
    }
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

// ── Tape ─────────────────────────────────────────────────────────────────

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn mark(&self) -> Mark {
        Mark(self.nodes.len())
    }

    /// Drop every node recorded after `mark`. Ids handed out since then are
    /// invalidated; grads on surviving nodes are untouched.
    pub fn truncate(&mut self, mark: Mark) {
        self.nodes.truncate(mark.0);
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].value.data
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].value.requires_grad
    }

    /// Copy a node's value off the tape (grad and flag stripped).
    pub fn detach(&self, id: TensorId) -> Tensor {
        Tensor {
            shape: self.nodes[id.0].value.shape.clone(),
            data: self.nodes[id.0].value.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.grad = None;
        }
    }

    /// Stage a tensor as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push_unchecked(value, Op::Leaf)
    }

    /// Stage plain data as a non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push_unchecked(value.requires_grad(false), Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> TensorId {
        self.constant(Tensor::scalar(value))
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { value, op });
        TensorId(self.nodes.len() - 1)
    }

    /// Record an op output; in debug/test builds every produced value is
    /// scanned so a NaN/Inf aborts at its source op.
    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<TensorId> {
        if cfg!(debug_assertions) && !value.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name, ctx: None });
        }
        Ok(self.push_unchecked(value, op))
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].value.requires_grad)
    }

    // ── Primitives ───────────────────────────────────────────────────────

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm_acc(&mut out, self.data(a), self.data(b), m, k, n);
        let rg = self.any_grad(&[a, b]);
        let t = Tensor { shape: vec![m, n], data: out, requires_grad: rg, grad: None };
        self.push("matmul", t, Op::Matmul { a, b })
    }

    fn binary_shapes(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<(usize, usize, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            let cols = *sa.last().unwrap_or(&1);
            let rows = self.data(a).len() / cols.max(1);
            return Ok((rows, cols, false));
        }
        // Row broadcast: rhs [cols] or [1, cols] against lhs [.., cols].
        let cols = *sa.last().unwrap_or(&0);
        let b_is_row = sb == [cols] || sb == [1, cols];
        if !sa.is_empty() && cols > 0 && b_is_row {
            return Ok((self.data(a).len() / cols, cols, true));
        }
        Err(Error::ShapeMismatch { op, lhs: sa.to_vec(), rhs: sb.to_vec() })
    }

    fn elementwise_binary(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(TensorId, TensorId, bool) -> Op,
    ) -> Result<TensorId> {
        let (rows, cols, bcast) = self.binary_shapes(op_name, a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(da.len());
        if bcast {
            for r in 0..rows {
                for c in 0..cols {
                    out.push(f(da[r * cols + c], db[c]));
                }
            }
        } else {
            out.extend(da.iter().zip(db).map(|(x, y)| f(*x, *y)));
        }
        let rg = self.any_grad(&[a, b]);
        let t = Tensor { shape: self.shape(a).to_vec(), data: out, requires_grad: rg, grad: None };
        self.push(op_name, t, make(a, b, bcast))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_binary("add", a, b, |x, y| x + y, |a, b, bcast| Op::Add { a, b, bcast })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_binary("sub", a, b, |x, y| x - y, |a, b, bcast| Op::Sub { a, b, bcast })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_binary("mul", a, b, |x, y| x * y, |a, b, bcast| Op::Mul { a, b, bcast })
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let node = &self.nodes[x.0].value;
        let t = Tensor {
            shape: node.shape.clone(),
            data: node.data.iter().map(|v| v * c).collect(),
            requires_grad: node.requires_grad,
            grad: None,
        };
        self.push("scale", t, Op::Scale { x, c })
    }

    /// Full reduction to a `[1]` scalar.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let node = &self.nodes[x.0].value;
        let s: f64 = node.data.iter().sum();
        let t = Tensor { shape: vec![1], data: vec![s], requires_grad: node.requires_grad, grad: None };
        self.push("sum", t, Op::Sum { x })
    }

    /// Full mean to a `[1]` scalar.
    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        let node = &self.nodes[x.0].value;
        if node.data.is_empty() {
            return Err(Error::InvalidShape { op: "mean", msg: "empty tensor".into() });
        }
        let s: f64 = node.data.iter().sum();
        let m = s / node.data.len() as f64;
        let t = Tensor { shape: vec![1], data: vec![m], requires_grad: node.requires_grad, grad: None };
        self.push("mean", t, Op::Mean { x })
    }

    /// Transpose of the last two (and only) dims of a 2-D tensor.
    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::InvalidShape { op: "transpose", msg: format!("expected 2-D, got {s:?}") });
        }
        let (r, c) = (s[0], s[1]);
        let data = transpose_raw(self.data(x), r, c);
        let rg = self.requires_grad(x);
        let t = Tensor { shape: vec![c, r], data, requires_grad: rg, grad: None };
        self.push("transpose", t, Op::Transpose { x })
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                msg: format!("cannot view {:?} as {:?}", self.shape(x), shape),
            });
        }
        let node = &self.nodes[x.0].value;
        let t = Tensor {
            shape: shape.to_vec(),
            data: node.data.clone(),
            requires_grad: node.requires_grad,
            grad: None,
        };
        self.push("reshape", t, Op::Reshape { x })
    }

    /// Concatenate along the last dim; all leading dims must agree.
    pub fn concat_lastdim(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::InvalidShape { op: "concat_lastdim", msg: "no inputs".into() });
        }
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let mut cols = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_lastdim",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            cols += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let pc = *self.shape(p).last().unwrap();
            let pd = self.data(p);
            for r in 0..rows {
                out[r * cols + offset..r * cols + offset + pc]
                    .copy_from_slice(&pd[r * pc..(r + 1) * pc]);
            }
            offset += pc;
        }
        let mut shape = lead;
        shape.push(cols);
        let rg = self.any_grad(parts);
        let t = Tensor { shape, data: out, requires_grad: rg, grad: None };
        self.push("concat_lastdim", t, Op::Concat { parts: parts.to_vec() })
    }

    /// Columns `start..end` along the last dim.
    pub fn slice_lastdim(&mut self, x: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        let cols = *s.last().ok_or_else(|| Error::InvalidShape {
            op: "slice_lastdim",
            msg: "0-D tensor".into(),
        })?;
        if start >= end || end > cols {
            return Err(Error::InvalidShape {
                op: "slice_lastdim",
                msg: format!("range {start}..{end} out of 0..{cols}"),
            });
        }
        let rows = self.data(x).len() / cols;
        let width = end - start;
        let xd = self.data(x);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&xd[r * cols + start..r * cols + end]);
        }
        let mut shape = s.clone();
        *shape.last_mut().unwrap() = width;
        let rg = self.requires_grad(x);
        let t = Tensor { shape, data: out, requires_grad: rg, grad: None };
        self.push("slice_lastdim", t, Op::Slice { x, start, end })
    }

    /// Numerically guarded softmax over the last dim.
    pub fn softmax_lastdim(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        let cols = *s.last().ok_or_else(|| Error::InvalidShape {
            op: "softmax_lastdim",
            msg: "0-D tensor".into(),
        })?;
        let xd = self.data(x);
        let rows = xd.len() / cols;
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut z = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - m).exp();
                z += *d;
            }
            for d in dst.iter_mut() {
                *d /= z;
            }
        }
        let rg = self.requires_grad(x);
        let t = Tensor { shape: s, data: out, requires_grad: rg, grad: None };
        self.push("softmax_lastdim", t, Op::Softmax { x })
    }

    /// Per-row layer norm over the last dim, no affine part.
    pub fn layer_norm(&mut self, x: TensorId, eps: f64) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        let cols = *s.last().ok_or_else(|| Error::InvalidShape {
            op: "layer_norm",
            msg: "0-D tensor".into(),
        })?;
        let xd = self.data(x);
        let rows = xd.len() / cols;
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (d, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *d = (v - mean) * is;
            }
        }
        let rg = self.requires_grad(x);
        let t = Tensor { shape: s, data: out, requires_grad: rg, grad: None };
        self.push("layer_norm", t, Op::LayerNorm { x, inv_std })
    }

    fn unary(
        &mut self,
        op_name: &'static str,
        x: TensorId,
        f: impl Fn(f64) -> f64,
        make: impl Fn(TensorId) -> Op,
    ) -> Result<TensorId> {
        let node = &self.nodes[x.0].value;
        let t = Tensor {
            shape: node.shape.clone(),
            data: node.data.iter().map(|v| f(*v)).collect(),
            requires_grad: node.requires_grad,
            grad: None,
        };
        self.push(op_name, t, make(x))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("gelu", x, gelu_fwd, |x| Op::Gelu { x })
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("tanh", x, f64::tanh, |x| Op::Tanh { x })
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("exp", x, f64::exp, |x| Op::Exp { x })
    }

    pub fn sin(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("sin", x, f64::sin, |x| Op::Sin { x })
    }

    pub fn cos(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("cos", x, f64::cos, |x| Op::Cos { x })
    }

    /// Row gather: `out[i, :] = table[indices[i], :]`. Serves embedding
    /// lookup and duration expansion; backward scatter-adds into the table.
    pub fn embedding_lookup(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op: "embedding_lookup",
                msg: format!("table must be 2-D, got {s:?}"),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        if indices.is_empty() {
            return Err(Error::InvalidShape { op: "embedding_lookup", msg: "empty index list".into() });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidShape {
                op: "embedding_lookup",
                msg: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&td[i * cols..(i + 1) * cols]);
        }
        let rg = self.requires_grad(table);
        let t = Tensor { shape: vec![indices.len(), cols], data: out, requires_grad: rg, grad: None };
        self.push("embedding_lookup", t, Op::Embedding { table, indices: indices.to_vec() })
    }

    /// Identity forward; backward multiplies the incoming gradient by
    /// `lambda`. `lambda * x + (1 - lambda) * stop_gradient(x)` as one op.
    pub fn scaled_gradient(&mut self, x: TensorId, lambda: f64) -> Result<TensorId> {
        let node = &self.nodes[x.0].value;
        let t = Tensor {
            shape: node.shape.clone(),
            data: node.data.clone(),
            requires_grad: node.requires_grad,
            grad: None,
        };
        self.push("scaled_gradient", t, Op::ScaledGrad { x, lambda })
    }

    /// Identity forward; the output is a constant for backward purposes.
    pub fn stop_gradient(&mut self, x: TensorId) -> Result<TensorId> {
        let node = &self.nodes[x.0].value;
        let t = Tensor {
            shape: node.shape.clone(),
            data: node.data.clone(),
            requires_grad: false,
            grad: None,
        };
        self.push("stop_gradient", t, Op::StopGrad)
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate into the
    /// `grad` buffer of every node with `requires_grad`, so repeated calls
    /// without [`Tape::zero_grads`] sum their contributions.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.data(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        scratch[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].value.requires_grad {
                continue;
            }
            let Some(g) = scratch[idx].take() else { continue };
            self.propagate(idx, &g, &mut scratch);
            self.nodes[idx].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn seed<'a>(
        scratch: &'a mut [Option<Vec<f64>>],
        nodes: &[Node],
        id: TensorId,
    ) -> Option<&'a mut Vec<f64>> {
        if !nodes[id.0].value.requires_grad {
            return None;
        }
        Some(scratch[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.data.len()]))
    }

    fn propagate(&self, idx: usize, g: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        // Backward rules read node values and write only into scratch.
        let nodes = &self.nodes;
        macro_rules! into {
            ($id:expr, $f:expr) => {
                if let Some(dst) = Self::seed(scratch, nodes, $id) {
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(dst);
                }
            };
        }
        // `op` is only read; take a raw copy of needed metadata via match.
        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::Matmul { a, b } => {
                let (m, k) = (nodes[a.0].value.shape[0], nodes[a.0].value.shape[1]);
                let n = nodes[b.0].value.shape[1];
                if nodes[a.0].value.requires_grad {
                    // dA = G * B^T
                    let bt = transpose_raw(&nodes[b.0].value.data, k, n);
                    let mut da = vec![0.0; m * k];
                    mm_acc(&mut da, g, &bt, m, n, k);
                    into!(a, |dst: &mut Vec<f64>| add_into(dst, &da));
                }
                if nodes[b.0].value.requires_grad {
                    // dB = A^T * G
                    let at = transpose_raw(&nodes[a.0].value.data, m, k);
                    let mut db = vec![0.0; k * n];
                    mm_acc(&mut db, &at, g, k, m, n);
                    into!(b, |dst: &mut Vec<f64>| add_into(dst, &db));
                }
            }
            &Op::Add { a, b, bcast } => {
                into!(a, |dst: &mut Vec<f64>| add_into(dst, g));
                into!(b, |dst: &mut Vec<f64>| reduce_rows_into(dst, g, 1.0, bcast));
            }
            &Op::Sub { a, b, bcast } => {
                into!(a, |dst: &mut Vec<f64>| add_into(dst, g));
                into!(b, |dst: &mut Vec<f64>| reduce_rows_into(dst, g, -1.0, bcast));
            }
            &Op::Mul { a, b, bcast } => {
                let cols = nodes[b.0].value.data.len();
                if nodes[a.0].value.requires_grad {
                    let bd = &nodes[b.0].value.data;
                    let da: Vec<f64> = if bcast {
                        g.iter().enumerate().map(|(i, gi)| gi * bd[i % cols]).collect()
                    } else {
                        g.iter().zip(bd).map(|(gi, bi)| gi * bi).collect()
                    };
                    into!(a, |dst: &mut Vec<f64>| add_into(dst, &da));
                }
                if nodes[b.0].value.requires_grad {
                    let ad = &nodes[a.0].value.data;
                    let prod: Vec<f64> = g.iter().zip(ad).map(|(gi, ai)| gi * ai).collect();
                    into!(b, |dst: &mut Vec<f64>| reduce_rows_into(dst, &prod, 1.0, bcast));
                }
            }
            &Op::Scale { x, c } => {
                into!(x, |dst: &mut Vec<f64>| {
                    for (d, gi) in dst.iter_mut().zip(g) {
                        *d += c * gi;
                    }
                });
            }
            &Op::Sum { x } => {
                let g0 = g[0];
                into!(x, |dst: &mut Vec<f64>| {
                    for d in dst.iter_mut() {
                        *d += g0;
                    }
                });
            }
            &Op::Mean { x } => {
                let n = nodes[x.0].value.data.len() as f64;
                let g0 = g[0] / n;
                into!(x, |dst: &mut Vec<f64>| {
                    for d in dst.iter_mut() {
                        *d += g0;
                    }
                });
            }
            &Op::Transpose { x } => {
                let (r, c) = (nodes[idx].value.shape[0], nodes[idx].value.shape[1]);
                let gt = transpose_raw(g, r, c);
                into!(x, |dst: &mut Vec<f64>| add_into(dst, &gt));
            }
            &Op::Reshape { x } => {
                into!(x, |dst: &mut Vec<f64>| add_into(dst, g));
            }
            Op::Concat { parts } => {
                let parts = parts.clone();
                let cols: usize = *nodes[idx].value.shape.last().unwrap();
                let rows = nodes[idx].value.data.len() / cols;
                let mut offset = 0;
                for p in parts {
                    let pc = *nodes[p.0].value.shape.last().unwrap();
                    if nodes[p.0].value.requires_grad {
                        let mut gp = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * cols + offset..r * cols + offset + pc]);
                        }
                        into!(p, |dst: &mut Vec<f64>| add_into(dst, &gp));
                    }
                    offset += pc;
                }
            }
            &Op::Slice { x, start, end } => {
                let cols: usize = *nodes[x.0].value.shape.last().unwrap();
                let width = end - start;
                let rows = nodes[x.0].value.data.len() / cols;
                into!(x, |dst: &mut Vec<f64>| {
                    for r in 0..rows {
                        for j in 0..width {
                            dst[r * cols + start + j] += g[r * width + j];
                        }
                    }
                });
            }
            &Op::Softmax { x } => {
                let y = &nodes[idx].value.data;
                let cols = *nodes[idx].value.shape.last().unwrap();
                let rows = y.len() / cols;
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for ((d, yi), gi) in dx[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - dot);
                    }
                }
                into!(x, |dst: &mut Vec<f64>| add_into(dst, &dx));
            }
            Op::LayerNorm { x, inv_std } => {
                let x = *x;
                let inv_std = inv_std.clone();
                let y = &nodes[idx].value.data;
                let cols = *nodes[idx].value.shape.last().unwrap();
                let rows = y.len() / cols;
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let gm = gr.iter().sum::<f64>() / cols as f64;
                    let gym = gr.iter().zip(yr).map(|(gi, yi)| gi * yi).sum::<f64>() / cols as f64;
                    let is = inv_std[r];
                    for ((d, yi), gi) in dx[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
                        *d = is * (gi - gm - yi * gym);
                    }
                }
                into!(x, |dst: &mut Vec<f64>| add_into(dst, &dx));
            }
            &Op::Gelu { x } => {
                let xd = &nodes[x.0].value.data;
                let dx: Vec<f64> = g.iter().zip(xd).map(|(gi, xi)| gi * gelu_bwd(*xi)).collect();
                into!(x, |dst: &mut Vec<f64>| add_into(dst, &dx));
            }
            &Op::Tanh { x } => {
                let y = &nodes[idx].value.data;
                let dx: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
                into!(x, |dst: &mut Vec<f64>| add_into(dst, &dx));
            }
            &Op::Exp { x } => {
                let y = &nodes[idx].value.data;
                let dx: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| gi * yi).collect();
                into!(x, |dst: &mut Vec<f64>| add_into(dst, &dx));
            }
            &Op::Sin { x } => {
                let xd = &nodes[x.0].value.data;
                let dx: Vec<f64> = g.iter().zip(xd).map(|(gi, xi)| gi * xi.cos()).collect();
                into!(x, |dst: &mut Vec<f64>| add_into(dst, &dx));
            }
            &Op::Cos { x } => {
                let xd = &nodes[x.0].value.data;
                let dx: Vec<f64> = g.iter().zip(xd).map(|(gi, xi)| -gi * xi.sin()).collect();
                into!(x, |dst: &mut Vec<f64>| add_into(dst, &dx));
            }
            Op::Embedding { table, indices } => {
                let table = *table;
                let indices = indices.clone();
                let cols = nodes[table.0].value.shape[1];
                into!(table, |dst: &mut Vec<f64>| {
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..cols {
                            dst[i * cols + j] += g[r * cols + j];
                        }
                    }
                });
            }
            &Op::ScaledGrad { x, lambda } => {
                into!(x, |dst: &mut Vec<f64>| {
                    for (d, gi) in dst.iter_mut().zip(g) {
                        *d += lambda * gi;
                    }
                });
            }
            // Output carries requires_grad = false, so this arm is never
            // reached; kept for exhaustiveness.
            Op::StopGrad => {}
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Accumulate `sign * g` into `dst`, summing over rows when `dst` is a
/// broadcast row vector.
fn reduce_rows_into(dst: &mut [f64], g: &[f64], sign: f64, bcast: bool) {
    if !bcast {
        for (d, gi) in dst.iter_mut().zip(g) {
            *d += sign * gi;
        }
        return;
    }
    let cols = dst.len();
    for (i, gi) in g.iter().enumerate() {
        dst[i % cols] += sign * gi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(&[rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_is_exact() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 2, &[3.0, -1.5, 0.25, 7.0]));
        let eye = tape.leaf(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let out = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.data(out), tape.data(a));
    }

    #[test]
    fn matmul_2x2_times_2x1() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t2(2, 1, &[5.0, 6.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(out), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 3, &[0.0; 6]));
        let b = tape.leaf(t2(2, 2, &[0.0; 4]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn grad_of_sum_matmul_wrt_lhs_is_ones_times_bt() {
        // d/dA sum(A*B) = ones(m,n) * B^T
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 3, &[0.5, -1.0, 2.0, 0.0, 1.5, -0.5]).requires_grad(true));
        let b_data = [1.0, -2.0, 0.5, 3.0, 2.0, -1.0];
        let b = tape.leaf(t2(3, 2, &b_data));
        let out = tape.matmul(a, b).unwrap();
        let loss = tape.sum(out).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(a).unwrap();
        // Row sums of B, replicated per row of A.
        let expect = [-1.0, 3.5, 1.0, -1.0, 3.5, 1.0];
        for (gi, ei) in g.iter().zip(&expect) {
            assert!((gi - ei).abs() < 1e-12, "{g:?}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_resist_overflow() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(2, 3, &[1000.0, 1001.0, 1002.0, -1000.0, 0.0, 1000.0]));
        let y = tape.softmax_lastdim(x).unwrap();
        let d = tape.data(y);
        assert!(d.iter().all(|v| v.is_finite()));
        for r in 0..2 {
            let s: f64 = d[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 4, &[0.3, -1.2, 2.0, 0.7]));
        let shifted = tape.leaf(t2(1, 4, &[0.3 + 5.0, -1.2 + 5.0, 2.0 + 5.0, 0.7 + 5.0]));
        let y0 = tape.softmax_lastdim(x).unwrap();
        let y1 = tape.softmax_lastdim(shifted).unwrap();
        for (a, b) in tape.data(y0).iter().zip(tape.data(y1)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 4, &[3.0, 3.0, 3.0, 3.0]));
        let y = tape.layer_norm(x, 1e-6).unwrap();
        for v in tape.data(y) {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_plus_minus_one_maps_to_itself() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 2, &[1.0, -1.0]));
        let y = tape.layer_norm(x, 1e-6).unwrap();
        let d = tape.data(y);
        assert!((d[0] - 1.0).abs() < 1e-6 && (d[1] + 1.0).abs() < 1e-6, "{d:?}");
    }

    #[test]
    fn layer_norm_output_has_zero_mean_and_eps_shrunk_variance() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let eps = 1e-6;
        let mean_in = x.data.iter().sum::<f64>() / 8.0;
        let var_in = x.data.iter().map(|v| (v - mean_in) * (v - mean_in)).sum::<f64>() / 8.0;

        let mut tape = Tape::new();
        let id = tape.leaf(x);
        let y = tape.layer_norm(id, eps).unwrap();
        let d = tape.data(y);
        let mean = d.iter().sum::<f64>() / 8.0;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12, "mean {mean}");
        // Output variance is var / (var + eps), slightly below 1.
        assert!((var - var_in / (var_in + eps)).abs() < 1e-10, "var {var}");
        assert!(var < 1.0);
    }

    #[test]
    fn scaled_gradient_passes_lambda_exactly() {
        // Same graph three times with lambda 1.0 / 0.0 / 0.1; the input
        // gradient must be exactly lambda * the unscaled gradient.
        let run = |lambda: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(t2(2, 2, &[0.4, -0.7, 1.3, 0.9]).requires_grad(true));
            let s = tape.scaled_gradient(x, lambda).unwrap();
            let sq = tape.mul(s, s).unwrap();
            let loss = tape.sum(sq).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let base = run(1.0);
        let zero = run(0.0);
        let tenth = run(0.1);
        assert!(zero.iter().all(|g| *g == 0.0));
        for ((b, z), t) in base.iter().zip(&zero).zip(&tenth) {
            let _ = z;
            assert_eq!(*t, 0.1 * b, "0.1 scaling must be a single exact multiply");
        }
    }

    #[test]
    fn stop_gradient_cuts_the_graph() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 3, &[1.0, 2.0, 3.0]).requires_grad(true));
        let frozen = tape.stop_gradient(x).unwrap();
        let prod = tape.mul(x, frozen).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        // d/dx sum(x * sg(x)) = sg(x), not 2x.
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 3, &[1.0, 2.0, 3.0]).requires_grad(true));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn doubled_loss_doubles_gradients_bitwise() {
        let grads = |factor: Option<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(t2(2, 2, &[0.3, -1.1, 0.8, 2.2]).requires_grad(true));
            let w = tape.leaf(t2(2, 2, &[1.5, 0.2, -0.4, 0.9]));
            let y = tape.matmul(x, w).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let mut loss = tape.mean(sq).unwrap();
            if let Some(f) = factor {
                loss = tape.scale(loss, f).unwrap();
            }
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let g1 = grads(None);
        let g2 = grads(Some(2.0));
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b, "doubling by an exact power of two is bit-exact");
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 2, &[0.5, -2.0]).requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        let g1 = tape.grad(x).unwrap().to_vec();
        tape.backward(loss).unwrap();
        let g2 = tape.grad(x).unwrap().to_vec();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_is_linear_over_losses() {
        let build = |tape: &mut Tape| -> (TensorId, TensorId, TensorId) {
            let x = tape.leaf(t2(1, 3, &[0.7, -0.2, 1.1]).requires_grad(true));
            let sq = tape.mul(x, x).unwrap();
            let l1 = tape.sum(sq).unwrap();
            let l2 = tape.mean(x).unwrap();
            (x, l1, l2)
        };
        // grad(a*L1 + b*L2)
        let mut tape = Tape::new();
        let (x, l1, l2) = build(&mut tape);
        let a_l1 = tape.scale(l1, 3.0).unwrap();
        let b_l2 = tape.scale(l2, -2.0).unwrap();
        let combined = tape.add(a_l1, b_l2).unwrap();
        tape.backward(combined).unwrap();
        let g_combined = tape.grad(x).unwrap().to_vec();

        // a*grad(L1) + b*grad(L2)
        let mut tape = Tape::new();
        let (x, l1, _) = build(&mut tape);
        tape.backward(l1).unwrap();
        let g1 = tape.grad(x).unwrap().to_vec();
        let mut tape = Tape::new();
        let (x, _, l2) = build(&mut tape);
        tape.backward(l2).unwrap();
        let g2 = tape.grad(x).unwrap().to_vec();

        for ((gc, a), b) in g_combined.iter().zip(&g1).zip(&g2) {
            assert!((gc - (3.0 * a - 2.0 * b)).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_only_reruns_are_bit_exact() {
        let run = || -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(t2(2, 3, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
            let w = tape.leaf(t2(3, 2, &[1.0, -1.0, 0.5, 0.25, -0.75, 2.0]));
            let h = tape.matmul(x, w).unwrap();
            let a = tape.gelu(h).unwrap();
            let s = tape.softmax_lastdim(a).unwrap();
            tape.data(s).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]).requires_grad(true));
        let b = tape.leaf(t2(2, 3, &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).requires_grad(true));
        let cat = tape.concat_lastdim(&[a, b]).unwrap();
        assert_eq!(tape.shape(cat), &[2, 5]);
        let back = tape.slice_lastdim(cat, 2, 5).unwrap();
        assert_eq!(tape.data(back), tape.data(b));
        let loss = tape.sum(back).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(a).is_none() || tape.grad(a).unwrap().iter().all(|g| *g == 0.0));
        assert!(tape.grad(b).unwrap().iter().all(|g| *g == 1.0));
    }

    #[test]
    fn embedding_lookup_copies_rows_bit_exactly() {
        let mut tape = Tape::new();
        let table = tape.leaf(t2(3, 2, &[1.0, -2.0, 0.5, 0.25, -0.125, 8.0]).requires_grad(true));
        let out = tape.embedding_lookup(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.data(out), &[-0.125, 8.0, 1.0, -2.0, -0.125, 8.0]);
        let loss = tape.sum(out).unwrap();
        tape.backward(loss).unwrap();
        // Row 2 referenced twice, row 0 once, row 1 never.
        assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn broadcast_add_reduces_grad_over_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(3, 2, &[0.0; 6]));
        let bias = tape.leaf(Tensor::new(&[2], vec![1.0, -1.0]).unwrap().requires_grad(true));
        let y = tape.add(x, bias).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(bias).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn truncate_discards_later_nodes_only() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 2, &[1.0, 2.0]));
        let mark = tape.mark();
        let _y = tape.scale(x, 2.0).unwrap();
        let _z = tape.scale(x, 3.0).unwrap();
        assert_eq!(tape.len(), 3);
        tape.truncate(mark);
        assert_eq!(tape.len(), 1);
        assert_eq!(tape.data(x), &[1.0, 2.0]);
    }

    #[cfg(debug_assertions)]
    #[test]
    fn non_finite_forward_is_rejected_in_debug_builds() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 2, &[710.0, 0.0]));
        let err = tape.exp(x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "exp", .. }));
    }
}
