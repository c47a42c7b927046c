//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every operation appends a node whose inputs already live on the tape, so
//! node order is a topological order and `backward` is a single reverse
//! sweep. Values are reference counted: binding a parameter as a leaf does
//! not copy its storage.

use std::sync::Arc;

use crate::tensor::{
    dot, matmul_into, matmul_nt_into, matmul_tn_acc, softmax_rows_into, IndexMatrix, Result,
    Tensor, TensorError, MASK_THRESHOLD,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Exp(Var),
    GatherRows {
        table: Var,
        indices: Arc<[usize]>,
    },
    GatherCols {
        src: Var,
        index: Arc<IndexMatrix>,
        select: Option<Arc<[usize]>>,
        transposed: bool,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    RowSum(Var),
    Reshape(Var),
    Sum(Var),
    Pick {
        x: Var,
        at: Vec<(usize, usize)>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation plus gradient slots.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::DimensionMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: impl Into<Arc<Tensor>>) -> Var {
        self.push(t.into(), Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn param(&mut self, t: impl Into<Arc<Tensor>>) -> Var {
        self.push(t.into(), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient populated by the last [`backward`](Self::backward), if any
    /// reached this node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad shape"))
    }

    fn push(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn emit(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Arc::new(value), op, rg)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn arc(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    // ------------------------------------------------------------------ ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul(self.val(b))?;
        Ok(self.emit(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul_nt(self.val(b))?;
        Ok(self.emit(out, Op::MatMulNt(a, b), &[a, b]))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.emit(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.emit(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.emit(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.val(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        self.emit(out, Op::Scale(a, c), &[a])
    }

    fn row_broadcast(
        &self,
        op: &'static str,
        m: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (tm, tr) = (self.val(m), self.val(row));
        let w = tm.last_dim();
        if tr.rank() != 1 || tr.len() != w || tm.rank() == 0 {
            return Err(mismatch(op, tm, tr));
        }
        let rv = tr.data();
        let data = tm
            .data()
            .chunks(w)
            .flat_map(|r| r.iter().zip(rv).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(tm.shape().to_vec(), data)
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", m, row, |x, y| x + y)?;
        Ok(self.emit(out, Op::AddRow(m, row), &[m, row]))
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", m, row, |x, y| x * y)?;
        Ok(self.emit(out, Op::MulRow(m, row), &[m, row]))
    }

    /// Row-wise softmax; entries at or below `-1e29` are masked to exactly 0.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        let cols = t.last_dim();
        let mut out = vec![0.0; t.len()];
        softmax_rows_into(t.data(), cols, &mut out)?;
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.emit(out, Op::SoftmaxRows(x), &[x]))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let cols = t.last_dim();
        let mut out = Vec::with_capacity(t.len());
        for r in t.data().chunks(cols) {
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(r.iter().map(|v| v - lse));
        }
        let out = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.emit(out, Op::LogSoftmaxRows(x), &[x])
    }

    /// Normalises each innermost vector to zero mean and unit (population)
    /// variance, then applies `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.val(x), self.val(gain), self.val(bias));
        let d = tx.last_dim();
        if tg.shape() != [d] {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.shape() != [d] {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let rows = tx.len() / d.max(1);
        let mut xhat = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.len());
        for r in tx.data().chunks(d) {
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let denom = (var + eps).sqrt();
            let is = if denom > 0.0 { 1.0 / denom } else { 0.0 };
            inv_std.push(is);
            for ((&v, &g), &b) in r.iter().zip(tg.data()).zip(tb.data()) {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(g * h + b);
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.emit(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&v| gelu(v)).collect(),
        )
        .expect("same shape");
        self.emit(out, Op::Gelu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|v| v.exp()).collect(),
        )
        .expect("same shape");
        self.emit(out, Op::Exp(x), &[x])
    }

    /// `out[r, :] = table[indices[r], :]`; backward scatter-adds.
    pub fn gather_rows(&mut self, table: Var, indices: impl Into<Arc<[usize]>>) -> Result<Var> {
        let indices: Arc<[usize]> = indices.into();
        let t = self.val(table);
        let (r, c) = t.dims2("gather_rows")?;
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices.iter() {
            if i >= r {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: r,
                });
            }
            out.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![indices.len(), c], out)?;
        Ok(self.emit(out, Op::GatherRows { table, indices }, &[table]))
    }

    /// Element gather along columns, driven by an index matrix.
    ///
    /// With `q(r) = select[r]` (or `r` when `select` is `None`):
    /// * direct: `out[r, c] = src[r, index[q(r), c]]`, output `nq × index.cols`
    /// * transposed: `out[r, c] = src[c, index[c, q(r)]]`, output `nq × index.rows`
    ///
    /// The transposed form reads the same index matrix column-wise, so one
    /// matrix serves both the `δ(i,j)` and `δ(j,i)` lookups.
    pub fn gather_cols(
        &mut self,
        src: Var,
        index: Arc<IndexMatrix>,
        select: Option<Arc<[usize]>>,
        transposed: bool,
    ) -> Result<Var> {
        let out = gather_cols_forward(self.val(src), &index, select.as_deref(), transposed)?;
        Ok(self.emit(
            out,
            Op::GatherCols {
                src,
                index,
                select,
                transposed,
            },
            &[src],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let out = self.val(x).slice_cols(start, width)?;
        Ok(self.emit(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Rank {
            op: "concat_cols",
            expected: 2,
            shape: vec![],
        })?;
        let (rows, _) = self.val(first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.val(p).dims2("concat_cols")?;
            if r != rows {
                return Err(mismatch("concat_cols", self.val(first), self.val(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.val(p).row(i));
            }
        }
        let out = Tensor::new(vec![rows, total], out)?;
        Ok(self.emit(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Sum over the innermost axis: `[r × c] → [r]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        let (_, c) = t.dims2("row_sum")?;
        let data: Vec<f64> = t.data().chunks(c).map(|r| r.iter().sum()).collect();
        let out = Tensor::vector(data);
        Ok(self.emit(out, Op::RowSum(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.val(x).clone().reshaped(shape)?;
        Ok(self.emit(out, Op::Reshape(x), &[x]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).data().iter().sum();
        self.emit(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Picks `x[r, c]` for each `(r, c)`, giving a vector.
    pub fn pick(&mut self, x: Var, at: Vec<(usize, usize)>) -> Result<Var> {
        let t = self.val(x);
        let (rows, cols) = t.dims2("pick")?;
        let mut out = Vec::with_capacity(at.len());
        for &(r, c) in &at {
            if r >= rows || c >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick",
                    index: if r >= rows { r } else { c },
                    bound: if r >= rows { rows } else { cols },
                });
            }
            out.push(t.at(r, c));
        }
        Ok(self.emit(Tensor::vector(out), Op::Pick { x, at }, &[x]))
    }

    // ------------------------------------------------------------- backward

    /// Populates gradients of `loss` with respect to every differentiable
    /// node reachable from it. Earlier gradients are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.val(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn acc_add(&mut self, v: Var, g: &[f64], scale: f64) {
        self.acc(v, |s| {
            for (a, &b) in s.iter_mut().zip(g) {
                *a += scale * b;
            }
        });
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        let node_value = self.nodes[id].value.clone();
        // Ops hold Vars and small metadata; temporarily swap the op out to
        // keep the borrow checker out of the match arms.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.arc(*a), self.arc(*b));
                let (m, p) = (ta.shape()[0], ta.shape()[1]);
                let q = tb.shape()[1];
                if self.requires_grad(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * p];
                    matmul_nt_into(g, tb.data(), m, q, p, &mut da);
                    self.acc_add(*a, &da, 1.0);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · G
                    self.acc(*b, |s| matmul_tn_acc(ta.data(), g, m, p, q, s));
                }
            }
            Op::MatMulNt(a, b) => {
                // out = A · Bᵀ with A: m×p, B: q×p
                let (ta, tb) = (self.arc(*a), self.arc(*b));
                let (m, p) = (ta.shape()[0], ta.shape()[1]);
                let q = tb.shape()[0];
                if self.requires_grad(*a) {
                    // dA = G · B
                    let mut da = vec![0.0; m * p];
                    matmul_into(g, tb.data(), m, q, p, &mut da);
                    self.acc_add(*a, &da, 1.0);
                }
                if self.requires_grad(*b) {
                    // dB = Gᵀ · A
                    self.acc(*b, |s| matmul_tn_acc(g, ta.data(), m, q, p, s));
                }
            }
            Op::Add(a, b) => {
                self.acc_add(*a, g, 1.0);
                self.acc_add(*b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_add(*a, g, 1.0);
                self.acc_add(*b, g, -1.0);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.arc(*a), self.arc(*b));
                self.acc(*a, |s| {
                    for ((x, &gv), &bv) in s.iter_mut().zip(g).zip(tb.data()) {
                        *x += gv * bv;
                    }
                });
                self.acc(*b, |s| {
                    for ((x, &gv), &av) in s.iter_mut().zip(g).zip(ta.data()) {
                        *x += gv * av;
                    }
                });
            }
            Op::Scale(a, c) => self.acc_add(*a, g, *c),
            Op::AddRow(m, row) => {
                self.acc_add(*m, g, 1.0);
                let w = self.val(*row).len();
                self.acc(*row, |s| {
                    for gr in g.chunks(w) {
                        for (x, &gv) in s.iter_mut().zip(gr) {
                            *x += gv;
                        }
                    }
                });
            }
            Op::MulRow(m, row) => {
                let (tm, tr) = (self.arc(*m), self.arc(*row));
                let w = tr.len();
                self.acc(*m, |s| {
                    for (sr, gr) in s.chunks_mut(w).zip(g.chunks(w)) {
                        for ((x, &gv), &rv) in sr.iter_mut().zip(gr).zip(tr.data()) {
                            *x += gv * rv;
                        }
                    }
                });
                self.acc(*row, |s| {
                    for (mr, gr) in tm.data().chunks(w).zip(g.chunks(w)) {
                        for ((x, &gv), &mv) in s.iter_mut().zip(gr).zip(mr) {
                            *x += gv * mv;
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let w = node_value.last_dim();
                self.acc(*x, |s| {
                    for ((sr, yr), gr) in s
                        .chunks_mut(w)
                        .zip(node_value.data().chunks(w))
                        .zip(g.chunks(w))
                    {
                        let inner = dot(yr, gr);
                        for ((x, &y), &gv) in sr.iter_mut().zip(yr).zip(gr) {
                            *x += y * (gv - inner);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let w = node_value.last_dim();
                self.acc(*x, |s| {
                    for ((sr, lr), gr) in s
                        .chunks_mut(w)
                        .zip(node_value.data().chunks(w))
                        .zip(g.chunks(w))
                    {
                        let total: f64 = gr.iter().sum();
                        for ((x, &l), &gv) in sr.iter_mut().zip(lr).zip(gr) {
                            *x += gv - l.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.arc(*gain);
                let d = gv.len();
                self.acc(*x, |s| {
                    for (r, ((sr, hr), gr)) in s
                        .chunks_mut(d)
                        .zip(xhat.chunks(d))
                        .zip(g.chunks(d))
                        .enumerate()
                    {
                        let dh: Vec<f64> = gr.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dot(&dh, hr) / d as f64;
                        for ((x, &dhi), &hi) in sr.iter_mut().zip(&dh).zip(hr) {
                            *x += inv_std[r] * (dhi - mean_dh - hi * mean_dh_h);
                        }
                    }
                });
                self.acc(*gain, |s| {
                    for (hr, gr) in xhat.chunks(d).zip(g.chunks(d)) {
                        for ((x, &h), &gv) in s.iter_mut().zip(hr).zip(gr) {
                            *x += gv * h;
                        }
                    }
                });
                self.acc(*bias, |s| {
                    for gr in g.chunks(d) {
                        for (x, &gv) in s.iter_mut().zip(gr) {
                            *x += gv;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let tx = self.arc(*x);
                self.acc(*x, |s| {
                    for ((o, &gv), &v) in s.iter_mut().zip(g).zip(tx.data()) {
                        *o += gv * gelu_grad(v);
                    }
                });
            }
            Op::Exp(x) => {
                self.acc(*x, |s| {
                    for ((o, &gv), &y) in s.iter_mut().zip(g).zip(node_value.data()) {
                        *o += gv * y;
                    }
                });
            }
            Op::GatherRows { table, indices } => {
                let c = node_value.last_dim();
                self.acc(*table, |s| {
                    for (gr, &i) in g.chunks(c).zip(indices.iter()) {
                        for (x, &gv) in s[i * c..(i + 1) * c].iter_mut().zip(gr) {
                            *x += gv;
                        }
                    }
                });
            }
            Op::GatherCols {
                src,
                index,
                select,
                transposed,
            } => {
                let sc = self.val(*src).last_dim();
                let oc = node_value.last_dim();
                self.acc(*src, |s| {
                    for (r, gr) in g.chunks(oc).enumerate() {
                        let q = select.as_ref().map_or(r, |sel| sel[r]);
                        for (c, &gv) in gr.iter().enumerate() {
                            if *transposed {
                                s[c * sc + index.get(c, q)] += gv;
                            } else {
                                s[r * sc + index.get(q, c)] += gv;
                            }
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let w = node_value.last_dim();
                let xc = self.val(*x).last_dim();
                let start = *start;
                self.acc(*x, |s| {
                    for (sr, gr) in s.chunks_mut(xc).zip(g.chunks(w)) {
                        for (o, &gv) in sr[start..start + w].iter_mut().zip(gr) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node_value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = self.val(p).last_dim();
                    self.acc(p, |s| {
                        for (sr, gr) in s.chunks_mut(w).zip(g.chunks(total)) {
                            for (o, &gv) in sr.iter_mut().zip(&gr[offset..offset + w]) {
                                *o += gv;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::RowSum(x) => {
                let c = self.val(*x).last_dim();
                self.acc(*x, |s| {
                    for (sr, &gv) in s.chunks_mut(c).zip(g) {
                        for o in sr {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc_add(*x, g, 1.0),
            Op::Sum(x) => {
                let gv = g[0];
                self.acc(*x, |s| s.iter_mut().for_each(|o| *o += gv));
            }
            Op::Pick { x, at } => {
                let c = self.val(*x).last_dim();
                self.acc(*x, |s| {
                    for (&(r, col), &gv) in at.iter().zip(g) {
                        s[r * c + col] += gv;
                    }
                });
            }
        }
        self.nodes[id].op = op;
    }
}

pub(crate) fn gather_cols_forward(
    src: &Tensor,
    index: &IndexMatrix,
    select: Option<&[usize]>,
    transposed: bool,
) -> Result<Tensor> {
    let (sr, sc) = src.dims2("gather_cols")?;
    let nq = select.map_or(
        if transposed {
            index.cols()
        } else {
            index.rows()
        },
        <[usize]>::len,
    );
    let q_bound = if transposed {
        index.cols()
    } else {
        index.rows()
    };
    let oc = if transposed {
        index.rows()
    } else {
        index.cols()
    };
    let need_rows = if transposed { index.rows() } else { nq };
    if sr != need_rows {
        return Err(TensorError::DimensionMismatch {
            op: "gather_cols",
            left: src.shape().to_vec(),
            right: vec![index.rows(), index.cols()],
        });
    }
    if let Some(m) = index.max_value() {
        if m >= sc {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_cols",
                index: m,
                bound: sc,
            });
        }
    }
    let data = src.data();
    let mut out = Vec::with_capacity(nq * oc);
    for r in 0..nq {
        let q = select.map_or(r, |s| s[r]);
        if q >= q_bound {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_cols",
                index: q,
                bound: q_bound,
            });
        }
        if transposed {
            out.extend((0..oc).map(|c| data[c * sc + index.get(c, q)]));
        } else {
            out.extend(index.row(q).iter().map(|&ix| data[r * sc + ix]));
        }
    }
    Tensor::new(vec![nq, oc], out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Whether a score is treated as masked by `softmax_rows`.
pub fn is_masked(v: f64) -> bool {
    v <= MASK_THRESHOLD
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let mut t = Tape::new();
        let id = t.constant(m(&[&[1., 0.], &[0., 1.]]));
        let z = t.constant(Tensor::zeros(&[2, 2]));
        let a = t.constant(m(&[&[0.3, -1.2], &[2.5, 7.0]]));
        let p = t.matmul(id, a).unwrap();
        assert_eq!(t.value(p), t.value(a));
        let q = t.matmul(z, a).unwrap();
        assert_eq!(t.value(q).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut t = Tape::new();
        let a = t.constant(m(&[&[1., 2.], &[3., 4.]]));
        let b = t.constant(m(&[&[5., 6.], &[7., 8.]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[4.2, 4.2, 4.2], &[1., 2., 3.]]));
        let y = t.softmax_rows(x).unwrap();
        let v = t.value(y).data().to_vec();
        for p in &v[..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        // e^x / sum e^x evaluated by hand: 0.09003, 0.24473, 0.66524
        let expect = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_64,
            0.665_240_955_774_821_9,
        ];
        for (a, b) in v[3..].iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_masked_and_degenerate() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[0.0, crate::tensor::MASK_SENTINEL]]));
        let y = t.softmax_rows(x).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 0.0]);
        let bad = t.constant(m(&[&[1.0, 2.0], &[-1e30, -1e30]]));
        assert_eq!(
            t.softmax_rows(bad).unwrap_err(),
            TensorError::DegenerateRow { row: 1 }
        );
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let one = t.constant(Tensor::full(&[3], 1.0));
        let zero = t.constant(Tensor::zeros(&[3]));
        let x = t.constant(m(&[&[1., 2., 3.], &[5., 5., 5.]]));
        let y = t.layer_norm(x, one, zero, 0.0).unwrap();
        let v = t.value(y).data();
        // mean 2, population std sqrt(2/3)
        let s = (1.5f64).sqrt();
        assert!((v[0] + s).abs() < 1e-12 && v[1].abs() < 1e-15 && (v[2] - s).abs() < 1e-12);
        assert_eq!(&v[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_keeps_standardized_input() {
        let s = (1.5f64).sqrt();
        let mut t = Tape::new();
        let one = t.constant(Tensor::full(&[3], 1.0));
        let zero = t.constant(Tensor::zeros(&[3]));
        let x = t.constant(m(&[&[-s, 0.0, s]]));
        let y = t.layer_norm(x, one, zero, 1e-12).unwrap();
        assert!(t.value(y).max_abs_diff(t.value(x)) < 1e-11);
    }

    #[test]
    fn gather_rows_examples_and_bounds() {
        let mut t = Tape::new();
        let table = t.param(m(&[&[1., 2.], &[3., 4.], &[5., 6.]]));
        let all0 = t.gather_rows(table, vec![0, 0, 0]).unwrap();
        assert_eq!(t.value(all0).data(), &[1., 2., 1., 2., 1., 2.]);
        let same = t.gather_rows(table, vec![0, 1, 2]).unwrap();
        assert_eq!(t.value(same), t.value(table));
        let err = t.gather_rows(table, vec![3]).unwrap_err();
        assert_eq!(
            err,
            TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: 3,
                bound: 3
            }
        );
    }

    #[test]
    fn gather_rows_grad_counts_multiplicity() {
        let mut t = Tape::new();
        let table = t.param(Tensor::zeros(&[4, 3]));
        let g = t.gather_rows(table, vec![2, 0, 2, 2, 3]).unwrap();
        let s = t.sum(g);
        t.backward(s).unwrap();
        let grad = t.grad(table).unwrap();
        let counts = [1.0, 0.0, 3.0, 1.0];
        for (r, c) in counts.iter().enumerate() {
            assert_eq!(&grad[r * 3..r * 3 + 3], &[*c; 3]);
        }
    }

    #[test]
    fn gather_cols_direct_and_transposed() {
        let idx = Arc::new(IndexMatrix::new(2, 2, vec![1, 0, 2, 1]).unwrap());
        let mut t = Tape::new();
        let src = t.constant(m(&[&[10., 11., 12.], &[20., 21., 22.]]));
        let d = t.gather_cols(src, idx.clone(), None, false).unwrap();
        assert_eq!(t.value(d).data(), &[11., 10., 22., 21.]);
        // out[r, c] = src[c, idx[c, r]]
        let tr = t.gather_cols(src, idx.clone(), None, true).unwrap();
        assert_eq!(t.value(tr).data(), &[11., 22., 10., 21.]);
        let sel = t
            .gather_cols(src, idx, Some(Arc::from(vec![1usize])), true)
            .unwrap();
        assert_eq!(t.value(sel).data(), &[10., 21.]);
    }

    #[test]
    fn backward_simple_cases() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![0.5, -2.0, 3.0]));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![0.5, -2.0, 3.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let half = t.scale(s, 0.5);
        t.backward(half).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.5, -2.0, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            t.backward(x),
            Err(TensorError::NonScalarLoss { shape }) if shape == vec![2]
        ));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0]));
        let c = t.constant(Tensor::vector(vec![2.0]));
        let y = t.mul(x, c).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0]);
        assert!(t.grad(c).is_none());
    }
}
