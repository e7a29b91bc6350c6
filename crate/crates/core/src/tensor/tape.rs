//! Reverse-mode autodiff via an explicit operation tape.
//!
//! Forward calls record one node per primitive; [`Tape::backward`] replays
//! the recording in reverse, visiting each node exactly once. Replay order
//! is the reverse of insertion order, so gradients are bitwise reproducible.

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorRef {
    tape: u32,
    idx: u32,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(TensorRef, TensorRef),
    Transpose(TensorRef),
    Reshape(TensorRef),
    Add(TensorRef, TensorRef),
    Sub(TensorRef, TensorRef),
    Mul(TensorRef, TensorRef),
    Minimum(TensorRef, TensorRef),
    AddRowBroadcast(TensorRef, TensorRef),
    Affine(TensorRef, f64, f64),
    Clamp(TensorRef, f64, f64),
    Tanh(TensorRef),
    Sigmoid(TensorRef),
    Relu(TensorRef),
    Exp(TensorRef),
    Log(TensorRef),
    Softmax(TensorRef),
    LogSoftmax(TensorRef),
    LogSumExpRows(TensorRef),
    SumAll(TensorRef),
    MeanAll(TensorRef),
    RowSums(TensorRef),
    ColMeans(TensorRef),
    ColMax(TensorRef),
    SliceRows(TensorRef, usize, usize),
    ConcatCols(TensorRef, TensorRef),
    StackRows(Vec<TensorRef>),
    GatherRows(TensorRef, Vec<usize>),
    SelectPerRow(TensorRef, Vec<usize>),
    Conv1d { x: TensorRef, w: TensorRef, b: TensorRef, kernel: usize, dilation: usize, causal: bool },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
}

static NEXT_TAPE_UID: AtomicU32 = AtomicU32::new(1);

/// Recording of a forward computation.
pub struct Tape {
    uid: u32,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    ran_backward: bool,
}

/// Leaves created by binding a [`ParamSet`] onto a tape.
pub struct BoundParams {
    set_uid: u64,
    refs: Vec<TensorRef>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<TensorRef> {
        self.index
            .get(name)
            .map(|&i| self.refs[i])
            .ok_or_else(|| Error::contract(format!("param {name} not bound")))
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            uid: NEXT_TAPE_UID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            ran_backward: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, r: TensorRef) -> &Node {
        assert_eq!(r.tape, self.uid, "TensorRef used with the wrong tape");
        &self.nodes[r.idx as usize]
    }

    pub fn shape(&self, r: TensorRef) -> &[usize] {
        &self.node(r).shape
    }

    pub fn values(&self, r: TensorRef) -> &[f64] {
        &self.node(r).values
    }

    pub fn scalar_value(&self, r: TensorRef) -> f64 {
        debug_assert_eq!(self.node(r).values.len(), 1);
        self.node(r).values[0]
    }

    /// Gradient of the last `backward` target w.r.t. `r`, if recorded.
    pub fn grad(&self, r: TensorRef) -> Option<&[f64]> {
        assert_eq!(r.tape, self.uid, "TensorRef used with the wrong tape");
        self.grads.get(r.idx as usize).and_then(|g| g.as_deref())
    }

    fn rows(&self, r: TensorRef) -> usize {
        self.node(r).shape[0]
    }

    fn cols(&self, r: TensorRef) -> usize {
        let s = &self.node(r).shape;
        if s.len() == 2 {
            s[1]
        } else {
            1
        }
    }

    fn is_mat(&self, r: TensorRef) -> bool {
        self.node(r).shape.len() == 2
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<TensorRef> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("output of {:?}", op_name(&op))));
        }
        self.nodes.push(Node { op, shape, values, requires_grad });
        Ok(TensorRef { tape: self.uid, idx: (self.nodes.len() - 1) as u32 })
    }

    /// Record an external tensor as a leaf. Gradient flows back to it iff
    /// `requires_grad` is set on the tensor.
    pub fn leaf(&mut self, t: &Tensor) -> TensorRef {
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            values: t.values().to_vec(),
            requires_grad: t.requires_grad(),
        });
        TensorRef { tape: self.uid, idx: (self.nodes.len() - 1) as u32 }
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: &Tensor) -> TensorRef {
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            values: t.values().to_vec(),
            requires_grad: false,
        });
        TensorRef { tape: self.uid, idx: (self.nodes.len() - 1) as u32 }
    }

    pub fn constant_vector(&mut self, values: Vec<f64>) -> TensorRef {
        let t = Tensor::vector(values);
        self.constant(&t)
    }

    pub fn constant_scalar(&mut self, v: f64) -> TensorRef {
        let t = Tensor::scalar(v);
        self.constant(&t)
    }

    /// Bind every tensor of a param set as a trainable leaf, in set order.
    pub fn bind(&mut self, set: &ParamSet) -> BoundParams {
        self.bind_inner(set, true)
    }

    /// Bind a param set as constants (no gradient); used for target networks
    /// and for holding one component fixed while training another.
    pub fn bind_frozen(&mut self, set: &ParamSet) -> BoundParams {
        self.bind_inner(set, false)
    }

    fn bind_inner(&mut self, set: &ParamSet, trainable: bool) -> BoundParams {
        let mut refs = Vec::with_capacity(set.len());
        let mut index = HashMap::with_capacity(set.len());
        for (i, (name, t)) in set.iter().enumerate() {
            let r = if trainable { self.leaf(t) } else { self.constant(t) };
            refs.push(r);
            index.insert(name.to_string(), i);
        }
        BoundParams { set_uid: set.uid(), refs, index }
    }

    /// Accumulate gradients of bound leaves back into the set's tensors.
    /// Must be called after `backward`; every trainable leaf is populated
    /// (zero when unused by the loss).
    pub fn harvest(&self, bound: &BoundParams, set: &mut ParamSet) -> Result<()> {
        if bound.set_uid != set.uid() {
            return Err(Error::contract("harvest target is not the bound param set"));
        }
        if !self.ran_backward {
            return Err(Error::contract("harvest called before backward"));
        }
        for (i, r) in bound.refs.iter().enumerate() {
            let g = self
                .grad(*r)
                .ok_or_else(|| Error::contract("bound leaf has no gradient"))?
                .to_vec();
            set.tensor_at_mut(i).accumulate_grad(&g);
        }
        Ok(())
    }

    // ── forward primitives ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        if !self.is_mat(a) || !self.is_mat(b) {
            return Err(Error::shape("matmul expects rank-2 inputs"));
        }
        let (n, k) = (self.rows(a), self.cols(a));
        let (k2, m) = (self.rows(b), self.cols(b));
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; n * m];
        {
            let av = &self.node(a).values;
            let bv = &self.node(b).values;
            for i in 0..n {
                for p in 0..k {
                    let x = av[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * m..(p + 1) * m];
                    let orow = &mut out[i * m..(i + 1) * m];
                    for j in 0..m {
                        orow[j] += x * brow[j];
                    }
                }
            }
        }
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        self.push(Op::Matmul(a, b), vec![n, m], out, rg)
    }

    pub fn transpose(&mut self, a: TensorRef) -> Result<TensorRef> {
        if !self.is_mat(a) {
            return Err(Error::shape("transpose expects rank-2 input"));
        }
        let (n, m) = (self.rows(a), self.cols(a));
        let av = &self.node(a).values;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = av[i * m + j];
            }
        }
        let rg = self.node(a).requires_grad;
        self.push(Op::Transpose(a), vec![m, n], out, rg)
    }

    pub fn reshape(&mut self, a: TensorRef, shape: Vec<usize>) -> Result<TensorRef> {
        let n: usize = shape.iter().product();
        if n != self.node(a).values.len() || shape.is_empty() || shape.len() > 2 {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.node(a).shape
            )));
        }
        let values = self.node(a).values.clone();
        let rg = self.node(a).requires_grad;
        self.push(Op::Reshape(a), shape, values, rg)
    }

    fn elementwise(&mut self, a: TensorRef, b: TensorRef, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<TensorRef> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::shape(format!(
                "{} expects equal shapes, got {:?} vs {:?}",
                op_name(&op),
                self.node(a).shape,
                self.node(b).shape
            )));
        }
        let out: Vec<f64> = self
            .node(a)
            .values
            .iter()
            .zip(&self.node(b).values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.node(a).shape.clone();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        self.push(op, shape, out, rg)
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        // Broadcast a row vector over matrix rows; equal shapes otherwise.
        if self.is_mat(a) && !self.is_mat(b) && self.cols(a) == self.rows(b) {
            return self.add_row_broadcast(a, b);
        }
        self.elementwise(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.elementwise(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.elementwise(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise minimum; on ties the gradient routes to the first input.
    pub fn minimum(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.elementwise(a, b, Op::Minimum(a, b), f64::min)
    }

    fn add_row_broadcast(&mut self, m: TensorRef, v: TensorRef) -> Result<TensorRef> {
        let (n, d) = (self.rows(m), self.cols(m));
        if self.node(v).values.len() != d {
            return Err(Error::shape("row broadcast length mismatch"));
        }
        let mv = &self.node(m).values;
        let vv = &self.node(v).values;
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                out.push(mv[i * d + j] + vv[j]);
            }
        }
        let rg = self.node(m).requires_grad || self.node(v).requires_grad;
        self.push(Op::AddRowBroadcast(m, v), vec![n, d], out, rg)
    }

    /// scale * x + shift, elementwise with scalar coefficients.
    pub fn affine(&mut self, a: TensorRef, scale: f64, shift: f64) -> Result<TensorRef> {
        let out: Vec<f64> = self.node(a).values.iter().map(|&x| scale * x + shift).collect();
        let shape = self.node(a).shape.clone();
        let rg = self.node(a).requires_grad;
        self.push(Op::Affine(a, scale, shift), shape, out, rg)
    }

    pub fn neg(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.affine(a, -1.0, 0.0)
    }

    /// Clamp to [lo, hi]; gradient is zero strictly outside the interval.
    pub fn clamp(&mut self, a: TensorRef, lo: f64, hi: f64) -> Result<TensorRef> {
        let out: Vec<f64> = self.node(a).values.iter().map(|&x| x.clamp(lo, hi)).collect();
        let shape = self.node(a).shape.clone();
        let rg = self.node(a).requires_grad;
        self.push(Op::Clamp(a, lo, hi), shape, out, rg)
    }

    fn unary(&mut self, a: TensorRef, op: Op, f: impl Fn(f64) -> f64) -> Result<TensorRef> {
        let out: Vec<f64> = self.node(a).values.iter().map(|&x| f(x)).collect();
        let shape = self.node(a).shape.clone();
        let rg = self.node(a).requires_grad;
        self.push(op, shape, out, rg)
    }

    pub fn tanh(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.unary(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn relu(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.unary(a, Op::Log(a), f64::ln)
    }

    /// Row-wise softmax (plain softmax for rank-1 input). Stable under the
    /// large negative values used for logit masking: exp underflows to an
    /// exact zero probability.
    pub fn softmax(&mut self, a: TensorRef) -> Result<TensorRef> {
        let (n, d) = self.row_view(a);
        let av = &self.node(a).values;
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &av[i * d..(i + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..d {
                let e = (row[j] - m).exp();
                out[i * d + j] = e;
                s += e;
            }
            for j in 0..d {
                out[i * d + j] /= s;
            }
        }
        let shape = self.node(a).shape.clone();
        let rg = self.node(a).requires_grad;
        self.push(Op::Softmax(a), shape, out, rg)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: TensorRef) -> Result<TensorRef> {
        let (n, d) = self.row_view(a);
        let av = &self.node(a).values;
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &av[i * d..(i + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            for j in 0..d {
                out[i * d + j] = row[j] - lse;
            }
        }
        let shape = self.node(a).shape.clone();
        let rg = self.node(a).requires_grad;
        self.push(Op::LogSoftmax(a), shape, out, rg)
    }

    /// Per-row log(sum(exp(x))): `[n,d] -> [n]` (rank-1 treated as one row).
    pub fn logsumexp_rows(&mut self, a: TensorRef) -> Result<TensorRef> {
        let (n, d) = self.row_view(a);
        let av = &self.node(a).values;
        let mut out = vec![0.0; n];
        for i in 0..n {
            let row = &av[i * d..(i + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            out[i] = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        }
        let rg = self.node(a).requires_grad;
        self.push(Op::LogSumExpRows(a), vec![n], out, rg)
    }

    pub fn sum_all(&mut self, a: TensorRef) -> Result<TensorRef> {
        let s: f64 = self.node(a).values.iter().sum();
        let rg = self.node(a).requires_grad;
        self.push(Op::SumAll(a), vec![1], vec![s], rg)
    }

    pub fn mean_all(&mut self, a: TensorRef) -> Result<TensorRef> {
        let n = self.node(a).values.len();
        if n == 0 {
            return Err(Error::shape("mean of empty tensor"));
        }
        let s: f64 = self.node(a).values.iter().sum::<f64>() / n as f64;
        let rg = self.node(a).requires_grad;
        self.push(Op::MeanAll(a), vec![1], vec![s], rg)
    }

    /// `[n,d] -> [n]`, sum of each row.
    pub fn row_sums(&mut self, a: TensorRef) -> Result<TensorRef> {
        if !self.is_mat(a) {
            return Err(Error::shape("row_sums expects rank-2 input"));
        }
        let (n, d) = (self.rows(a), self.cols(a));
        let av = &self.node(a).values;
        let out: Vec<f64> = (0..n).map(|i| av[i * d..(i + 1) * d].iter().sum()).collect();
        let rg = self.node(a).requires_grad;
        self.push(Op::RowSums(a), vec![n], out, rg)
    }

    /// `[n,d] -> [1,d]`, mean over rows.
    pub fn col_means(&mut self, a: TensorRef) -> Result<TensorRef> {
        if !self.is_mat(a) {
            return Err(Error::shape("col_means expects rank-2 input"));
        }
        let (n, d) = (self.rows(a), self.cols(a));
        if n == 0 {
            return Err(Error::shape("col_means of zero rows"));
        }
        let av = &self.node(a).values;
        let mut out = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                out[j] += av[i * d + j];
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let rg = self.node(a).requires_grad;
        self.push(Op::ColMeans(a), vec![1, d], out, rg)
    }

    /// `[n,d] -> [1,d]`, max over rows; gradient routes to the first argmax.
    pub fn col_max(&mut self, a: TensorRef) -> Result<TensorRef> {
        if !self.is_mat(a) {
            return Err(Error::shape("col_max expects rank-2 input"));
        }
        let (n, d) = (self.rows(a), self.cols(a));
        if n == 0 {
            return Err(Error::shape("col_max of zero rows"));
        }
        let av = &self.node(a).values;
        let mut out = vec![f64::NEG_INFINITY; d];
        for i in 0..n {
            for j in 0..d {
                out[j] = out[j].max(av[i * d + j]);
            }
        }
        let rg = self.node(a).requires_grad;
        self.push(Op::ColMax(a), vec![1, d], out, rg)
    }

    pub fn slice_rows(&mut self, a: TensorRef, start: usize, len: usize) -> Result<TensorRef> {
        if !self.is_mat(a) {
            return Err(Error::shape("slice_rows expects rank-2 input"));
        }
        let (n, d) = (self.rows(a), self.cols(a));
        if start + len > n {
            return Err(Error::shape(format!("slice [{start}, {}) out of {n} rows", start + len)));
        }
        let out = self.node(a).values[start * d..(start + len) * d].to_vec();
        let rg = self.node(a).requires_grad;
        self.push(Op::SliceRows(a, start, len), vec![len, d], out, rg)
    }

    /// Concatenate along columns: `[n,p] ++ [n,q] -> [n,p+q]`
    /// (rank-1 inputs are treated as single rows).
    pub fn concat_cols(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (na, pa) = self.row_view(a);
        let (nb, pb) = self.row_view(b);
        if na != nb {
            return Err(Error::shape("concat_cols row mismatch"));
        }
        let av = &self.node(a).values;
        let bv = &self.node(b).values;
        let mut out = Vec::with_capacity(na * (pa + pb));
        for i in 0..na {
            out.extend_from_slice(&av[i * pa..(i + 1) * pa]);
            out.extend_from_slice(&bv[i * pb..(i + 1) * pb]);
        }
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        self.push(Op::ConcatCols(a, b), vec![na, pa + pb], out, rg)
    }

    /// Stack single rows into a matrix: k inputs of `[1,d]` (or `[d]`) -> `[k,d]`.
    pub fn stack_rows(&mut self, rows: &[TensorRef]) -> Result<TensorRef> {
        if rows.is_empty() {
            return Err(Error::shape("stack_rows of zero inputs"));
        }
        let d = self.node(rows[0]).values.len();
        let mut out = Vec::with_capacity(rows.len() * d);
        let mut rg = false;
        for &r in rows {
            let node = self.node(r);
            if node.values.len() != d || node.shape[0] != node.values.len() && node.shape[0] != 1 {
                return Err(Error::shape("stack_rows expects uniform single rows"));
            }
            out.extend_from_slice(&node.values);
            rg |= node.requires_grad;
        }
        self.push(Op::StackRows(rows.to_vec()), vec![rows.len(), d], out, rg)
    }

    /// Embedding lookup: `table[idx[k], :]` for each k -> `[k,d]`.
    pub fn gather_rows(&mut self, table: TensorRef, indices: &[usize]) -> Result<TensorRef> {
        if !self.is_mat(table) {
            return Err(Error::shape("gather_rows expects a rank-2 table"));
        }
        let (n, d) = (self.rows(table), self.cols(table));
        let tv = &self.node(table).values;
        let mut out = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            if ix >= n {
                return Err(Error::contract(format!("gather index {ix} out of {n} rows")));
            }
            out.extend_from_slice(&tv[ix * d..(ix + 1) * d]);
        }
        let rg = self.node(table).requires_grad;
        self.push(Op::GatherRows(table, indices.to_vec()), vec![indices.len(), d], out, rg)
    }

    /// Per-row element pick: `out[i] = m[i, cols[i]]` -> `[n]`.
    pub fn select_per_row(&mut self, m: TensorRef, cols: &[usize]) -> Result<TensorRef> {
        if !self.is_mat(m) {
            return Err(Error::shape("select_per_row expects rank-2 input"));
        }
        let (n, d) = (self.rows(m), self.cols(m));
        if cols.len() != n {
            return Err(Error::shape("select_per_row needs one column per row"));
        }
        let mv = &self.node(m).values;
        let mut out = Vec::with_capacity(n);
        for (i, &c) in cols.iter().enumerate() {
            if c >= d {
                return Err(Error::contract(format!("column {c} out of {d}")));
            }
            out.push(mv[i * d + c]);
        }
        let rg = self.node(m).requires_grad;
        self.push(Op::SelectPerRow(m, cols.to_vec()), vec![n], out, rg)
    }

    /// 1-D convolution over time. `x` is `[T, c_in]`, `w` is `[c_out, k*c_in]`,
    /// `b` is `[c_out]`. Causal mode left-pads with zeros (output `[T, c_out]`);
    /// valid mode emits only fully covered positions (`[T-(k-1)*dil, c_out]`).
    pub fn conv1d(
        &mut self,
        x: TensorRef,
        w: TensorRef,
        b: TensorRef,
        kernel: usize,
        dilation: usize,
        causal: bool,
    ) -> Result<TensorRef> {
        if !self.is_mat(x) || !self.is_mat(w) {
            return Err(Error::shape("conv1d expects rank-2 x and w"));
        }
        let (t_len, c_in) = (self.rows(x), self.cols(x));
        let (c_out, kc) = (self.rows(w), self.cols(w));
        if kc != kernel * c_in {
            return Err(Error::shape(format!("conv1d kernel cols {kc} != {kernel}*{c_in}")));
        }
        if self.node(b).values.len() != c_out {
            return Err(Error::shape("conv1d bias length mismatch"));
        }
        let span = (kernel - 1) * dilation;
        let t_out = if causal {
            t_len
        } else {
            if t_len <= span {
                return Err(Error::shape("conv1d valid output would be empty"));
            }
            t_len - span
        };
        let xv = &self.node(x).values;
        let wv = &self.node(w).values;
        let bv = &self.node(b).values;
        let mut out = vec![0.0; t_out * c_out];
        for t in 0..t_out {
            for o in 0..c_out {
                let mut acc = bv[o];
                for k in 0..kernel {
                    // In causal mode tap k=kernel-1 reads the current step.
                    let src = if causal {
                        let offset = (kernel - 1 - k) * dilation;
                        if offset > t {
                            continue;
                        }
                        t - offset
                    } else {
                        t + k * dilation
                    };
                    for c in 0..c_in {
                        acc += wv[o * kc + k * c_in + c] * xv[src * c_in + c];
                    }
                }
                out[t * c_out + o] = acc;
            }
        }
        let rg = self.node(x).requires_grad || self.node(w).requires_grad || self.node(b).requires_grad;
        self.push(Op::Conv1d { x, w, b, kernel, dilation, causal }, vec![t_out, c_out], out, rg)
    }

    fn row_view(&self, r: TensorRef) -> (usize, usize) {
        let node = self.node(r);
        if node.shape.len() == 2 {
            (node.shape[0], node.shape[1])
        } else {
            (1, node.shape[0])
        }
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse replay from a scalar loss. Populates gradients for every node
    /// that requires grad; unused leaves receive zeros.
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        assert_eq!(loss.tape, self.uid, "TensorRef used with the wrong tape");
        if self.node(loss).values.len() != 1 {
            return Err(Error::contract(format!(
                "backward target must be scalar, got shape {:?}",
                self.node(loss).shape
            )));
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| if n.requires_grad { Some(vec![0.0; n.values.len()]) } else { None })
            .collect();
        if let Some(g) = self.grads[loss.idx as usize].as_mut() {
            g[0] = 1.0;
        }
        for i in (0..=loss.idx as usize).rev() {
            let dy = match &self.grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.accumulate_inputs(i, &dy)?;
        }
        for g in self.grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite("gradient"));
            }
        }
        self.ran_backward = true;
        Ok(())
    }

    fn add_grad(&mut self, r: TensorRef, contribution: &[f64]) {
        if let Some(g) = self.grads[r.idx as usize].as_mut() {
            for (a, b) in g.iter_mut().zip(contribution) {
                *a += b;
            }
        }
    }

    fn wants_grad(&self, r: TensorRef) -> bool {
        self.nodes[r.idx as usize].requires_grad
    }

    fn accumulate_inputs(&mut self, i: usize, dy: &[f64]) -> Result<()> {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (n, k) = (self.rows(a), self.cols(a));
                let m = self.cols(b);
                if self.wants_grad(a) {
                    // dA = dY . B^T
                    let bv = self.node(b).values.clone();
                    let mut da = vec![0.0; n * k];
                    for r in 0..n {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += dy[r * m + j] * bv[p * m + j];
                            }
                            da[r * k + p] = acc;
                        }
                    }
                    self.add_grad(a, &da);
                }
                if self.wants_grad(b) {
                    // dB = A^T . dY
                    let av = self.node(a).values.clone();
                    let mut db = vec![0.0; k * m];
                    for p in 0..k {
                        for r in 0..n {
                            let x = av[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..m {
                                db[p * m + j] += x * dy[r * m + j];
                            }
                        }
                    }
                    self.add_grad(b, &db);
                }
            }
            Op::Transpose(a) => {
                if self.wants_grad(a) {
                    let (m, n) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let mut da = vec![0.0; n * m];
                    for r in 0..m {
                        for c in 0..n {
                            da[c * m + r] = dy[r * n + c];
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::Reshape(a) => self.add_grad(a, dy),
            Op::Add(a, b) => {
                self.add_grad(a, dy);
                self.add_grad(b, dy);
            }
            Op::Sub(a, b) => {
                self.add_grad(a, dy);
                if self.wants_grad(b) {
                    let neg: Vec<f64> = dy.iter().map(|v| -v).collect();
                    self.add_grad(b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.wants_grad(a) {
                    let bv = self.node(b).values.clone();
                    let da: Vec<f64> = dy.iter().zip(&bv).map(|(d, v)| d * v).collect();
                    self.add_grad(a, &da);
                }
                if self.wants_grad(b) {
                    let av = self.node(a).values.clone();
                    let db: Vec<f64> = dy.iter().zip(&av).map(|(d, v)| d * v).collect();
                    self.add_grad(b, &db);
                }
            }
            Op::Minimum(a, b) => {
                let av = self.node(a).values.clone();
                let bv = self.node(b).values.clone();
                if self.wants_grad(a) {
                    let da: Vec<f64> = dy
                        .iter()
                        .zip(av.iter().zip(&bv))
                        .map(|(d, (x, y))| if x <= y { *d } else { 0.0 })
                        .collect();
                    self.add_grad(a, &da);
                }
                if self.wants_grad(b) {
                    let db: Vec<f64> = dy
                        .iter()
                        .zip(av.iter().zip(&bv))
                        .map(|(d, (x, y))| if x <= y { 0.0 } else { *d })
                        .collect();
                    self.add_grad(b, &db);
                }
            }
            Op::AddRowBroadcast(m, v) => {
                self.add_grad(m, dy);
                if self.wants_grad(v) {
                    let d = self.node(v).values.len();
                    let n = dy.len() / d;
                    let mut dv = vec![0.0; d];
                    for r in 0..n {
                        for j in 0..d {
                            dv[j] += dy[r * d + j];
                        }
                    }
                    self.add_grad(v, &dv);
                }
            }
            Op::Affine(a, scale, _) => {
                if self.wants_grad(a) {
                    let da: Vec<f64> = dy.iter().map(|d| d * scale).collect();
                    self.add_grad(a, &da);
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.wants_grad(a) {
                    let av = self.node(a).values.clone();
                    let da: Vec<f64> = dy
                        .iter()
                        .zip(&av)
                        .map(|(d, &x)| if x < lo || x > hi { 0.0 } else { *d })
                        .collect();
                    self.add_grad(a, &da);
                }
            }
            Op::Tanh(a) => {
                if self.wants_grad(a) {
                    let yv = self.nodes[i].values.clone();
                    let da: Vec<f64> = dy.iter().zip(&yv).map(|(d, y)| d * (1.0 - y * y)).collect();
                    self.add_grad(a, &da);
                }
            }
            Op::Sigmoid(a) => {
                if self.wants_grad(a) {
                    let yv = self.nodes[i].values.clone();
                    let da: Vec<f64> = dy.iter().zip(&yv).map(|(d, y)| d * y * (1.0 - y)).collect();
                    self.add_grad(a, &da);
                }
            }
            Op::Relu(a) => {
                if self.wants_grad(a) {
                    let av = self.node(a).values.clone();
                    let da: Vec<f64> = dy.iter().zip(&av).map(|(d, &x)| if x > 0.0 { *d } else { 0.0 }).collect();
                    self.add_grad(a, &da);
                }
            }
            Op::Exp(a) => {
                if self.wants_grad(a) {
                    let yv = self.nodes[i].values.clone();
                    let da: Vec<f64> = dy.iter().zip(&yv).map(|(d, y)| d * y).collect();
                    self.add_grad(a, &da);
                }
            }
            Op::Log(a) => {
                if self.wants_grad(a) {
                    let av = self.node(a).values.clone();
                    let da: Vec<f64> = dy.iter().zip(&av).map(|(d, x)| d / x).collect();
                    self.add_grad(a, &da);
                }
            }
            Op::Softmax(a) => {
                if self.wants_grad(a) {
                    let yv = self.nodes[i].values.clone();
                    let (n, d) = self.row_view(a);
                    let mut da = vec![0.0; n * d];
                    for r in 0..n {
                        let y = &yv[r * d..(r + 1) * d];
                        let g = &dy[r * d..(r + 1) * d];
                        let dot: f64 = y.iter().zip(g).map(|(yy, gg)| yy * gg).sum();
                        for j in 0..d {
                            da[r * d + j] = y[j] * (g[j] - dot);
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::LogSoftmax(a) => {
                if self.wants_grad(a) {
                    let yv = self.nodes[i].values.clone();
                    let (n, d) = self.row_view(a);
                    let mut da = vec![0.0; n * d];
                    for r in 0..n {
                        let y = &yv[r * d..(r + 1) * d];
                        let g = &dy[r * d..(r + 1) * d];
                        let gsum: f64 = g.iter().sum();
                        for j in 0..d {
                            da[r * d + j] = g[j] - y[j].exp() * gsum;
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::LogSumExpRows(a) => {
                if self.wants_grad(a) {
                    let (n, d) = self.row_view(a);
                    let av = self.node(a).values.clone();
                    let lse = self.nodes[i].values.clone();
                    let mut da = vec![0.0; n * d];
                    for r in 0..n {
                        for j in 0..d {
                            da[r * d + j] = dy[r] * (av[r * d + j] - lse[r]).exp();
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::SumAll(a) => {
                if self.wants_grad(a) {
                    let n = self.node(a).values.len();
                    self.add_grad(a, &vec![dy[0]; n]);
                }
            }
            Op::MeanAll(a) => {
                if self.wants_grad(a) {
                    let n = self.node(a).values.len();
                    self.add_grad(a, &vec![dy[0] / n as f64; n]);
                }
            }
            Op::RowSums(a) => {
                if self.wants_grad(a) {
                    let (n, d) = (self.rows(a), self.cols(a));
                    let mut da = vec![0.0; n * d];
                    for r in 0..n {
                        for j in 0..d {
                            da[r * d + j] = dy[r];
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::ColMeans(a) => {
                if self.wants_grad(a) {
                    let (n, d) = (self.rows(a), self.cols(a));
                    let mut da = vec![0.0; n * d];
                    for r in 0..n {
                        for j in 0..d {
                            da[r * d + j] = dy[j] / n as f64;
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::ColMax(a) => {
                if self.wants_grad(a) {
                    let (n, d) = (self.rows(a), self.cols(a));
                    let av = self.node(a).values.clone();
                    let mut da = vec![0.0; n * d];
                    for j in 0..d {
                        let mut best = 0;
                        for r in 1..n {
                            if av[r * d + j] > av[best * d + j] {
                                best = r;
                            }
                        }
                        da[best * d + j] = dy[j];
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::SliceRows(a, start, len) => {
                if self.wants_grad(a) {
                    let (n, d) = (self.rows(a), self.cols(a));
                    let mut da = vec![0.0; n * d];
                    da[start * d..(start + len) * d].copy_from_slice(dy);
                    self.add_grad(a, &da);
                }
            }
            Op::ConcatCols(a, b) => {
                let (n, pa) = self.row_view(a);
                let (_, pb) = self.row_view(b);
                if self.wants_grad(a) {
                    let mut da = vec![0.0; n * pa];
                    for r in 0..n {
                        da[r * pa..(r + 1) * pa].copy_from_slice(&dy[r * (pa + pb)..r * (pa + pb) + pa]);
                    }
                    self.add_grad(a, &da);
                }
                if self.wants_grad(b) {
                    let mut db = vec![0.0; n * pb];
                    for r in 0..n {
                        db[r * pb..(r + 1) * pb]
                            .copy_from_slice(&dy[r * (pa + pb) + pa..(r + 1) * (pa + pb)]);
                    }
                    self.add_grad(b, &db);
                }
            }
            Op::StackRows(rows) => {
                let d = dy.len() / rows.len();
                for (r, &input) in rows.iter().enumerate() {
                    if self.wants_grad(input) {
                        self.add_grad(input, &dy[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::GatherRows(table, indices) => {
                if self.wants_grad(table) {
                    let (n, d) = (self.rows(table), self.cols(table));
                    let mut dt = vec![0.0; n * d];
                    for (k, &ix) in indices.iter().enumerate() {
                        for j in 0..d {
                            dt[ix * d + j] += dy[k * d + j];
                        }
                    }
                    self.add_grad(table, &dt);
                }
            }
            Op::SelectPerRow(m, cols) => {
                if self.wants_grad(m) {
                    let (n, d) = (self.rows(m), self.cols(m));
                    let mut dm = vec![0.0; n * d];
                    for (r, &c) in cols.iter().enumerate() {
                        dm[r * d + c] += dy[r];
                    }
                    self.add_grad(m, &dm);
                }
            }
            Op::Conv1d { x, w, b, kernel, dilation, causal } => {
                let (t_len, c_in) = (self.rows(x), self.cols(x));
                let c_out = self.rows(w);
                let kc = kernel * c_in;
                let t_out = self.nodes[i].shape[0];
                let xv = self.node(x).values.clone();
                let wv = self.node(w).values.clone();
                let mut dx = vec![0.0; t_len * c_in];
                let mut dw = vec![0.0; c_out * kc];
                let mut db = vec![0.0; c_out];
                for t in 0..t_out {
                    for o in 0..c_out {
                        let g = dy[t * c_out + o];
                        if g == 0.0 {
                            continue;
                        }
                        db[o] += g;
                        for k in 0..kernel {
                            let src = if causal {
                                let offset = (kernel - 1 - k) * dilation;
                                if offset > t {
                                    continue;
                                }
                                t - offset
                            } else {
                                t + k * dilation
                            };
                            for c in 0..c_in {
                                dw[o * kc + k * c_in + c] += g * xv[src * c_in + c];
                                dx[src * c_in + c] += g * wv[o * kc + k * c_in + c];
                            }
                        }
                    }
                }
                if self.wants_grad(x) {
                    self.add_grad(x, &dx);
                }
                if self.wants_grad(w) {
                    self.add_grad(w, &dw);
                }
                if self.wants_grad(b) {
                    self.add_grad(b, &db);
                }
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Reshape(..) => "reshape",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Minimum(..) => "minimum",
        Op::AddRowBroadcast(..) => "add_row_broadcast",
        Op::Affine(..) => "affine",
        Op::Clamp(..) => "clamp",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::Relu(..) => "relu",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Softmax(..) => "softmax",
        Op::LogSoftmax(..) => "log_softmax",
        Op::LogSumExpRows(..) => "logsumexp_rows",
        Op::SumAll(..) => "sum_all",
        Op::MeanAll(..) => "mean_all",
        Op::RowSums(..) => "row_sums",
        Op::ColMeans(..) => "col_means",
        Op::ColMax(..) => "col_max",
        Op::SliceRows(..) => "slice_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::StackRows(..) => "stack_rows",
        Op::GatherRows(..) => "gather_rows",
        Op::SelectPerRow(..) => "select_per_row",
        Op::Conv1d { .. } => "conv1d",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_vec(tape: &mut Tape, v: Vec<f64>) -> TensorRef {
        let t = Tensor::vector(v).with_grad();
        tape.leaf(&t)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::matrix(3, 3, vec![2.0, -1.0, 0.5, 3.0, 4.0, -2.0, 0.0, 1.0, 7.0]).unwrap();
        let i = tape.constant(&eye);
        let m = tape.constant(&a);
        let out = tape.matmul(i, m).unwrap();
        assert_eq!(tape.values(out), a.values());
    }

    #[test]
    fn softmax_uniform_and_positive() {
        let mut tape = Tape::new();
        let x = leaf_vec(&mut tape, vec![0.0, 0.0, 0.0]);
        let y = tape.softmax(x).unwrap();
        for &v in tape.values(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
            assert!(v > 0.0);
        }
        let sum: f64 = tape.values(y).iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = leaf_vec(&mut tape, vec![0.0]);
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.values(y), &[0.5]);
    }

    #[test]
    fn backward_square() {
        // loss = x*x at x=3 -> grad 6
        let mut tape = Tape::new();
        let x = leaf_vec(&mut tape, vec![3.0]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_softmax_sum_is_zero() {
        // sum(softmax(z)) is constant 1, so all gradients vanish
        let mut tape = Tape::new();
        let z = leaf_vec(&mut tape, vec![0.3, -1.2, 2.0, 0.0]);
        let s = tape.softmax(z).unwrap();
        let loss = tape.sum_all(s).unwrap();
        tape.backward(loss).unwrap();
        for &g in tape.grad(z).unwrap() {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = leaf_vec(&mut tape, vec![1.0, 2.0]);
        let y = tape.tanh(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = leaf_vec(&mut tape, vec![1.0]);
        let unused = leaf_vec(&mut tape, vec![5.0]);
        let loss = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = leaf_vec(&mut tape, vec![1.0, 2.0]);
        let b = leaf_vec(&mut tape, vec![1.0, 2.0, 3.0]);
        assert!(matches!(tape.add(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn log_of_negative_is_numeric_error() {
        let mut tape = Tape::new();
        let a = leaf_vec(&mut tape, vec![-1.0]);
        assert!(matches!(tape.log(a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut tape = Tape::new();
        let x = leaf_vec(&mut tape, vec![1.0, -1e9, 2.0]);
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.values(y)[1], 0.0);
        let sum: f64 = tape.values(y).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gather_rows_and_grad_scatter() {
        let mut tape = Tape::new();
        let table = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap().with_grad();
        let t = tape.leaf(&table);
        let g = tape.gather_rows(t, &[2, 0, 2]).unwrap();
        assert_eq!(tape.values(g), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = tape.sum_all(g).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(t).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut tape = Tape::new();
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![9.0, 8.0]).unwrap();
        let ar = tape.constant(&a);
        let br = tape.constant(&b);
        let c = tape.concat_cols(ar, br).unwrap();
        assert_eq!(tape.values(c), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let row = tape.slice_rows(c, 1, 1).unwrap();
        assert_eq!(tape.values(row), &[3.0, 4.0, 8.0]);
    }

    #[test]
    fn minimum_routes_gradient() {
        let mut tape = Tape::new();
        let a = leaf_vec(&mut tape, vec![1.0, 5.0]);
        let b = leaf_vec(&mut tape, vec![2.0, 3.0]);
        let m = tape.minimum(a, b).unwrap();
        let loss = tape.sum_all(m).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 0.0]);
        assert_eq!(tape.grad(b).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn conv1d_causal_shape_and_values() {
        let mut tape = Tape::new();
        // x: T=3, c_in=1, values [1,2,3]; kernel 2, dilation 1, w = [1, 1] -> out[t] = x[t-1]+x[t]
        let x = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let b = Tensor::vector(vec![0.0]);
        let xr = tape.constant(&x);
        let wr = tape.constant(&w);
        let br = tape.constant(&b);
        let y = tape.conv1d(xr, wr, br, 2, 1, true).unwrap();
        assert_eq!(tape.values(y), &[1.0, 3.0, 5.0]);
        let yv = tape.conv1d(xr, wr, br, 2, 1, false).unwrap();
        assert_eq!(tape.values(yv), &[3.0, 5.0]);
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let run = || -> Vec<f64> {
            let mut tape = Tape::new();
            let x = Tensor::matrix(2, 3, vec![0.1, -0.4, 0.7, 0.2, 0.9, -0.3]).unwrap().with_grad();
            let w = Tensor::matrix(3, 2, vec![0.5, -0.2, 0.8, 0.1, -0.6, 0.4]).unwrap().with_grad();
            let xr = tape.leaf(&x);
            let wr = tape.leaf(&w);
            let h = tape.matmul(xr, wr).unwrap();
            let h = tape.tanh(h).unwrap();
            let loss = tape.mean_all(h).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(wr).unwrap().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
