//! Reverse-mode differentiation over a linear tape of dense-tensor primitives.
//!
//! Every primitive appends one node holding its output value. `backward`
//! walks the nodes from the loss towards the leaves in exact reverse
//! execution order, so a node's adjoint is complete before it is consumed.
//! Leaves created from a [`ParamStore`] remember which parameter they came
//! from; their adjoints are reported in [`Gradients`] keyed by [`ParamId`]
//! and can be accumulated into the store.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{numel, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    /// Registers `tensor` under `name`; the tensor is marked as requiring grad.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> + '_ {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Freezes or unfreezes a parameter. Frozen parameters enter tapes as constants.
    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.tensors[id.0].set_requires_grad(on);
    }

    /// Adds every parameter gradient in `grads` into the matching grad slot.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (&id, g) in &grads.params {
            let t = &mut self.tensors[id.0];
            if t.requires_grad() {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn total_numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

type CustomBackward<T> = Box<dyn Fn(&[T]) -> Vec<Vec<T>> + Send + Sync>;

enum Op<T> {
    Leaf { target: Option<ParamId> },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    MulConst(Var, Vec<T>),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SelectRows(Var, Vec<usize>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    SwiGlu { gate: Var, up: Var },
    Relu(Var),
    LogSumExpRows { x: Var, probs: Vec<T> },
    SoftmaxRows { x: Var },
    Rope { x: Var, cos: Vec<T>, sin: Vec<T> },
    CrossEntropy { logits: Var, probs: Vec<T>, targets: Vec<Option<usize>>, count: usize },
    Custom { inputs: Vec<Var>, backward: CustomBackward<T> },
}

impl<T> fmt::Debug for Op<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::Transpose(..) => "transpose",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SelectRows(..) => "select_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::RmsNorm { .. } => "rmsnorm",
            Op::SwiGlu { .. } => "swiglu",
            Op::Relu(..) => "relu",
            Op::LogSumExpRows { .. } => "logsumexp_rows",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::Rope { .. } => "rope",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Custom { .. } => "custom",
        };
        f.write_str(name)
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
    causal: bool,
}

/// Ordered record of executed primitives. A tape belongs to one worker.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw<T: Real>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

fn add_into<T: Real>(dst: &mut Option<Vec<T>>, src: &[T]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, &b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

/// Stable per-row log-sum-exp of a `rows × cols` buffer.
pub fn logsumexp_slice<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

/// Cos/sin tables for rotary embeddings: one entry per (row, pair).
pub fn rope_tables<T: Real>(positions: &[usize], head_dim: usize, theta: f64) -> (Vec<T>, Vec<T>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &pos in positions {
        for i in 0..half {
            let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = pos as f64 * freq;
            cos.push(T::of(angle.cos()));
            sin.push(T::of(angle.sin()));
        }
    }
    (cos, sin)
}

fn rotate_pairs<T: Real>(x: &[T], cos: &[T], sin: &[T], cols: usize, inverse: bool) -> Vec<T> {
    let half = cols / 2;
    let mut out = vec![T::zero(); x.len()];
    for r in 0..x.len() / cols {
        for i in 0..half {
            let (c, mut s) = (cos[r * half + i], sin[r * half + i]);
            if inverse {
                s = -s;
            }
            let a = x[r * cols + 2 * i];
            let b = x[r * cols + 2 * i + 1];
            out[r * cols + 2 * i] = a * c - b * s;
            out[r * cols + 2 * i + 1] = a * s + b * c;
        }
    }
    out
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad, causal: false });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        let cols = *n.shape.last().unwrap();
        (n.value.len() / cols, cols)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    pub fn scalar(&self, v: Var) -> Result<T> {
        let n = self.node(v);
        if n.value.len() != 1 {
            return Err(Error::shape(format!("expected scalar, got shape {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    pub fn op_name(&self, v: Var) -> String {
        format!("{:?}", self.node(v).op)
    }

    /// Parameter ids whose leaves on this tape will receive gradients.
    pub fn grad_targets(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Leaf { target: Some(id) } => Some(id),
                _ => None,
            })
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Number of leaves on the tape that target `id`.
    pub fn leaf_count(&self, id: ParamId) -> usize {
        self.nodes.iter().filter(|n| matches!(n.op, Op::Leaf { target: Some(t) } if t == id)).count()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf { target: None }, false)
    }

    /// Leaf that is differentiated but not tied to a parameter.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf { target: None }, true)
    }

    /// Leaf for parameter `id`. Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let t = store.get(id);
        if t.requires_grad() {
            self.param_value(id, t)
        } else {
            self.constant(Tensor::new(t.shape().to_vec(), t.data().to_vec()).unwrap())
        }
    }

    /// Leaf whose gradient is reported for `id` while its value is `value`.
    pub fn param_value(&mut self, id: ParamId, value: &Tensor<T>) -> Var {
        self.push(value.shape().to_vec(), value.data().to_vec(), Op::Leaf { target: Some(id) }, true)
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.tensor(v);
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let out = matmul_raw(self.value(a), self.value(b), sa[0], sa[1], sb[1]);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![sa[0], sb[1]], out, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("{what} of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_op(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` bias to every row of an `m × n` matrix.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims2(a);
        if self.node(bias).value.len() != n {
            return Err(Error::shape(format!("row bias {:?} for {:?}", self.shape(bias), self.shape(a))));
        }
        let b = self.value(bias).to_vec();
        let out = self.value(a).chunks(n).flat_map(|r| r.iter().zip(&b).map(|(&x, &y)| x + y)).collect();
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRowBias(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), ng)
    }

    /// Elementwise product with a fixed buffer (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::shape(format!("mask of {} values for {:?}", mask.len(), self.shape(a))));
        }
        let out = self.value(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let ng = self.ng(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::MulConst(a, mask), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::shape(format!("transpose of {:?}", self.shape(a))));
        }
        let (m, n) = self.dims2(a);
        let out = transpose_raw(self.value(a), m, n);
        let ng = self.ng(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let ng = self.ng(a);
        self.push(vec![1], vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.value(a).len() as f64);
        let s: T = self.value(a).iter().copied().sum();
        let ng = self.ng(a);
        self.push(vec![1], vec![s / n], Op::Mean(a), ng)
    }

    /// Gathers rows of a matrix; embedding lookup is `select_rows(table, ids)`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if rows.is_empty() {
            return Err(Error::shape("select_rows with no rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Index(format!("row {bad} out of range for {m} rows")));
        }
        let src = self.value(x);
        let out = rows.iter().flat_map(|&r| src[r * n..(r + 1) * n].iter().copied()).collect();
        let ng = self.ng(x);
        Ok(self.push(vec![rows.len(), n], out, Op::SelectRows(x, rows.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if len == 0 || start + len > n {
            return Err(Error::shape(format!("columns {start}..{} of {:?}", start + len, self.shape(x))));
        }
        let src = self.value(x);
        let out = (0..m).flat_map(|r| src[r * n + start..r * n + start + len].iter().copied()).collect();
        let ng = self.ng(x);
        Ok(self.push(vec![m, len], out, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims2(*parts.first().ok_or_else(|| Error::shape("concat of nothing"))?).0;
        if parts.iter().any(|&p| self.dims2(p).0 != m) {
            return Err(Error::shape("concat_cols with differing row counts"));
        }
        let total: usize = parts.iter().map(|&p| self.dims2(p).1).sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                let n = self.dims2(p).1;
                out.extend_from_slice(&self.value(p)[r * n..(r + 1) * n]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims2(*parts.first().ok_or_else(|| Error::shape("concat of nothing"))?).1;
        if parts.iter().any(|&p| self.dims2(p).1 != n) {
            return Err(Error::shape("concat_rows with differing column counts"));
        }
        let out: Vec<T> = parts.iter().flat_map(|&p| self.value(p).iter().copied()).collect();
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![out.len() / n, n], out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// `gain ⊙ v / sqrt(mean(v²) + eps)` for each row `v`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.dims2(x);
        if self.value(gain).len() != d {
            return Err(Error::shape(format!("rmsnorm gain {:?} for {:?}", self.shape(gain), self.shape(x))));
        }
        if eps <= 0.0 {
            return Err(Error::Config("rmsnorm eps must be positive".into()));
        }
        let eps = T::of(eps);
        let g = self.value(gain);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * d);
        let mut inv = Vec::with_capacity(m);
        for row in xv.chunks(d) {
            let ms: T = row.iter().map(|&v| v * v).sum::<T>() / T::of(d as f64);
            let r = T::one() / (ms + eps).sqrt();
            inv.push(r);
            out.extend(row.iter().zip(g).map(|(&v, &gi)| gi * v * r));
        }
        let ng = self.ng(x) || self.ng(gain);
        Ok(self.push(self.shape(x).to_vec(), out, Op::RmsNorm { x, gain, inv_rms: inv }, ng))
    }

    /// `silu(gate) ⊙ up`.
    pub fn swiglu(&mut self, gate: Var, up: Var) -> Result<Var> {
        self.same_shape(gate, up, "swiglu")?;
        let out = self.value(gate).iter().zip(self.value(up)).map(|(&z, &u)| z * sigmoid(z) * u).collect();
        let ng = self.ng(gate) || self.ng(up);
        Ok(self.push(self.shape(gate).to_vec(), out, Op::SwiGlu { gate, up }, ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), ng)
    }

    /// Per-row max-shifted log-sum-exp of an `m × n` matrix, giving `[m]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if n == 0 {
            return Err(Error::shape("logsumexp over an empty row"));
        }
        let mut out = Vec::with_capacity(m);
        let mut probs = Vec::with_capacity(m * n);
        for row in self.value(x).chunks(n) {
            let l = logsumexp_slice(row);
            out.push(l);
            probs.extend(row.iter().map(|&v| (v - l).exp()));
        }
        let ng = self.ng(x);
        Ok(self.push(vec![m], out, Op::LogSumExpRows { x, probs }, ng))
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if causal && m != n {
            return Err(Error::shape(format!("causal softmax needs a square matrix, got {:?}", self.shape(x))));
        }
        let mut out = vec![T::zero(); m * n];
        for (i, row) in self.value(x).chunks(n).enumerate() {
            let visible = if causal { i + 1 } else { n };
            let l = logsumexp_slice(&row[..visible]);
            for j in 0..visible {
                out[i * n + j] = (row[j] - l).exp();
            }
        }
        let ng = self.ng(x);
        let v = self.push(self.shape(x).to_vec(), out, Op::SoftmaxRows { x }, ng);
        self.nodes[v.0].causal = causal;
        Ok(v)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Row softmax where row `i` only sees columns `0..=i`; hidden entries are exactly 0.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    /// Rotates each consecutive column pair `(2i, 2i+1)` of row `t` by `positions[t]·θ_i`.
    pub fn rope(&mut self, x: Var, positions: &[usize], theta: f64) -> Result<Var> {
        let (m, d) = self.dims2(x);
        if d % 2 != 0 {
            return Err(Error::Config(format!("rotary embedding needs an even head dim, got {d}")));
        }
        if positions.len() != m {
            return Err(Error::shape(format!("{} positions for {m} rows", positions.len())));
        }
        let (cos, sin) = rope_tables::<T>(positions, d, theta);
        let out = rotate_pairs(self.value(x), &cos, &sin, d, false);
        let ng = self.ng(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Rope { x, cos, sin }, ng))
    }

    /// Mean over supervised rows of `logsumexp(logits) − logits[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, c) = self.dims2(logits);
        if targets.len() != m {
            return Err(Error::shape(format!("{} targets for {m} rows", targets.len())));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(Error::Index(format!("target {bad} out of range for {c} classes")));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Data("no supervised positions".into()));
        }
        let mut probs = Vec::with_capacity(m * c);
        let mut total = T::zero();
        for (row, t) in self.value(logits).chunks(c).zip(targets) {
            let l = logsumexp_slice(row);
            probs.extend(row.iter().map(|&v| (v - l).exp()));
            if let Some(t) = t {
                total += l - row[*t];
            }
        }
        let loss = total / T::of(count as f64);
        let ng = self.ng(logits);
        let op = Op::CrossEntropy { logits, probs, targets: targets.to_vec(), count };
        Ok(self.push(vec![1], vec![loss], op, ng))
    }

    /// Appends an op with a hand-written backward rule. `backward` receives the
    /// output adjoint and returns one gradient buffer per input, in order.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<T>,
        backward: impl Fn(&[T]) -> Vec<Vec<T>> + Send + Sync + 'static,
    ) -> Var {
        let ng = inputs.iter().any(|&v| self.ng(v));
        let shape = output.shape().to_vec();
        let op = Op::Custom { inputs: inputs.to_vec(), backward: Box::new(backward) };
        self.push(shape, output.into_data(), op, ng)
    }

    /// Propagates d(loss)/d(node) for every node reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let n = self.node(loss);
        if n.value.len() != 1 {
            return Err(Error::shape(format!("backward needs a scalar loss, got shape {:?}", n.shape)));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        let mut params: BTreeMap<ParamId, Vec<T>> = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(node, &g, &mut adj, &mut params);
            adj[idx] = Some(g);
        }
        Ok(Gradients { params, nodes: adj })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], adj: &mut [Option<Vec<T>>], params: &mut BTreeMap<ParamId, Vec<T>>) {
        let mut send = |v: Var, grad: Vec<T>| {
            if self.ng(v) {
                add_into(&mut adj[v.0], &grad);
            }
        };
        match &node.op {
            Op::Leaf { target } => {
                if let Some(id) = target {
                    match params.get_mut(id) {
                        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                        None => {
                            params.insert(*id, g.to_vec());
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).1;
                if self.ng(*a) {
                    let bt = transpose_raw(self.value(*b), k, n);
                    send(*a, matmul_raw(g, &bt, m, n, k));
                }
                if self.ng(*b) {
                    let at = transpose_raw(self.value(*a), m, k);
                    send(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = g.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                let gb = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                send(*a, ga);
                send(*b, gb);
            }
            Op::AddRowBias(a, bias) => {
                let n = self.value(*bias).len();
                let mut gb = vec![T::zero(); n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                }
                send(*a, g.to_vec());
                send(*bias, gb);
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|&v| v * *c).collect()),
            Op::MulConst(a, mask) => send(*a, g.iter().zip(mask).map(|(&v, &m)| v * m).collect()),
            Op::Transpose(a) => {
                let (m, n) = self.dims2(*a);
                send(*a, transpose_raw(g, n, m));
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let len = self.value(*a).len();
                send(*a, vec![g[0] / T::of(len as f64); len]);
            }
            Op::SelectRows(x, rows) => {
                let (m, n) = self.dims2(*x);
                let mut gx = vec![T::zero(); m * n];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        gx[r * n + j] += g[k * n + j];
                    }
                }
                send(*x, gx);
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims2(*x);
                let len = node.shape[1];
                let mut gx = vec![T::zero(); m * n];
                for r in 0..m {
                    gx[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                send(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let m = node.shape[0];
                let mut offset = 0;
                for &p in parts {
                    let n = self.dims2(p).1;
                    let gp =
                        (0..m).flat_map(|r| g[r * total + offset..r * total + offset + n].iter().copied()).collect();
                    send(p, gp);
                    offset += n;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    send(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let d = self.value(*gain).len();
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let mut gx = vec![T::zero(); xv.len()];
                let mut gg = vec![T::zero(); d];
                for (r, &ir) in inv_rms.iter().enumerate() {
                    let row = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut dot = T::zero();
                    for j in 0..d {
                        gg[j] += gr[j] * row[j] * ir;
                        dot += gv[j] * gr[j] * row[j];
                    }
                    let coef = ir * ir * ir * dot / T::of(d as f64);
                    for j in 0..d {
                        gx[r * d + j] = ir * gv[j] * gr[j] - coef * row[j];
                    }
                }
                send(*x, gx);
                send(*gain, gg);
            }
            Op::SwiGlu { gate, up } => {
                let (zv, uv) = (self.value(*gate), self.value(*up));
                let mut gz = Vec::with_capacity(g.len());
                let mut gu = Vec::with_capacity(g.len());
                for ((&gi, &z), &u) in g.iter().zip(zv).zip(uv) {
                    let s = sigmoid(z);
                    gz.push(gi * u * s * (T::one() + z * (T::one() - s)));
                    gu.push(gi * z * s);
                }
                send(*gate, gz);
                send(*up, gu);
            }
            Op::Relu(a) => {
                let gx = g.iter().zip(self.value(*a)).map(|(&gi, &x)| if x > T::zero() { gi } else { T::zero() });
                send(*a, gx.collect());
            }
            Op::LogSumExpRows { x, probs } => {
                let n = self.dims2(*x).1;
                let gx = probs.chunks(n).zip(g).flat_map(|(p, &gi)| p.iter().map(move |&pv| pv * gi)).collect();
                send(*x, gx);
            }
            Op::SoftmaxRows { x } => {
                let n = self.dims2(*x).1;
                let y = &node.value;
                let mut gx = vec![T::zero(); y.len()];
                for (r, (yr, gr)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*x, gx);
            }
            Op::Rope { x, cos, sin } => {
                let d = self.dims2(*x).1;
                send(*x, rotate_pairs(g, cos, sin, d, true));
            }
            Op::CrossEntropy { logits, probs, targets, count } => {
                let c = self.dims2(*logits).1;
                let scale = g[0] / T::of(*count as f64);
                let mut gx = vec![T::zero(); probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        for j in 0..c {
                            gx[r * c + j] = probs[r * c + j] * scale;
                        }
                        gx[r * c + t] -= scale;
                    }
                }
                send(*logits, gx);
            }
            Op::Custom { inputs, backward } => {
                for (&v, gv) in inputs.iter().zip(backward(g)) {
                    send(v, gv);
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    params: BTreeMap<ParamId, Vec<T>>,
    nodes: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> + '_ {
        self.params.iter().map(|(&id, g)| (id, g.as_slice()))
    }

    /// Adjoint of an arbitrary node, `None` when it does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Differentiates `loss` and adds the parameter gradients into `store`.
pub fn backward<T: Real>(tape: &Tape<T>, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
    let grads = tape.backward(loss)?;
    store.accumulate(&grads)
}
