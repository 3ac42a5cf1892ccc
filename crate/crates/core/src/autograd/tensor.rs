//! Dense row-major tensors with define-by-run reverse-mode differentiation.
//!
//! Every op builds a new immutable node holding references to its parents.
//! Node ids increase monotonically with creation, so sorting the reachable
//! nodes by descending id yields a valid reverse topological order.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

fn next_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op<T: Scalar> {
    Leaf,
    Matmul(Tensor<T>, Tensor<T>),
    MatmulNt(Tensor<T>, Tensor<T>),
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    AddRow(Tensor<T>, Tensor<T>),
    Scale(Tensor<T>, T),
    Gelu(Tensor<T>),
    Tanh(Tensor<T>),
    Exp(Tensor<T>),
    Log { x: Tensor<T>, eps: T },
    Softmax { x: Tensor<T>, outer: usize, len: usize, inner: usize },
    LogSoftmax(Tensor<T>),
    LayerNorm { x: Tensor<T>, gain: Tensor<T>, bias: Tensor<T>, normed: Vec<T>, inv_std: Vec<T> },
    ConcatRows(Vec<Tensor<T>>),
    ConcatCols(Vec<Tensor<T>>),
    SliceRows { x: Tensor<T>, start: usize },
    SliceCols { x: Tensor<T>, start: usize },
    Transpose(Tensor<T>),
    Reshape(Tensor<T>),
    Sum(Tensor<T>),
    MeanRows(Tensor<T>),
    Embedding { table: Tensor<T>, ids: Vec<usize> },
    Pick { x: Tensor<T>, index: usize },
}

impl<T: Scalar> Op<T> {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::MatmulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log { .. } => "log",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::MeanRows(..) => "mean_rows",
            Op::Embedding { .. } => "embedding",
            Op::Pick { .. } => "pick",
        }
    }

    fn parents(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul(a, b)
            | Op::MatmulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => vec![a, b],
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Tanh(x)
            | Op::Exp(x)
            | Op::Log { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax(x)
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::MeanRows(x)
            | Op::Pick { x, .. } => vec![x],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.iter().collect(),
            Op::Embedding { table, .. } => vec![table],
        }
    }
}

struct Node<T: Scalar> {
    id: usize,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
    grad: RefCell<Option<Vec<T>>>,
}

/// A dense tensor value participating in a (possibly empty) autodiff graph.
///
/// Cloning is cheap and shares the node. Leaf tensors created with
/// [`Tensor::param`] accumulate gradients across [`Tensor::backward`] calls
/// until [`Tensor::zero_grad`] is called.
pub struct Tensor<T: Scalar = f64>(Rc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("op", &self.0.op.tag())
            .field("shape", &self.0.shape)
            .field("data", &self.0.data)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn build(data: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            op,
            grad: RefCell::new(None),
        }))
    }

    fn leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} needs {} elements, got {}", shape, numel(&shape), data.len()),
            ));
        }
        Ok(Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            op: Op::Leaf,
            grad: RefCell::new(None),
        })))
    }

    /// Constant tensor (no gradient).
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape.to_vec(), false)
    }

    /// Trainable leaf tensor.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape.to_vec(), true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(vec![T::zero(); numel(shape)], shape.to_vec(), false).expect("consistent shape")
    }

    pub fn scalar(v: T) -> Self {
        Self::leaf(vec![v], vec![], false).expect("consistent shape")
    }

    /// Builds a 2-D constant from rows of equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(data, &[rows.len(), cols])
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op.tag()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.0.data[0]
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub(crate) fn set_grad(&self, g: Vec<T>) {
        debug_assert_eq!(g.len(), self.numel());
        *self.0.grad.borrow_mut() = Some(g);
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Copy of the value cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.data.clone(), self.0.shape.clone(), false).expect("consistent shape")
    }

    /// (rows, cols) view: rank-0 is 1x1, rank-1 is a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.0.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => (numel(&s[..s.len() - 1]), s[s.len() - 1]),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.0.data[r * c..(r + 1) * c]
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.0.shape.len() != 2 {
            return Err(Error::shape(op, format!("expected a matrix, got shape {:?}", self.0.shape)));
        }
        Ok((self.0.shape[0], self.0.shape[1]))
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }

    // ---- linear algebra ----

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = rhs.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] . [{k2}x{n}]")));
        }
        let out = kernels::mm(self.data(), rhs.data(), m, k, n);
        Ok(Self::build(out, vec![m, n], Op::Matmul(self.clone(), rhs.clone())))
    }

    /// `self · rhsᵀ` without materialising the transpose.
    pub fn matmul_nt(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.require_matrix("matmul_nt")?;
        let (n, k2) = rhs.require_matrix("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m}x{k}] . [{n}x{k2}]^T")));
        }
        let out = kernels::mm_nt(self.data(), rhs.data(), m, k, n);
        Ok(Self::build(out, vec![m, n], Op::MatmulNt(self.clone(), rhs.clone())))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.require_matrix("transpose")?;
        let out = kernels::transpose(self.data(), r, c);
        Ok(Self::build(out, vec![c, r], Op::Transpose(self.clone())))
    }

    // ---- elementwise ----

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.same_shape(rhs, "add")?;
        let out = self.data().iter().zip(rhs.data()).map(|(a, b)| *a + *b).collect();
        Ok(Self::build(out, self.shape().to_vec(), Op::Add(self.clone(), rhs.clone())))
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.same_shape(rhs, "sub")?;
        let out = self.data().iter().zip(rhs.data()).map(|(a, b)| *a - *b).collect();
        Ok(Self::build(out, self.shape().to_vec(), Op::Sub(self.clone(), rhs.clone())))
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        self.same_shape(rhs, "mul")?;
        let out = self.data().iter().zip(rhs.data()).map(|(a, b)| *a * *b).collect();
        Ok(Self::build(out, self.shape().to_vec(), Op::Mul(self.clone(), rhs.clone())))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&self, row: &Self) -> Result<Self> {
        let (r, c) = self.dims2();
        if row.numel() != c {
            return Err(Error::shape("add_row", format!("row of {} onto {} cols", row.numel(), c)));
        }
        let mut out = self.to_vec();
        for i in 0..r {
            for (o, b) in out[i * c..(i + 1) * c].iter_mut().zip(row.data()) {
                *o += *b;
            }
        }
        Ok(Self::build(out, self.shape().to_vec(), Op::AddRow(self.clone(), row.clone())))
    }

    pub fn scale(&self, s: T) -> Self {
        let out = self.data().iter().map(|a| *a * s).collect();
        Self::build(out, self.shape().to_vec(), Op::Scale(self.clone(), s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Self {
        let c = T::lit(GELU_C);
        let a = T::lit(GELU_A);
        let half = T::lit(0.5);
        let out = self
            .data()
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + a * x * x * x)).tanh()))
            .collect();
        Self::build(out, self.shape().to_vec(), Op::Gelu(self.clone()))
    }

    pub fn tanh(&self) -> Self {
        let out = self.data().iter().map(|x| x.tanh()).collect();
        Self::build(out, self.shape().to_vec(), Op::Tanh(self.clone()))
    }

    pub fn exp(&self) -> Self {
        let out = self.data().iter().map(|x| x.exp()).collect();
        Self::build(out, self.shape().to_vec(), Op::Exp(self.clone()))
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&self, eps: T) -> Self {
        let out = self.data().iter().map(|x| x.max(eps).ln()).collect();
        Self::build(out, self.shape().to_vec(), Op::Log { x: self.clone(), eps })
    }

    // ---- normalisation ----

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let shape = self.shape();
        let (outer, len, inner) = if shape.is_empty() {
            (1, 1, 1)
        } else {
            if axis >= shape.len() {
                return Err(Error::shape("softmax", format!("axis {axis} for shape {shape:?}")));
            }
            (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
        };
        debug_assert!(self.data().iter().all(|x| !x.is_nan()), "softmax input contains NaN");
        let out = kernels::softmax_axis(self.data(), outer, len, inner);
        Ok(Self::build(out, shape.to_vec(), Op::Softmax { x: self.clone(), outer, len, inner }))
    }

    /// Softmax over the last dimension.
    pub fn softmax_last(&self) -> Self {
        let axis = self.shape().len().saturating_sub(1);
        self.softmax(axis).expect("last axis exists")
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&self) -> Self {
        let (r, c) = self.dims2();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &self.data()[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - m).exp()).sum::<T>().ln() + m;
            out.extend(row.iter().map(|&x| x - lse));
        }
        Self::build(out, self.shape().to_vec(), Op::LogSoftmax(self.clone()))
    }

    /// Per-row normalisation over the last dimension followed by an affine map.
    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: T) -> Result<Self> {
        let (r, c) = self.dims2();
        if c < 2 {
            return Err(Error::shape("layer_norm", "last dimension must be at least 2"));
        }
        if gain.numel() != c || bias.numel() != c {
            return Err(Error::shape(
                "layer_norm",
                format!("gain/bias of {}/{} for width {c}", gain.numel(), bias.numel()),
            ));
        }
        let n = T::from_usize(c).expect("width");
        let mut normed = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &self.data()[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &x) in row.iter().enumerate() {
                let xh = (x - mean) * is;
                normed.push(xh);
                out.push(xh * gain.data()[j] + bias.data()[j]);
            }
        }
        Ok(Self::build(
            out,
            self.shape().to_vec(),
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                normed,
                inv_std,
            },
        ))
    }

    // ---- structure ----

    /// Stacks matrices vertically. All parts need the same number of columns.
    pub fn concat_rows(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let c = first.cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            if p.cols() != c {
                return Err(Error::shape("concat_rows", format!("{} vs {} columns", p.cols(), c)));
            }
            rows += p.rows();
            out.extend_from_slice(p.data());
        }
        Ok(Self::build(out, vec![rows, c], Op::ConcatRows(parts.to_vec())))
    }

    /// Joins matrices side by side. All parts need the same number of rows.
    pub fn concat_cols(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let r = first.rows();
        if parts.iter().any(|p| p.rows() != r) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(Tensor::cols).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(p.row(i));
            }
        }
        Ok(Self::build(out, vec![r, total], Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let (r, c) = self.dims2();
        if start + len > r {
            return Err(Error::shape("slice_rows", format!("{start}+{len} > {r}")));
        }
        let out = self.data()[start * c..(start + len) * c].to_vec();
        Ok(Self::build(out, vec![len, c], Op::SliceRows { x: self.clone(), start }))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let (r, c) = self.dims2();
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {c}")));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.data()[i * c + start..i * c + start + len]);
        }
        Ok(Self::build(out, vec![r, len], Op::SliceCols { x: self.clone(), start }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape(), shape)));
        }
        Ok(Self::build(self.to_vec(), shape.to_vec(), Op::Reshape(self.clone())))
    }

    // ---- reductions ----

    pub fn sum(&self) -> Self {
        let s = self.data().iter().copied().sum();
        Self::build(vec![s], vec![], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Self {
        let n = T::from_usize(self.numel().max(1)).expect("count");
        self.sum().scale(T::one() / n)
    }

    /// Column means: `[r x c] -> [1 x c]`.
    pub fn mean_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2();
        if r == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let n = T::from_usize(r).expect("count");
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(self.row(i)) {
                *o += *x;
            }
        }
        out.iter_mut().for_each(|o| *o /= n);
        Ok(Self::build(out, vec![1, c], Op::MeanRows(self.clone())))
    }

    /// Row lookup `table[ids]`.
    pub fn embedding(table: &Self, ids: &[usize]) -> Result<Self> {
        let (v, d) = table.require_matrix("embedding")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::shape("embedding", format!("id {id} >= table size {v}")));
            }
            out.extend_from_slice(table.row(id));
        }
        Ok(Self::build(out, vec![ids.len(), d], Op::Embedding { table: table.clone(), ids: ids.to_vec() }))
    }

    /// Single element (flat index) as a scalar.
    pub fn pick(&self, index: usize) -> Result<Self> {
        if index >= self.numel() {
            return Err(Error::shape("pick", format!("index {index} of {}", self.numel())));
        }
        Ok(Self::build(vec![self.data()[index]], vec![], Op::Pick { x: self.clone(), index }))
    }

    // ---- backward ----

    /// Reverse-mode sweep from this scalar. Gradients of trainable leaves are
    /// added to whatever they already hold.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            for p in t.0.op.parents() {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push(p.clone());
                }
            }
            order.push(t);
        }
        order.sort_unstable_by(|a, b| b.id().cmp(&a.id()));

        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for node in &order {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            if let Op::Leaf = node.0.op {
                let mut slot = node.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    None => *slot = Some(g),
                }
            } else {
                node.propagate(&g, &mut grads);
            }
        }
        Ok(())
    }

    fn propagate(&self, g: &[T], grads: &mut HashMap<usize, Vec<T>>) {
        let y = self.data();
        match &self.0.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = a.dims2();
                let n = b.cols();
                if a.requires_grad() {
                    accumulate(grads, a, kernels::mm_nt(g, b.data(), m, n, k));
                }
                if b.requires_grad() {
                    accumulate(grads, b, kernels::mm_tn(a.data(), g, m, k, n));
                }
            }
            Op::MatmulNt(a, b) => {
                let (m, k) = a.dims2();
                let n = b.rows();
                if a.requires_grad() {
                    accumulate(grads, a, kernels::mm(g, b.data(), m, n, k));
                }
                if b.requires_grad() {
                    accumulate(grads, b, kernels::mm_tn(g, a.data(), m, n, k));
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, a, g.to_vec());
                accumulate(grads, b, g.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, a, g.to_vec());
                if b.requires_grad() {
                    accumulate(grads, b, g.iter().map(|x| -*x).collect());
                }
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    accumulate(grads, a, g.iter().zip(b.data()).map(|(g, b)| *g * *b).collect());
                }
                if b.requires_grad() {
                    accumulate(grads, b, g.iter().zip(a.data()).map(|(g, a)| *g * *a).collect());
                }
            }
            Op::AddRow(a, row) => {
                accumulate(grads, a, g.to_vec());
                if row.requires_grad() {
                    let c = row.numel();
                    let mut gr = vec![T::zero(); c];
                    for chunk in g.chunks(c) {
                        gr.iter_mut().zip(chunk).for_each(|(o, x)| *o += *x);
                    }
                    accumulate(grads, row, gr);
                }
            }
            Op::Scale(x, s) => accumulate(grads, x, g.iter().map(|v| *v * *s).collect()),
            Op::Gelu(x) => {
                let c = T::lit(GELU_C);
                let a = T::lit(GELU_A);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let gx = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &g)| {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let d = half * (T::one() + t)
                            + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v);
                        g * d
                    })
                    .collect();
                accumulate(grads, x, gx);
            }
            Op::Tanh(x) => {
                let gx = y.iter().zip(g).map(|(&t, &g)| g * (T::one() - t * t)).collect();
                accumulate(grads, x, gx);
            }
            Op::Exp(x) => accumulate(grads, x, y.iter().zip(g).map(|(e, g)| *e * *g).collect()),
            Op::Log { x, eps } => {
                let gx = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &g)| if v > *eps { g / v } else { T::zero() })
                    .collect();
                accumulate(grads, x, gx);
            }
            Op::Softmax { x, outer, len, inner } => {
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: T = (0..*len).map(|k| y[idx(k)] * g[idx(k)]).sum();
                        for k in 0..*len {
                            gx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                accumulate(grads, x, gx);
            }
            Op::LogSoftmax(x) => {
                let c = self.cols();
                let mut gx = vec![T::zero(); y.len()];
                for (r, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                    let gs: T = gr.iter().copied().sum();
                    for j in 0..c {
                        gx[r * c + j] = gr[j] - yr[j].exp() * gs;
                    }
                }
                accumulate(grads, x, gx);
            }
            Op::LayerNorm { x, gain, bias, normed, inv_std } => {
                let c = self.cols();
                let n = T::from_usize(c).expect("width");
                if x.requires_grad() {
                    let mut gx = vec![T::zero(); y.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let xh = &normed[r * c..(r + 1) * c];
                        let dxh: Vec<T> = gr.iter().zip(gain.data()).map(|(g, w)| *g * *w).collect();
                        let m1 = dxh.iter().copied().sum::<T>() / n;
                        let m2 = dxh.iter().zip(xh).map(|(d, h)| *d * *h).sum::<T>() / n;
                        for j in 0..c {
                            gx[r * c + j] = *is * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                    accumulate(grads, x, gx);
                }
                if gain.requires_grad() {
                    let mut gg = vec![T::zero(); c];
                    for (gr, xh) in g.chunks(c).zip(normed.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * xh[j];
                        }
                    }
                    accumulate(grads, gain, gg);
                }
                if bias.requires_grad() {
                    let mut gb = vec![T::zero(); c];
                    for gr in g.chunks(c) {
                        gb.iter_mut().zip(gr).for_each(|(o, x)| *o += *x);
                    }
                    accumulate(grads, bias, gb);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = p.numel();
                    if p.requires_grad() {
                        accumulate(grads, p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = self.dims2();
                let mut col = 0;
                for p in parts {
                    let pc = p.cols();
                    if p.requires_grad() {
                        let mut gp = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            gp.extend_from_slice(&g[i * total + col..i * total + col + pc]);
                        }
                        accumulate(grads, p, gp);
                    }
                    col += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let c = x.cols();
                let mut gx = vec![T::zero(); x.numel()];
                gx[start * c..start * c + g.len()].copy_from_slice(g);
                accumulate(grads, x, gx);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = x.dims2();
                let len = self.cols();
                let mut gx = vec![T::zero(); x.numel()];
                for i in 0..r {
                    gx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                accumulate(grads, x, gx);
            }
            Op::Transpose(x) => {
                let (r, c) = x.dims2();
                accumulate(grads, x, kernels::transpose(g, c, r));
            }
            Op::Reshape(x) => accumulate(grads, x, g.to_vec()),
            Op::Sum(x) => accumulate(grads, x, vec![g[0]; x.numel()]),
            Op::MeanRows(x) => {
                let (r, _) = x.dims2();
                let n = T::from_usize(r).expect("count");
                let row: Vec<T> = g.iter().map(|v| *v / n).collect();
                let gx = (0..r).flat_map(|_| row.iter().copied()).collect();
                accumulate(grads, x, gx);
            }
            Op::Embedding { table, ids } => {
                let d = table.cols();
                let mut gt = vec![T::zero(); table.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[i * d + j];
                    }
                }
                accumulate(grads, table, gt);
            }
            Op::Pick { x, index } => {
                let mut gx = vec![T::zero(); x.numel()];
                gx[*index] = g[0];
                accumulate(grads, x, gx);
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut HashMap<usize, Vec<T>>, t: &Tensor<T>, g: Vec<T>) {
    if !t.requires_grad() {
        return;
    }
    match grads.get_mut(&t.id()) {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
        None => {
            grads.insert(t.id(), g);
        }
    }
}
