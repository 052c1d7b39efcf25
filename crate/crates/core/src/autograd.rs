//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar result walks the tape in reverse and
//! returns the gradient of every leaf and parameter that requires one.
//! Tapes are cheap and meant to be thrown away after each pass.
//!
//! ```
//! use rxncond::autograd::Tape;
//! use rxncond::tensor::Tensor;
//!
//! let tape = Tape::<f64>::new();
//! let w = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
//! let loss = w.sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[1.0; 4]);
//! ```

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op<T> {
    Leaf,
    Param(String),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Silu(usize),
    Normalize {
        x: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    Transpose(usize),
    MeanRows(usize),
    SumAll(usize),
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
        scale: T,
    },
    Reshape(usize),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Silu(_) => "silu",
            Op::Normalize { .. } => "normalize",
            Op::Softmax(_) => "softmax",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Transpose(_) => "transpose",
            Op::MeanRows(_) => "mean_rows",
            Op::SumAll(_) => "sum",
            Op::Gather { .. } => "gather",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation recorder for one forward/backward pass.
pub struct Tape<'s, T: Scalar> {
    store: Option<&'s ParamStore<T>>,
    nodes: RefCell<Vec<Node<T>>>,
    param_ids: RefCell<HashMap<String, usize>>,
    inference: bool,
    non_finite: Cell<Option<usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'a, T: Scalar> {
    tape: &'a Tape<'a, T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s, T: Scalar> Tape<'s, T> {
    /// A tape with no parameter store; only leaves and constants.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: RefCell::new(Vec::new()),
            param_ids: RefCell::new(HashMap::new()),
            inference: false,
            non_finite: Cell::new(None),
        }
    }

    pub fn with_params(store: &'s ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Parameters enter as constants; nothing on this tape needs a gradient.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            inference: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> usize {
        if cfg!(debug_assertions) && self.non_finite.get().is_none() && !value.is_finite() {
            self.non_finite.set(Some(self.len()));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        nodes.len() - 1
    }

    fn push_shared(&self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        nodes.len() - 1
    }

    fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn grad_flag(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn var(&'s self, id: usize) -> Var<'s, T> {
        Var { tape: self, id }
    }

    /// A differentiable input that is not a stored parameter.
    pub fn leaf(&'s self, value: Tensor<T>) -> Var<'s, T> {
        let id = self.push(value, Op::Leaf, !self.inference);
        self.var(id)
    }

    pub fn constant(&'s self, value: Tensor<T>) -> Var<'s, T> {
        let id = self.push(value, Op::Leaf, false);
        self.var(id)
    }

    pub fn zeros(&'s self, shape: &[usize]) -> Var<'s, T> {
        self.constant(Tensor::zeros(shape))
    }

    /// Looks up a parameter by name. Repeated lookups share one node so
    /// gradients of reused weights accumulate. Frozen parameters enter as
    /// constants.
    pub fn param(&'s self, name: &str) -> Result<Var<'s, T>> {
        if let Some(&id) = self.param_ids.borrow().get(name) {
            return Ok(self.var(id));
        }
        let store = self
            .store
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let value = store.get(name)?.clone();
        let requires_grad = !self.inference && !store.is_frozen(name);
        let id = self.push_shared(value, Op::Param(name.to_string()), requires_grad);
        self.param_ids.borrow_mut().insert(name.to_string(), id);
        Ok(self.var(id))
    }

    /// Reverse pass from a scalar. Returns gradients for every leaf and
    /// parameter reachable from `loss` that requires one.
    pub fn backward(&'s self, loss: Var<'s, T>) -> Result<Gradients<T>> {
        if let Some(id) = self.non_finite.get() {
            let nodes = self.nodes.borrow();
            return Err(Error::NonFinite(format!(
                "forward value of node {id} ({})",
                nodes[id].op.name()
            )));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        if !root.value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![T::one()]);

        let mut out = Gradients {
            leaves: HashMap::new(),
            params: BTreeMap::new(),
        };

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
            match &node.op {
                Op::Leaf => {
                    out.leaves
                        .insert(id, Tensor::from_vec(node.value.shape_or_scalar(), g)?);
                }
                Op::Param(name) => {
                    out.params.insert(
                        name.clone(),
                        Tensor::from_vec(node.value.shape_or_scalar(), g)?,
                    );
                }
                _ => {}
            }
        }
        Ok(out)
    }
}

trait ShapeOrScalar {
    fn shape_or_scalar(&self) -> &[usize];
}

impl<T: Scalar> ShapeOrScalar for Tensor<T> {
    fn shape_or_scalar(&self) -> &[usize] {
        if self.shape().is_empty() {
            &[1]
        } else {
            self.shape()
        }
    }
}

/// Gradients produced by one [`Tape::backward`] call.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&var.id)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Adds every parameter gradient into the store's buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (name, g) in &self.params {
            store.accumulate_grad(name, g)?;
        }
        Ok(())
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], id: usize, len: usize) -> &mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::zero(); len])
}

fn backprop<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    let needs = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            if needs(*a) {
                let da = slot(grads, *a, m * k);
                // dA += dC · Bᵀ
                T::gemm(m, n, k, T::one(), g, n as isize, 1, tb.data(), 1, n as isize, T::one(), da, k as isize, 1);
            }
            if needs(*b) {
                let db = slot(grads, *b, k * n);
                // dB += Aᵀ · dC
                T::gemm(k, m, n, T::one(), ta.data(), 1, k as isize, g, n as isize, 1, T::one(), db, n as isize, 1);
            }
        }
        Op::MatMulNT(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
            if needs(*a) {
                let da = slot(grads, *a, m * k);
                // dA += dC · B
                T::gemm(m, n, k, T::one(), g, n as isize, 1, tb.data(), k as isize, 1, T::one(), da, k as isize, 1);
            }
            if needs(*b) {
                let db = slot(grads, *b, n * k);
                // dB += dCᵀ · A
                T::gemm(n, m, k, T::one(), g, 1, n as isize, ta.data(), k as isize, 1, T::one(), db, k as isize, 1);
            }
        }
        Op::Add(a, b) => {
            for &p in [a, b] {
                if needs(p) {
                    let d = slot(grads, p, g.len());
                    d.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                let d = slot(grads, *a, g.len());
                d.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            if needs(*b) {
                let d = slot(grads, *b, g.len());
                d.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a).data(), val(*b).data());
            if needs(*a) {
                let d = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    d[i] += g[i] * tb[i];
                }
            }
            if needs(*b) {
                let d = slot(grads, *b, g.len());
                for i in 0..g.len() {
                    d[i] += g[i] * ta[i];
                }
            }
        }
        Op::AddRow(a, b) => {
            let c = val(*b).len();
            if needs(*a) {
                let d = slot(grads, *a, g.len());
                d.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            if needs(*b) {
                let d = slot(grads, *b, c);
                for (i, &gi) in g.iter().enumerate() {
                    d[i % c] += gi;
                }
            }
        }
        Op::MulRow(a, b) => {
            let (ta, tb) = (val(*a).data(), val(*b).data());
            let c = tb.len();
            if needs(*a) {
                let d = slot(grads, *a, g.len());
                for (i, &gi) in g.iter().enumerate() {
                    d[i] += gi * tb[i % c];
                }
            }
            if needs(*b) {
                let d = slot(grads, *b, c);
                for (i, &gi) in g.iter().enumerate() {
                    d[i % c] += gi * ta[i];
                }
            }
        }
        Op::Scale(a, s) => {
            if needs(*a) {
                let d = slot(grads, *a, g.len());
                d.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *s);
            }
        }
        Op::Relu(a) => {
            if needs(*a) {
                let x = val(*a).data();
                let d = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    if x[i] > T::zero() {
                        d[i] += g[i];
                    }
                }
            }
        }
        Op::Silu(a) => {
            if needs(*a) {
                let x = val(*a).data();
                let d = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    let s = sigmoid(x[i]);
                    d[i] += g[i] * s * (T::one() + x[i] * (T::one() - s));
                }
            }
        }
        Op::Normalize { x, xhat, rstd } => {
            if needs(*x) {
                let c = val(*x).cols();
                let cf = T::from_usize(c).expect("width");
                let d = slot(grads, *x, g.len());
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * c..(r + 1) * c];
                    let xr = &xhat[r * c..(r + 1) * c];
                    let mean_g = gr.iter().copied().sum::<T>() / cf;
                    let mean_gx = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / cf;
                    for j in 0..c {
                        d[r * c + j] += rs * (gr[j] - mean_g - xr[j] * mean_gx);
                    }
                }
            }
        }
        Op::Softmax(a) => {
            if needs(*a) {
                let y = node.value.data();
                let c = node.value.cols();
                let d = slot(grads, *a, g.len());
                for r in 0..y.len() / c {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..c {
                        d[r * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).len();
                if needs(p) {
                    let d = slot(grads, p, n);
                    d.iter_mut()
                        .zip(&g[offset..offset + n])
                        .for_each(|(x, &y)| *x += y);
                }
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let rows = node.value.rows();
            let mut col = 0;
            for &p in parts {
                let c = val(p).cols();
                if needs(p) {
                    let d = slot(grads, p, rows * c);
                    for r in 0..rows {
                        for j in 0..c {
                            d[r * c + j] += g[r * total + col + j];
                        }
                    }
                }
                col += c;
            }
        }
        Op::SliceRows { x, start } => {
            if needs(*x) {
                let c = val(*x).cols();
                let n = val(*x).len();
                let d = slot(grads, *x, n);
                d[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, &b)| *a += b);
            }
        }
        Op::SliceCols { x, start } => {
            if needs(*x) {
                let src = val(*x);
                let (rows, c) = (src.rows(), src.cols());
                let w = node.value.cols();
                let d = slot(grads, *x, rows * c);
                for r in 0..rows {
                    for j in 0..w {
                        d[r * c + start + j] += g[r * w + j];
                    }
                }
            }
        }
        Op::Transpose(a) => {
            if needs(*a) {
                let src = val(*a);
                let (r, c) = (src.rows(), src.cols());
                let d = slot(grads, *a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::MeanRows(a) => {
            if needs(*a) {
                let src = val(*a);
                let (r, c) = (src.rows(), src.cols());
                let inv = T::one() / T::from_usize(r).expect("rows");
                let d = slot(grads, *a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += g[j] * inv;
                    }
                }
            }
        }
        Op::SumAll(a) => {
            if needs(*a) {
                let n = val(*a).len();
                let d = slot(grads, *a, n);
                d.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Gather { table, ids } => {
            if needs(*table) {
                let t = val(*table);
                let c = t.cols();
                let d = slot(grads, *table, t.len());
                for (r, &row) in ids.iter().enumerate() {
                    for j in 0..c {
                        d[row * c + j] += g[r * c + j];
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            scale,
        } => {
            if needs(*logits) {
                let v = val(*logits).cols();
                let d = slot(grads, *logits, probs.len());
                let s = *scale * g[0];
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..v {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        d[r * v + j] += s * (probs[r * v + j] - onehot);
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if needs(*a) {
                let d = slot(grads, *a, g.len());
                d.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn mismatch(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// Row-wise softmax of `x`, with disallowed entries forced to zero.
pub fn softmax_rows<T: Scalar>(x: &[T], cols: usize, mask: Option<&[bool]>) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..x.len() / cols {
        let row = &x[r * cols..(r + 1) * cols];
        let allowed = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            continue;
        }
        let mut sum = T::zero();
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) {
                let e = (v - max).exp();
                out[r * cols + j] = e;
                sum += e;
            }
        }
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o /= sum;
        }
    }
    out
}

impl<'a, T: Scalar> Var<'a, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'a Tape<'a, T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.rows()
    }

    pub fn cols(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.cols()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.grad_flag(self.id)
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Var<'a, T> {
        let rg = self.requires_grad();
        let id = self.tape.push(value, op, rg);
        Var {
            tape: self.tape,
            id,
        }
    }

    fn binary(self, other: Var<'a, T>, value: Tensor<T>, op: Op<T>) -> Var<'a, T> {
        let rg = self.requires_grad() || other.requires_grad();
        let id = self.tape.push(value, op, rg);
        Var {
            tape: self.tape,
            id,
        }
    }

    /// Matrix product of the rank-2 views.
    pub fn matmul(self, other: Var<'a, T>) -> Result<Var<'a, T>> {
        let (a, b) = (self.value(), other.value());
        let out = a.matmul(&b)?;
        Ok(self.binary(other, out, Op::MatMul(self.id, other.id)))
    }

    /// `self · otherᵀ`; both operands share their column count.
    pub fn matmul_nt(self, other: Var<'a, T>) -> Result<Var<'a, T>> {
        let (a, b) = (self.value(), other.value());
        let (m, k, n) = (a.rows(), a.cols(), b.rows());
        if b.cols() != k {
            return Err(mismatch("matmul_nt", &a, &b));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data(),
            k as isize,
            1,
            b.data(),
            1,
            k as isize,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let value = Tensor::from_vec(&[m, n], out)?;
        Ok(self.binary(other, value, Op::MatMulNT(self.id, other.id)))
    }

    fn zip_same(
        self,
        other: Var<'a, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (a, b) = (self.value(), other.value());
        if a.len() != b.len() || a.cols() != b.cols() {
            return Err(mismatch(name, &a, &b));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(a.shape_or_scalar(), data)
    }

    pub fn add(self, other: Var<'a, T>) -> Result<Var<'a, T>> {
        let v = self.zip_same(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'a, T>) -> Result<Var<'a, T>> {
        let v = self.zip_same(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'a, T>) -> Result<Var<'a, T>> {
        let v = self.zip_same(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    fn row_broadcast(
        self,
        row: Var<'a, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (a, b) = (self.value(), row.value());
        let c = a.cols();
        if b.len() != c {
            return Err(mismatch(name, &a, &b));
        }
        let bd = b.data();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % c]))
            .collect();
        Tensor::from_vec(a.shape_or_scalar(), data)
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(self, row: Var<'a, T>) -> Result<Var<'a, T>> {
        let v = self.row_broadcast(row, "add_row", |x, y| x + y)?;
        Ok(self.binary(row, v, Op::AddRow(self.id, row.id)))
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(self, row: Var<'a, T>) -> Result<Var<'a, T>> {
        let v = self.row_broadcast(row, "mul_row", |x, y| x * y)?;
        Ok(self.binary(row, v, Op::MulRow(self.id, row.id)))
    }

    pub fn scale(self, s: f64) -> Var<'a, T> {
        let s = T::from_f64_lossy(s);
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn relu(self) -> Var<'a, T> {
        let v = self.value().map(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(v, Op::Relu(self.id))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(self) -> Var<'a, T> {
        let v = self.value().map(|x| x * sigmoid(x));
        self.unary(v, Op::Silu(self.id))
    }

    /// Row-wise standardisation to zero mean, unit variance.
    pub fn normalize_rows(self) -> Var<'a, T> {
        let a = self.value();
        let c = a.cols();
        let r = a.rows();
        let cf = T::from_usize(c).expect("width");
        let eps = T::from_f64_lossy(NORM_EPS);
        let mut xhat = vec![T::zero(); a.len()];
        let mut rstd = vec![T::zero(); r];
        for i in 0..r {
            let row = a.row(i);
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / cf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * rs;
            }
        }
        let value = Tensor::from_vec(a.shape_or_scalar(), xhat.clone()).expect("same shape");
        self.unary(
            value,
            Op::Normalize {
                x: self.id,
                xhat,
                rstd,
            },
        )
    }

    /// Layer normalisation with learned gain and bias.
    pub fn layer_norm(self, gain: Var<'a, T>, bias: Var<'a, T>) -> Result<Var<'a, T>> {
        self.normalize_rows().mul_row(gain)?.add_row(bias)
    }

    /// Row-wise softmax. `mask[i*cols + j] == false` excludes entry `j` of
    /// row `i`; excluded entries get probability zero.
    pub fn softmax(self, mask: Option<&[bool]>) -> Result<Var<'a, T>> {
        let a = self.value();
        if let Some(m) = mask {
            if m.len() != a.len() {
                return Err(Error::InvalidShape(format!(
                    "mask length {} for tensor {:?}",
                    m.len(),
                    a.shape()
                )));
            }
        }
        let out = softmax_rows(a.data(), a.cols(), mask);
        let value = Tensor::from_vec(a.shape_or_scalar(), out)?;
        Ok(self.unary(value, Op::Softmax(self.id)))
    }

    pub fn sum(self) -> Var<'a, T> {
        let s = self.value().data().iter().copied().sum();
        self.unary(Tensor::scalar(s), Op::SumAll(self.id))
    }

    /// Mean over rows: `[r × c] -> [1 × c]`.
    pub fn mean_rows(self) -> Var<'a, T> {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        let inv = T::one() / T::from_usize(r).expect("rows");
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for (o, &x) in out.iter_mut().zip(a.row(i)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let value = Tensor::from_vec(&[1, c], out).expect("row");
        self.unary(value, Op::MeanRows(self.id))
    }

    pub fn transpose(self) -> Var<'a, T> {
        let v = self.value().transpose();
        self.unary(v, Op::Transpose(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'a, T>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'a, T>> {
        let a = self.value();
        let c = a.cols();
        if len == 0 || start + len > a.rows() {
            return Err(Error::IndexOutOfRange {
                what: "row slice",
                index: start + len,
                bound: a.rows(),
            });
        }
        let data = a.data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::from_vec(&[len, c], data)?;
        Ok(self.unary(value, Op::SliceRows { x: self.id, start }))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'a, T>> {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        if len == 0 || start + len > c {
            return Err(Error::IndexOutOfRange {
                what: "column slice",
                index: start + len,
                bound: c,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&a.row(i)[start..start + len]);
        }
        let value = Tensor::from_vec(&[r, len], data)?;
        Ok(self.unary(value, Op::SliceCols { x: self.id, start }))
    }

    /// Embedding lookup: rows `ids` of `self` stacked into `[ids.len() × cols]`.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'a, T>> {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        if ids.is_empty() {
            return Err(Error::InvalidShape("gather of zero rows".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= r {
                return Err(Error::IndexOutOfRange {
                    what: "gather",
                    index: i,
                    bound: r,
                });
            }
            data.extend_from_slice(a.row(i));
        }
        let value = Tensor::from_vec(&[ids.len(), c], data)?;
        Ok(self.unary(
            value,
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Softmax cross-entropy of row-wise logits `[B × V]` against class
    /// indices. `Mean` divides the summed negative log-likelihood by `B`.
    pub fn cross_entropy(self, targets: &[usize], reduction: Reduction) -> Result<Var<'a, T>> {
        let a = self.value();
        let (b, v) = (a.rows(), a.cols());
        if targets.len() != b {
            return Err(Error::InvalidShape(format!(
                "{} targets for {b} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::IndexOutOfRange {
                what: "target class",
                index: bad,
                bound: v,
            });
        }
        let probs = softmax_rows(a.data(), v, None);
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = a.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            total += lse - row[t];
        }
        let scale = match reduction {
            Reduction::Mean => T::one() / T::from_usize(b).expect("batch"),
            Reduction::Sum => T::one(),
        };
        Ok(self.unary(
            Tensor::scalar(total * scale),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
                scale,
            },
        ))
    }
}

/// Stacks matrices vertically; all parts must share a column count.
pub fn concat_rows<'a, T: Scalar>(parts: &[Var<'a, T>]) -> Result<Var<'a, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidShape("concat of nothing".into()))?;
    let c = first.cols();
    let mut data = Vec::new();
    let mut rows = 0;
    let mut rg = false;
    for p in parts {
        let v = p.value();
        if v.cols() != c {
            return Err(mismatch("concat_rows", &first.value(), &v));
        }
        rows += v.rows();
        data.extend_from_slice(v.data());
        rg |= p.requires_grad();
    }
    let value = Tensor::from_vec(&[rows, c], data)?;
    let tape = first.tape;
    let id = tape.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), rg);
    Ok(Var { tape, id })
}

/// Joins matrices side by side; all parts must share a row count.
pub fn concat_cols<'a, T: Scalar>(parts: &[Var<'a, T>]) -> Result<Var<'a, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidShape("concat of nothing".into()))?;
    let r = first.rows();
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    for v in &values {
        if v.rows() != r {
            return Err(mismatch("concat_cols", &values[0], v));
        }
    }
    let total: usize = values.iter().map(|v| v.cols()).sum();
    let mut data = Vec::with_capacity(r * total);
    for i in 0..r {
        for v in &values {
            data.extend_from_slice(v.row(i));
        }
    }
    let rg = parts.iter().any(|p| p.requires_grad());
    let value = Tensor::from_vec(&[r, total], data)?;
    let tape = first.tape;
    let id = tape.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rg);
    Ok(Var { tape, id })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.0, 9.0]]));
        let g = tape.backward(w.sum()).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn linear_gradient_is_outer_structure() {
        // loss = sum(W·x) → dW[i][j] = x[j]
        let tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]));
        let x = tape.constant(t(&[vec![0.5], vec![-1.0], vec![2.0]]));
        let loss = w.matmul(x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[vec![1.0, 2.0]]));
        assert!(matches!(tape.backward(w), Err(Error::NotScalar(_))));
    }

    #[test]
    fn uniform_cross_entropy_is_ln_v() {
        let tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(&[3, 10]));
        let loss = logits.cross_entropy(&[0, 4, 9], Reduction::Mean).unwrap();
        let v = loss.value().item().unwrap();
        assert!((v - 10f64.ln()).abs() < 1e-12);
        assert!((v - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn peaked_cross_entropy_vanishes() {
        let tape = Tape::<f64>::new();
        let mut l = Tensor::zeros(&[1, 5]);
        l.data_mut()[2] = 1e6;
        let loss = tape.leaf(l).cross_entropy(&[2], Reduction::Mean).unwrap();
        assert!(loss.value().item().unwrap() < 1e-6);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let tape = Tape::<f64>::new();
        let logits = tape.leaf(t(&[vec![1.0, 2.0, 0.5], vec![0.0, -1.0, 3.0]]));
        let loss = logits.cross_entropy(&[1, 0], Reduction::Mean).unwrap();
        let g = tape.backward(loss).unwrap();
        let p = softmax_rows(logits.value().data(), 3, None);
        let expect: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(i, &pi)| {
                let onehot = if i == 1 || i == 3 { 1.0 } else { 0.0 };
                (pi - onehot) / 2.0
            })
            .collect();
        for (a, b) in g.get(logits).unwrap().data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            logits.cross_entropy(&[3], Reduction::Mean),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn masked_softmax_rows_sum_to_one() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0]]));
        let mask = [true, false, true, true, true, false];
        let y = x.softmax(Some(&mask)).unwrap().value();
        assert_eq!(y.at(0, 1), 0.0);
        assert_eq!(y.at(1, 2), 0.0);
        for r in 0..2 {
            let s: f64 = y.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", t(&[vec![2.0]]));
        let tape = Tape::with_params(&store);
        let a = tape.param("w").unwrap();
        let b = tape.param("w").unwrap();
        assert_eq!(a.id(), b.id());
        let loss = a.mul(b).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param("w").unwrap().data(), &[4.0]);
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        store.insert("enc.w", t(&[vec![2.0]]));
        store.insert("dec.w", t(&[vec![3.0]]));
        store.freeze("enc").unwrap();
        let tape = Tape::with_params(&store);
        let loss = tape
            .param("enc.w")
            .unwrap()
            .mul(tape.param("dec.w").unwrap())
            .unwrap()
            .sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.param("enc.w").is_none());
        assert_eq!(g.param("dec.w").unwrap().data(), &[2.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[vec![1.0, 2.0]]));
        let b = tape.leaf(t(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let c = concat_rows(&[a, b]).unwrap();
        assert_eq!(c.shape(), vec![3, 2]);
        let s = c.slice_rows(1, 2).unwrap();
        assert_eq!(s.value().data(), b.value().data());
        let d = concat_cols(&[b, b]).unwrap();
        assert_eq!(d.value().row(1), &[5.0, 6.0, 5.0, 6.0]);
    }
}
