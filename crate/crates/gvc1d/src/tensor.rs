//! Dense tensors with reverse-mode autodiff.
//!
//! A `Tape` owns an append-only list of nodes; `Tensor` handles are cheap
//! indices into it. Every primitive records enough structure for the
//! backward pass, which walks the tape in reverse. Reductions are always
//! sequential (matmul accumulates over k in order, sums run left to
//! right), so forward evaluation is bitwise deterministic for fixed
//! inputs — the entropy-coding path depends on this.

use std::cell::RefCell;
use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub};
use std::rc::Rc;

use crate::detmath;
use crate::error::{GvcError, Result};

/// Scalar element type. f32 for training/inference throughput, f64 for
/// gradient checks. Transcendentals route through `detmath` so results
/// do not depend on the platform libm.
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;

    fn exp(self) -> Self {
        Self::from_f64(detmath::exp(self.to_f64()))
    }
    fn ln(self) -> Self {
        Self::from_f64(detmath::ln(self.to_f64()))
    }
    fn tanh(self) -> Self {
        Self::from_f64(detmath::tanh(self.to_f64()))
    }
    fn norm_cdf(self) -> Self {
        Self::from_f64(detmath::norm_cdf(self.to_f64()))
    }
    fn norm_pdf(self) -> Self {
        Self::from_f64(detmath::norm_pdf(self.to_f64()))
    }
    fn sqrt(self) -> Self;
    fn abs(self) -> Self {
        if self < Self::ZERO {
            -self
        } else {
            self
        }
    }
}

impl Scalar for f32 {
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn sqrt(self) -> f32 {
        f32::sqrt(self)
    }
}

impl Scalar for f64 {
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
}

/// How an elementwise operand maps onto the output shape.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Bc {
    /// Same shape as output.
    Same,
    /// Operand shape equals the trailing dims of the output.
    Suffix,
    /// Single element.
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum EwKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul,
    Transpose,
    Elementwise {
        kind: EwKind,
        bc: [Bc; 2],
    },
    Scale(f64),
    AddScalar,
    Neg,
    Exp,
    Ln,
    Gelu,
    NormCdf,
    Clamp {
        lo: f64,
        hi: f64,
    },
    SteRound,
    Reshape,
    Softmax {
        axis: usize,
    },
    LayerNorm {
        eps: f64,
    },
    ConcatRows {
        sizes: Vec<usize>,
    },
    SliceRows {
        start: usize,
    },
    ConcatCols {
        widths: Vec<usize>,
    },
    SliceCols {
        start: usize,
    },
    GatherRows {
        indices: Vec<usize>,
    },
    Im2Patches {
        c: usize,
        h: usize,
        w: usize,
        p: usize,
    },
    Patches2Im {
        c: usize,
        h: usize,
        w: usize,
        p: usize,
    },
    Rope2D {
        positions: Rc<Vec<(f64, f64)>>,
        base: f64,
    },
    SumAll,
    MeanAll,
    MeanRows,
}

struct Node<S: Scalar> {
    data: Vec<S>,
    shape: Vec<usize>,
    op: Op,
    parents: Vec<usize>,
    needs_grad: bool,
    grad: Option<Vec<S>>,
}

pub struct TapeInner<S: Scalar> {
    nodes: Vec<Node<S>>,
}

/// Shared recording tape for a single forward/backward episode.
#[derive(Clone)]
pub struct Tape<S: Scalar> {
    inner: Rc<RefCell<TapeInner<S>>>,
}

/// Handle to a value on a tape.
#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    tape: Tape<S>,
    id: usize,
    shape: Vec<usize>,
}

impl<S: Scalar> Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.id, self.shape)
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, data: Vec<S>, shape: Vec<usize>, requires_grad: bool) -> Result<Tensor<S>> {
        if numel(&shape) != data.len() {
            return Err(GvcError::dim(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(data, shape, Op::Leaf, vec![], requires_grad))
    }

    pub fn constant(&self, data: Vec<S>, shape: Vec<usize>) -> Result<Tensor<S>> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&self, v: S) -> Tensor<S> {
        self.leaf(vec![v], vec![1], false).unwrap()
    }

    pub fn zeros(&self, shape: Vec<usize>, requires_grad: bool) -> Tensor<S> {
        let n = numel(&shape);
        self.leaf(vec![S::ZERO; n], shape, requires_grad).unwrap()
    }

    fn push(
        &self,
        data: Vec<S>,
        shape: Vec<usize>,
        op: Op,
        parents: Vec<usize>,
        needs_grad: bool,
    ) -> Tensor<S> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            data,
            shape: shape.clone(),
            op,
            parents,
            needs_grad,
            grad: None,
        });
        Tensor {
            tape: self.clone(),
            id,
            shape,
        }
    }

    pub fn zero_grads(&self) {
        for node in self.inner.borrow_mut().nodes.iter_mut() {
            node.grad = None;
        }
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        numel(&self.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tape(&self) -> &Tape<S> {
        &self.tape
    }

    pub fn value(&self) -> Vec<S> {
        self.tape.inner.borrow().nodes[self.id].data.clone()
    }

    pub fn with_data<R>(&self, f: impl FnOnce(&[S]) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].data)
    }

    pub fn item(&self) -> S {
        let inner = self.tape.inner.borrow();
        let d = &inner.nodes[self.id].data;
        assert_eq!(d.len(), 1, "item() on non-scalar tensor");
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].needs_grad
    }

    /// Copy the value onto the same tape as a fresh constant leaf.
    pub fn detach(&self) -> Tensor<S> {
        self.tape.constant(self.value(), self.shape.clone()).unwrap()
    }

    fn same_tape(&self, other: &Tensor<S>) -> Result<()> {
        if !Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            return Err(GvcError::State("operands live on different tapes".into()));
        }
        Ok(())
    }

    fn unary(&self, op: Op, f: impl Fn(S) -> S) -> Tensor<S> {
        let inner = self.tape.inner.borrow();
        let data: Vec<S> = inner.nodes[self.id].data.iter().map(|&x| f(x)).collect();
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        self.tape.push(data, self.shape.clone(), op, vec![self.id], needs)
    }

    // ---- elementwise with trailing broadcast ----

    fn bc_kind(out: &[usize], operand: &[usize]) -> Option<Bc> {
        if operand == out {
            return Some(Bc::Same);
        }
        if numel(operand) == 1 {
            return Some(Bc::Scalar);
        }
        if operand.len() <= out.len() && &out[out.len() - operand.len()..] == operand {
            return Some(Bc::Suffix);
        }
        None
    }

    fn elementwise(&self, other: &Tensor<S>, kind: EwKind) -> Result<Tensor<S>> {
        self.same_tape(other)?;
        let (out_shape, bc) = {
            let a = &self.shape;
            let b = &other.shape;
            if let Some(k) = Self::bc_kind(a, b) {
                (a.clone(), [Bc::Same, k])
            } else if let Some(k) = Self::bc_kind(b, a) {
                (b.clone(), [k, Bc::Same])
            } else {
                return Err(GvcError::dim(format!(
                    "shapes {:?} and {:?} are not broadcastable",
                    a, b
                )));
            }
        };
        let n = numel(&out_shape);
        let inner = self.tape.inner.borrow();
        let ad = &inner.nodes[self.id].data;
        let bd = &inner.nodes[other.id].data;
        let fetch = |d: &[S], k: Bc, i: usize| -> S {
            match k {
                Bc::Same => d[i],
                Bc::Scalar => d[0],
                Bc::Suffix => d[i % d.len()],
            }
        };
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let x = fetch(ad, bc[0], i);
            let y = fetch(bd, bc[1], i);
            data.push(match kind {
                EwKind::Add => x + y,
                EwKind::Sub => x - y,
                EwKind::Mul => x * y,
                EwKind::Div => x / y,
            });
        }
        let needs = inner.nodes[self.id].needs_grad || inner.nodes[other.id].needs_grad;
        drop(inner);
        Ok(self.tape.push(
            data,
            out_shape,
            Op::Elementwise { kind, bc },
            vec![self.id, other.id],
            needs,
        ))
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.elementwise(other, EwKind::Add)
    }
    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.elementwise(other, EwKind::Sub)
    }
    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.elementwise(other, EwKind::Mul)
    }
    pub fn div(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.elementwise(other, EwKind::Div)
    }

    pub fn scale(&self, c: f64) -> Tensor<S> {
        let cs = S::from_f64(c);
        self.unary(Op::Scale(c), |x| x * cs)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<S> {
        let cs = S::from_f64(c);
        self.unary(Op::AddScalar, |x| x + cs)
    }

    pub fn neg(&self) -> Tensor<S> {
        self.unary(Op::Neg, |x| -x)
    }

    pub fn exp(&self) -> Tensor<S> {
        self.unary(Op::Exp, |x| x.exp())
    }

    pub fn ln(&self) -> Tensor<S> {
        self.unary(Op::Ln, |x| x.ln())
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<S> {
        self.unary(Op::Gelu, |x| S::from_f64(gelu_f(x.to_f64())))
    }

    /// Standard normal CDF, elementwise.
    pub fn norm_cdf(&self) -> Tensor<S> {
        self.unary(Op::NormCdf, |x| x.norm_cdf())
    }

    /// Clamp with pass-through gradient inside [lo, hi], zero outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<S> {
        let (l, h) = (S::from_f64(lo), S::from_f64(hi));
        self.unary(Op::Clamp { lo, hi }, move |x| {
            if x < l {
                l
            } else if x > h {
                h
            } else {
                x
            }
        })
    }

    /// Round half away from zero with straight-through (identity) gradient.
    pub fn ste_round(&self) -> Tensor<S> {
        self.unary(Op::SteRound, |x| S::from_f64(round_half_away(x.to_f64())))
    }

    /// Reinterpret the buffer with a new shape of equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<S>> {
        if numel(&shape) != numel(&self.shape) {
            return Err(GvcError::dim(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        let inner = self.tape.inner.borrow();
        let data = inner.nodes[self.id].data.clone();
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        Ok(self.tape.push(data, shape, Op::Reshape, vec![self.id], needs))
    }

    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.same_tape(other)?;
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(GvcError::dim(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(GvcError::dim(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.id].data;
        let b = &inner.nodes[other.id].data;
        let data = matmul_raw(a, b, m, k, n);
        let needs = inner.nodes[self.id].needs_grad || inner.nodes[other.id].needs_grad;
        drop(inner);
        Ok(self.tape.push(
            data,
            vec![m, n],
            Op::Matmul,
            vec![self.id, other.id],
            needs,
        ))
    }

    pub fn transpose(&self) -> Result<Tensor<S>> {
        if self.shape.len() != 2 {
            return Err(GvcError::dim(format!(
                "transpose needs rank-2, got {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.id].data;
        let mut data = vec![S::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = a[i * n + j];
            }
        }
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        Ok(self
            .tape
            .push(data, vec![n, m], Op::Transpose, vec![self.id], needs))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor<S>> {
        if axis >= self.shape.len() {
            return Err(GvcError::dim(format!(
                "softmax axis {} out of range for shape {:?}",
                axis, self.shape
            )));
        }
        let n = self.shape[axis];
        let inner_sz: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].data;
        let mut data = vec![S::ZERO; x.len()];
        for o in 0..outer {
            for i in 0..inner_sz {
                let idx = |j: usize| o * n * inner_sz + j * inner_sz + i;
                let mut mx = x[idx(0)];
                for j in 1..n {
                    if x[idx(j)] > mx {
                        mx = x[idx(j)];
                    }
                }
                let mut sum = S::ZERO;
                for j in 0..n {
                    let e = (x[idx(j)] - mx).exp();
                    data[idx(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    data[idx(j)] = data[idx(j)] / sum;
                }
            }
        }
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        Ok(self
            .tape
            .push(data, self.shape.clone(), Op::Softmax { axis }, vec![self.id], needs))
    }

    /// Layer normalization over the last axis with affine (gamma, beta).
    pub fn layernorm(&self, gamma: &Tensor<S>, beta: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        if eps <= 0.0 {
            return Err(GvcError::config("layernorm eps must be > 0"));
        }
        let d = *self.shape.last().ok_or_else(|| GvcError::dim("layernorm on rank-0"))?;
        if gamma.len() != d || beta.len() != d {
            return Err(GvcError::dim(format!(
                "layernorm affine length {}/{} does not match last dim {}",
                gamma.len(),
                beta.len(),
                d
            )));
        }
        let rows = self.len() / d;
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].data;
        let g = &inner.nodes[gamma.id].data;
        let b = &inner.nodes[beta.id].data;
        let eps_s = S::from_f64(eps);
        let inv_d = S::from_f64(1.0 / d as f64);
        let mut data = vec![S::ZERO; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mut mean = S::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_d;
            let mut var = S::ZERO;
            for &v in row {
                let dv = v - mean;
                var += dv * dv;
            }
            var *= inv_d;
            let inv_std = S::ONE / (var + eps_s).sqrt();
            for j in 0..d {
                data[r * d + j] = g[j] * ((row[j] - mean) * inv_std) + b[j];
            }
        }
        let needs = inner.nodes[self.id].needs_grad
            || inner.nodes[gamma.id].needs_grad
            || inner.nodes[beta.id].needs_grad;
        drop(inner);
        Ok(self.tape.push(
            data,
            self.shape.clone(),
            Op::LayerNorm { eps },
            vec![self.id, gamma.id, beta.id],
            needs,
        ))
    }

    /// Concatenate along axis 0. All operands must share trailing dims.
    pub fn concat_rows(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
        if parts.is_empty() {
            return Err(GvcError::dim("concat_rows of zero tensors"));
        }
        let tape = parts[0].tape.clone();
        let tail = &parts[0].shape[1..];
        let mut rows = 0usize;
        for p in parts {
            parts[0].same_tape(p)?;
            if &p.shape[1..] != tail {
                return Err(GvcError::dim(format!(
                    "concat_rows trailing dims differ: {:?} vs {:?}",
                    parts[0].shape, p.shape
                )));
            }
            rows += p.shape[0];
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        let inner = tape.inner.borrow();
        let mut data = Vec::with_capacity(numel(&shape));
        let mut sizes = Vec::with_capacity(parts.len());
        let mut needs = false;
        for p in parts {
            let nd = &inner.nodes[p.id];
            data.extend_from_slice(&nd.data);
            sizes.push(nd.data.len());
            needs |= nd.needs_grad;
        }
        let parents: Vec<usize> = parts.iter().map(|p| p.id).collect();
        drop(inner);
        Ok(tape.push(data, shape, Op::ConcatRows { sizes }, parents, needs))
    }

    /// Rows start..start+len along axis 0.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor<S>> {
        if self.shape.is_empty() || start + len > self.shape[0] {
            return Err(GvcError::dim(format!(
                "slice_rows {}..{} out of range for shape {:?}",
                start,
                start + len,
                self.shape
            )));
        }
        let row: usize = self.shape[1..].iter().product();
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].data;
        let data = x[start * row..(start + len) * row].to_vec();
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        let mut shape = vec![len];
        shape.extend_from_slice(&self.shape[1..]);
        Ok(self
            .tape
            .push(data, shape, Op::SliceRows { start }, vec![self.id], needs))
    }

    /// Concatenate rank-2 tensors along axis 1.
    pub fn concat_cols(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
        if parts.is_empty() {
            return Err(GvcError::dim("concat_cols of zero tensors"));
        }
        let tape = parts[0].tape.clone();
        let rows = parts[0].shape[0];
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for p in parts {
            parts[0].same_tape(p)?;
            if p.shape.len() != 2 || p.shape[0] != rows {
                return Err(GvcError::dim(format!(
                    "concat_cols expects rank-2 with {} rows, got {:?}",
                    rows, p.shape
                )));
            }
            widths.push(p.shape[1]);
            total += p.shape[1];
        }
        let inner = tape.inner.borrow();
        let mut data = vec![S::ZERO; rows * total];
        let mut needs = false;
        let mut off = 0usize;
        for (pi, p) in parts.iter().enumerate() {
            let nd = &inner.nodes[p.id];
            let w = widths[pi];
            for r in 0..rows {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&nd.data[r * w..(r + 1) * w]);
            }
            needs |= nd.needs_grad;
            off += w;
        }
        let parents: Vec<usize> = parts.iter().map(|p| p.id).collect();
        drop(inner);
        Ok(tape.push(data, vec![rows, total], Op::ConcatCols { widths }, parents, needs))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<S>> {
        if self.shape.len() != 2 || start + len > self.shape[1] {
            return Err(GvcError::dim(format!(
                "slice_cols {}..{} out of range for shape {:?}",
                start,
                start + len,
                self.shape
            )));
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].data;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x[r * cols + start..r * cols + start + len]);
        }
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        Ok(self
            .tape
            .push(data, vec![rows, len], Op::SliceCols { start }, vec![self.id], needs))
    }

    /// Row gather (embedding lookup). Gradient scatter-adds into the table.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<S>> {
        if self.shape.len() != 2 {
            return Err(GvcError::dim("gather_rows needs rank-2 table"));
        }
        let (v, d) = (self.shape[0], self.shape[1]);
        for &i in indices {
            if i >= v {
                return Err(GvcError::dim(format!(
                    "gather index {} out of range for table with {} rows",
                    i, v
                )));
            }
        }
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].data;
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&x[i * d..(i + 1) * d]);
        }
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        Ok(self.tape.push(
            data,
            vec![indices.len(), d],
            Op::GatherRows {
                indices: indices.to_vec(),
            },
            vec![self.id],
            needs,
        ))
    }

    /// [c,h,w] image -> [(h/p)*(w/p), c*p*p] patch matrix, patches in
    /// row-major grid order, channels-major within a patch.
    pub fn im2patches(&self, p: usize) -> Result<Tensor<S>> {
        if self.shape.len() != 3 {
            return Err(GvcError::dim(format!(
                "im2patches needs [c,h,w], got {:?}",
                self.shape
            )));
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        if h % p != 0 || w % p != 0 {
            return Err(GvcError::config(format!(
                "image {}x{} not divisible by patch size {}",
                h, w, p
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].data;
        let mut data = vec![S::ZERO; x.len()];
        let pd = c * p * p;
        for gr in 0..gh {
            for gc in 0..gw {
                let patch = gr * gw + gc;
                for ch in 0..c {
                    for pr in 0..p {
                        for pc in 0..p {
                            let src = ch * h * w + (gr * p + pr) * w + (gc * p + pc);
                            let dst = patch * pd + ch * p * p + pr * p + pc;
                            data[dst] = x[src];
                        }
                    }
                }
            }
        }
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        Ok(self.tape.push(
            data,
            vec![gh * gw, pd],
            Op::Im2Patches { c, h, w, p },
            vec![self.id],
            needs,
        ))
    }

    /// Inverse of `im2patches`: [(h/p)*(w/p), c*p*p] -> [c,h,w].
    pub fn patches2im(&self, c: usize, h: usize, w: usize, p: usize) -> Result<Tensor<S>> {
        let (gh, gw) = (h / p, w / p);
        let pd = c * p * p;
        if self.shape != [gh * gw, pd] {
            return Err(GvcError::dim(format!(
                "patches2im expects [{}, {}], got {:?}",
                gh * gw,
                pd,
                self.shape
            )));
        }
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].data;
        let mut data = vec![S::ZERO; c * h * w];
        for gr in 0..gh {
            for gc in 0..gw {
                let patch = gr * gw + gc;
                for ch in 0..c {
                    for pr in 0..p {
                        for pc in 0..p {
                            let dst = ch * h * w + (gr * p + pr) * w + (gc * p + pc);
                            let src = patch * pd + ch * p * p + pr * p + pc;
                            data[dst] = x[src];
                        }
                    }
                }
            }
        }
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        Ok(self.tape.push(
            data,
            vec![c, h, w],
            Op::Patches2Im { c, h, w, p },
            vec![self.id],
            needs,
        ))
    }

    /// 2D rotary embedding: first half of the feature dim rotates by the
    /// row coordinate, second half by the column coordinate, in (even,
    /// odd) pairs. Pure rotation, so norms are preserved.
    pub fn rope2d(&self, positions: &[(f64, f64)], base: f64) -> Result<Tensor<S>> {
        if self.shape.len() != 2 {
            return Err(GvcError::dim("rope2d needs rank-2 [S, d]"));
        }
        let (s, d) = (self.shape[0], self.shape[1]);
        if positions.len() != s {
            return Err(GvcError::dim(format!(
                "rope2d got {} positions for {} tokens",
                positions.len(),
                s
            )));
        }
        if d % 4 != 0 {
            return Err(GvcError::config(format!(
                "rope2d feature dim {} must be divisible by 4",
                d
            )));
        }
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].data;
        let mut data = x.clone();
        rope2d_forward(&mut data, positions, d, base, false);
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        Ok(self.tape.push(
            data,
            self.shape.clone(),
            Op::Rope2D {
                positions: Rc::new(positions.to_vec()),
                base,
            },
            vec![self.id],
            needs,
        ))
    }

    pub fn sum_all(&self) -> Tensor<S> {
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].data;
        let mut s = S::ZERO;
        for &v in x {
            s += v;
        }
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        self.tape.push(vec![s], vec![1], Op::SumAll, vec![self.id], needs)
    }

    pub fn mean_all(&self) -> Tensor<S> {
        let n = self.len();
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].data;
        let mut s = S::ZERO;
        for &v in x {
            s += v;
        }
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        let m = s * S::from_f64(1.0 / n as f64);
        self.tape.push(vec![m], vec![1], Op::MeanAll, vec![self.id], needs)
    }

    /// Mean over axis 0 of a rank-2 tensor -> [1, d].
    pub fn mean_rows(&self) -> Result<Tensor<S>> {
        if self.shape.len() != 2 {
            return Err(GvcError::dim("mean_rows needs rank-2"));
        }
        let (rows, d) = (self.shape[0], self.shape[1]);
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].data;
        let inv = S::from_f64(1.0 / rows as f64);
        let mut data = vec![S::ZERO; d];
        for r in 0..rows {
            for j in 0..d {
                data[j] += x[r * d + j];
            }
        }
        for v in data.iter_mut() {
            *v *= inv;
        }
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        Ok(self
            .tape
            .push(data, vec![1, d], Op::MeanRows, vec![self.id], needs))
    }

    /// Reverse-mode sweep from this scalar tensor. Accumulates into the
    /// `grad` buffers of every `requires_grad` leaf reachable from here.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(GvcError::State(
                "backward() must start from a scalar tensor".into(),
            ));
        }
        let mut inner = self.tape.inner.borrow_mut();
        let n = inner.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = vec![None; n];
        grads[self.id] = Some(vec![S::ONE]);
        for i in (0..=self.id).rev() {
            let g_out = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            // split: read node i immutably while writing parent grads
            let (op, parents) = {
                let nd = &inner.nodes[i];
                if !nd.needs_grad {
                    continue;
                }
                (nd.op.clone(), nd.parents.clone())
            };
            if matches!(op, Op::Leaf) {
                let nd = &mut inner.nodes[i];
                match nd.grad.as_mut() {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(g_out.iter()) {
                            *a += *g;
                        }
                    }
                    None => nd.grad = Some(g_out),
                }
                continue;
            }
            backprop_op(&inner.nodes, i, &op, &parents, &g_out, &mut grads);
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, len: usize, f: impl FnOnce(&mut [S])) {
    if slot.is_none() {
        *slot = Some(vec![S::ZERO; len]);
    }
    f(slot.as_mut().unwrap());
}

#[allow(clippy::too_many_lines)]
fn backprop_op<S: Scalar>(
    nodes: &[Node<S>],
    i: usize,
    op: &Op,
    parents: &[usize],
    g_out: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let pdata = |k: usize| &nodes[parents[k]].data;
    let plen = |k: usize| nodes[parents[k]].data.len();
    let pneeds = |k: usize| nodes[parents[k]].needs_grad;
    match op {
        Op::Leaf => unreachable!(),
        Op::Matmul => {
            let (m, k) = (nodes[parents[0]].shape[0], nodes[parents[0]].shape[1]);
            let n = nodes[parents[1]].shape[1];
            if pneeds(0) {
                // dA = dC * B^T
                let b = pdata(1);
                accumulate(&mut grads[parents[0]], m * k, |ga| {
                    for ii in 0..m {
                        for jj in 0..n {
                            let g = g_out[ii * n + jj];
                            let brow = &b[..];
                            for kk in 0..k {
                                ga[ii * k + kk] += g * brow[kk * n + jj];
                            }
                        }
                    }
                });
            }
            if pneeds(1) {
                // dB = A^T * dC
                let a = pdata(0);
                accumulate(&mut grads[parents[1]], k * n, |gb| {
                    for ii in 0..m {
                        for kk in 0..k {
                            let av = a[ii * k + kk];
                            for jj in 0..n {
                                gb[kk * n + jj] += av * g_out[ii * n + jj];
                            }
                        }
                    }
                });
            }
        }
        Op::Transpose => {
            let (n2, m2) = (nodes[i].shape[0], nodes[i].shape[1]);
            if pneeds(0) {
                accumulate(&mut grads[parents[0]], plen(0), |g| {
                    for r in 0..n2 {
                        for c in 0..m2 {
                            g[c * n2 + r] += g_out[r * m2 + c];
                        }
                    }
                });
            }
        }
        Op::Elementwise { kind, bc } => {
            let n = g_out.len();
            let a = pdata(0);
            let b = pdata(1);
            let fetch = |d: &[S], k: Bc, idx: usize| -> S {
                match k {
                    Bc::Same => d[idx],
                    Bc::Scalar => d[0],
                    Bc::Suffix => d[idx % d.len()],
                }
            };
            let reduce_into = |g: &mut [S], k: Bc, idx: usize, v: S| match k {
                Bc::Same => g[idx] += v,
                Bc::Scalar => g[0] += v,
                Bc::Suffix => {
                    let l = g.len();
                    g[idx % l] += v;
                }
            };
            if pneeds(0) {
                accumulate(&mut grads[parents[0]], plen(0), |g| {
                    for idx in 0..n {
                        let v = match kind {
                            EwKind::Add | EwKind::Sub => g_out[idx],
                            EwKind::Mul => g_out[idx] * fetch(b, bc[1], idx),
                            EwKind::Div => g_out[idx] / fetch(b, bc[1], idx),
                        };
                        reduce_into(g, bc[0], idx, v);
                    }
                });
            }
            if pneeds(1) {
                accumulate(&mut grads[parents[1]], plen(1), |g| {
                    for idx in 0..n {
                        let v = match kind {
                            EwKind::Add => g_out[idx],
                            EwKind::Sub => -g_out[idx],
                            EwKind::Mul => g_out[idx] * fetch(a, bc[0], idx),
                            EwKind::Div => {
                                let bv = fetch(b, bc[1], idx);
                                -g_out[idx] * fetch(a, bc[0], idx) / (bv * bv)
                            }
                        };
                        reduce_into(g, bc[1], idx, v);
                    }
                });
            }
        }
        Op::Scale(c) => {
            let cs = S::from_f64(*c);
            accumulate(&mut grads[parents[0]], plen(0), |g| {
                for (gi, &go) in g.iter_mut().zip(g_out) {
                    *gi += go * cs;
                }
            });
        }
        Op::AddScalar => {
            accumulate(&mut grads[parents[0]], plen(0), |g| {
                for (gi, &go) in g.iter_mut().zip(g_out) {
                    *gi += go;
                }
            });
        }
        Op::Neg => {
            accumulate(&mut grads[parents[0]], plen(0), |g| {
                for (gi, &go) in g.iter_mut().zip(g_out) {
                    *gi += -go;
                }
            });
        }
        Op::Exp => {
            let y = &nodes[i].data;
            accumulate(&mut grads[parents[0]], plen(0), |g| {
                for idx in 0..g.len() {
                    g[idx] += g_out[idx] * y[idx];
                }
            });
        }
        Op::Ln => {
            let x = pdata(0);
            accumulate(&mut grads[parents[0]], plen(0), |g| {
                for idx in 0..g.len() {
                    g[idx] += g_out[idx] / x[idx];
                }
            });
        }
        Op::Gelu => {
            let x = pdata(0);
            accumulate(&mut grads[parents[0]], plen(0), |g| {
                for idx in 0..g.len() {
                    g[idx] += g_out[idx] * S::from_f64(gelu_grad_f(x[idx].to_f64()));
                }
            });
        }
        Op::NormCdf => {
            let x = pdata(0);
            accumulate(&mut grads[parents[0]], plen(0), |g| {
                for idx in 0..g.len() {
                    g[idx] += g_out[idx] * x[idx].norm_pdf();
                }
            });
        }
        Op::Clamp { lo, hi } => {
            let (l, h) = (S::from_f64(*lo), S::from_f64(*hi));
            let x = pdata(0);
            accumulate(&mut grads[parents[0]], plen(0), |g| {
                for idx in 0..g.len() {
                    if x[idx] >= l && x[idx] <= h {
                        g[idx] += g_out[idx];
                    }
                }
            });
        }
        Op::SteRound | Op::Reshape => {
            accumulate(&mut grads[parents[0]], plen(0), |g| {
                for (gi, &go) in g.iter_mut().zip(g_out) {
                    *gi += go;
                }
            });
        }
        Op::Softmax { axis } => {
            let y = &nodes[i].data;
            let shape = &nodes[i].shape;
            let n = shape[*axis];
            let inner_sz: usize = shape[*axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            accumulate(&mut grads[parents[0]], plen(0), |g| {
                for o in 0..outer {
                    for ii in 0..inner_sz {
                        let idx = |j: usize| o * n * inner_sz + j * inner_sz + ii;
                        let mut dot = S::ZERO;
                        for j in 0..n {
                            dot += y[idx(j)] * g_out[idx(j)];
                        }
                        for j in 0..n {
                            g[idx(j)] += y[idx(j)] * (g_out[idx(j)] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm { eps } => {
            let x = pdata(0);
            let gam = pdata(1);
            let d = gam.len();
            let rows = x.len() / d;
            let eps_s = S::from_f64(*eps);
            let inv_d = S::from_f64(1.0 / d as f64);
            // precompute per-row stats once
            let mut stats = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mut mean = S::ZERO;
                for &v in row {
                    mean += v;
                }
                mean *= inv_d;
                let mut var = S::ZERO;
                for &v in row {
                    let dv = v - mean;
                    var += dv * dv;
                }
                var *= inv_d;
                let inv_std = S::ONE / (var + eps_s).sqrt();
                stats.push((mean, inv_std));
            }
            if pneeds(0) {
                accumulate(&mut grads[parents[0]], plen(0), |g| {
                    for r in 0..rows {
                        let (mean, inv_std) = stats[r];
                        let row = &x[r * d..(r + 1) * d];
                        let go = &g_out[r * d..(r + 1) * d];
                        let mut m1 = S::ZERO; // mean of dxhat
                        let mut m2 = S::ZERO; // mean of dxhat * xhat
                        for j in 0..d {
                            let xh = (row[j] - mean) * inv_std;
                            let dxh = go[j] * gam[j];
                            m1 += dxh;
                            m2 += dxh * xh;
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let xh = (row[j] - mean) * inv_std;
                            let dxh = go[j] * gam[j];
                            g[r * d + j] += (dxh - m1 - xh * m2) * inv_std;
                        }
                    }
                });
            }
            if pneeds(1) {
                accumulate(&mut grads[parents[1]], d, |g| {
                    for r in 0..rows {
                        let (mean, inv_std) = stats[r];
                        for j in 0..d {
                            let xh = (x[r * d + j] - mean) * inv_std;
                            g[j] += g_out[r * d + j] * xh;
                        }
                    }
                });
            }
            if pneeds(2) {
                accumulate(&mut grads[parents[2]], d, |g| {
                    for r in 0..rows {
                        for j in 0..d {
                            g[j] += g_out[r * d + j];
                        }
                    }
                });
            }
        }
        Op::ConcatRows { sizes } => {
            let mut off = 0usize;
            for (k, &sz) in sizes.iter().enumerate() {
                if pneeds(k) {
                    let seg = &g_out[off..off + sz];
                    accumulate(&mut grads[parents[k]], sz, |g| {
                        for (gi, &go) in g.iter_mut().zip(seg) {
                            *gi += go;
                        }
                    });
                }
                off += sz;
            }
        }
        Op::SliceRows { start } => {
            let row: usize = nodes[parents[0]].shape[1..].iter().product();
            accumulate(&mut grads[parents[0]], plen(0), |g| {
                for (k, &go) in g_out.iter().enumerate() {
                    g[start * row + k] += go;
                }
            });
        }
        Op::ConcatCols { widths } => {
            let rows = nodes[i].shape[0];
            let total = nodes[i].shape[1];
            let mut off = 0usize;
            for (k, &w) in widths.iter().enumerate() {
                if pneeds(k) {
                    accumulate(&mut grads[parents[k]], rows * w, |g| {
                        for r in 0..rows {
                            for c in 0..w {
                                g[r * w + c] += g_out[r * total + off + c];
                            }
                        }
                    });
                }
                off += w;
            }
        }
        Op::SliceCols { start } => {
            let (rows, len) = (nodes[i].shape[0], nodes[i].shape[1]);
            let cols = nodes[parents[0]].shape[1];
            accumulate(&mut grads[parents[0]], plen(0), |g| {
                for r in 0..rows {
                    for c in 0..len {
                        g[r * cols + start + c] += g_out[r * len + c];
                    }
                }
            });
        }
        Op::GatherRows { indices } => {
            let d = nodes[parents[0]].shape[1];
            accumulate(&mut grads[parents[0]], plen(0), |g| {
                for (k, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        g[idx * d + j] += g_out[k * d + j];
                    }
                }
            });
        }
        Op::Im2Patches { c, h, w, p } => {
            let (c, h, w, p) = (*c, *h, *w, *p);
            let (gw, pd) = (w / p, c * p * p);
            accumulate(&mut grads[parents[0]], plen(0), |g| {
                for gr in 0..h / p {
                    for gc in 0..gw {
                        let patch = gr * gw + gc;
                        for ch in 0..c {
                            for pr in 0..p {
                                for pc in 0..p {
                                    let src = ch * h * w + (gr * p + pr) * w + (gc * p + pc);
                                    let dst = patch * pd + ch * p * p + pr * p + pc;
                                    g[src] += g_out[dst];
                                }
                            }
                        }
                    }
                }
            });
        }
        Op::Patches2Im { c, h, w, p } => {
            let (c, h, w, p) = (*c, *h, *w, *p);
            let (gw, pd) = (w / p, c * p * p);
            accumulate(&mut grads[parents[0]], plen(0), |g| {
                for gr in 0..h / p {
                    for gc in 0..gw {
                        let patch = gr * gw + gc;
                        for ch in 0..c {
                            for pr in 0..p {
                                for pc in 0..p {
                                    let dst = ch * h * w + (gr * p + pr) * w + (gc * p + pc);
                                    let src = patch * pd + ch * p * p + pr * p + pc;
                                    g[src] += g_out[dst];
                                }
                            }
                        }
                    }
                }
            });
        }
        Op::Rope2D { positions, base } => {
            let d = nodes[i].shape[1];
            accumulate(&mut grads[parents[0]], plen(0), |g| {
                // adjoint of a rotation is the inverse rotation
                let mut gr = g_out.to_vec();
                rope2d_forward(&mut gr, positions, d, *base, true);
                for (gi, &go) in g.iter_mut().zip(gr.iter()) {
                    *gi += go;
                }
            });
        }
        Op::SumAll => {
            let go = g_out[0];
            accumulate(&mut grads[parents[0]], plen(0), |g| {
                for gi in g.iter_mut() {
                    *gi += go;
                }
            });
        }
        Op::MeanAll => {
            let n = plen(0);
            let go = g_out[0] * S::from_f64(1.0 / n as f64);
            accumulate(&mut grads[parents[0]], plen(0), |g| {
                for gi in g.iter_mut() {
                    *gi += go;
                }
            });
        }
        Op::MeanRows => {
            let rows = nodes[parents[0]].shape[0];
            let d = nodes[parents[0]].shape[1];
            let inv = S::from_f64(1.0 / rows as f64);
            accumulate(&mut grads[parents[0]], plen(0), |g| {
                for r in 0..rows {
                    for j in 0..d {
                        g[r * d + j] += g_out[j] * inv;
                    }
                }
            });
        }
    }
}

/// In-place 2D RoPE rotation. `inverse` rotates by the negated angles
/// (the adjoint). Trig goes through detmath for determinism.
fn rope2d_forward<S: Scalar>(
    data: &mut [S],
    positions: &[(f64, f64)],
    d: usize,
    base: f64,
    inverse: bool,
) {
    let half = d / 2;
    let pairs = half / 2;
    let ln_base = detmath::ln(base);
    for (t, &(pr, pc)) in positions.iter().enumerate() {
        let row = &mut data[t * d..(t + 1) * d];
        for axis in 0..2 {
            let pos = if axis == 0 { pr } else { pc };
            let off = axis * half;
            for k in 0..pairs {
                let freq = detmath::exp(-(2.0 * k as f64 / half as f64) * ln_base);
                let mut angle = pos * freq;
                if inverse {
                    angle = -angle;
                }
                let (s, c) = detmath::sincos(angle);
                let (cs, ss) = (S::from_f64(c), S::from_f64(s));
                let a = row[off + 2 * k];
                let b = row[off + 2 * k + 1];
                row[off + 2 * k] = a * cs - b * ss;
                row[off + 2 * k + 1] = a * ss + b * cs;
            }
        }
    }
}

pub(crate) fn gelu_f(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + detmath::tanh(C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad_f(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = detmath::tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn round_half_away(x: f64) -> f64 {
    // f64::round rounds half away from zero already; spelled out to pin
    // the contract independent of std documentation changes.
    if x >= 0.0 {
        (x + 0.5).floor()
    } else {
        (x - 0.5).ceil()
    }
}

/// Sequential-over-k matmul; the reduction order is part of the
/// determinism contract.
pub fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::ZERO; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn matmul_identity() {
        let t = tape();
        let i2 = t.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let c = i2.matmul(&a).unwrap();
        assert_eq!(c.value(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let t = tape();
        let a = t.constant(vec![1.0, 2.0], vec![1, 2]).unwrap();
        let b = t.constant(vec![3.0, 4.0], vec![2, 1]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.value(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let t = tape();
        let a = t.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = t.constant(vec![0.0; 8], vec![2, 4]).unwrap();
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 4]"), "{err}");
    }

    #[test]
    fn matmul_grads_vs_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = grad_check(
            |_t, xs| xs[0].matmul(&xs[1])?.mul(&xs[0].matmul(&xs[1])?)?.sum_all().mul(&_t.scalar(0.5)),
            &[(a, vec![5, 4]), (b, vec![4, 3])],
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "{:?}", report);
    }

    #[test]
    fn elementwise_add_and_broadcast() {
        let t = tape();
        let a = t.constant(vec![1.0, 2.0], vec![2]).unwrap();
        let b = t.constant(vec![3.0, 4.0], vec![2]).unwrap();
        assert_eq!(a.add(&b).unwrap().value(), vec![4.0, 6.0]);
        let m = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let bias = t.constant(vec![10.0, 20.0], vec![2]).unwrap();
        assert_eq!(m.add(&bias).unwrap().value(), vec![11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn elementwise_non_broadcastable() {
        let t = tape();
        let a = t.constant(vec![0.0; 3], vec![3]).unwrap();
        let b = t.constant(vec![0.0; 2], vec![2]).unwrap();
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn gelu_values() {
        let t = tape();
        let x = t.constant(vec![0.0, 1.0], vec![2]).unwrap();
        let y = x.gelu().value();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 0.8412).abs() < 1e-3, "{}", y[1]);
    }

    #[test]
    fn softmax_cases() {
        let t = tape();
        let x = t.constant(vec![0.0, 0.0, 0.0], vec![3]).unwrap();
        let y = x.softmax(0).unwrap().value();
        for v in &y {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = t.constant(vec![1000.0, 0.0, 0.0], vec![3]).unwrap();
        let y = x.softmax(0).unwrap().value();
        assert!((y[0] - 1.0).abs() < 1e-6 && y[1] < 1e-6 && y[2] < 1e-6);
        let x = t.constant(vec![1.0, 2.0, 3.0], vec![3]).unwrap();
        let y = x.softmax(0).unwrap().value();
        assert!((y[0] - 0.0900).abs() < 1e-4);
        assert!((y[1] - 0.2447).abs() < 1e-4);
        assert!((y[2] - 0.6652).abs() < 1e-4);
        let s: f64 = y.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layernorm_cases() {
        let t = tape();
        let g = t.constant(vec![1.0, 1.0, 1.0], vec![3]).unwrap();
        let b = t.constant(vec![0.0, 0.0, 0.0], vec![3]).unwrap();
        let x = t.constant(vec![5.0, 5.0, 5.0], vec![1, 3]).unwrap();
        let y = x.layernorm(&g, &b, 1e-5).unwrap().value();
        for v in y {
            assert!(v.abs() < 1e-6);
        }
        let g2 = t.constant(vec![1.0, 1.0], vec![2]).unwrap();
        let b2 = t.constant(vec![0.0, 0.0], vec![2]).unwrap();
        let x2 = t.constant(vec![1.0, 3.0], vec![1, 2]).unwrap();
        let y2 = x2.layernorm(&g2, &b2, 1e-12).unwrap().value();
        assert!((y2[0] + 1.0).abs() < 1e-5 && (y2[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layernorm_grads_vs_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..8 * 16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let g: Vec<f64> = (0..16).map(|_| rng.gen_range(0.5..1.5)).collect();
        let b: Vec<f64> = (0..16).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let report = grad_check(
            |_t, xs| {
                let y = xs[0].layernorm(&xs[1], &xs[2], 1e-5)?;
                Ok(y.mul(&y)?.sum_all())
            },
            &[(x, vec![8, 16]), (g, vec![16]), (b, vec![16])],
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{:?}", report);
    }

    #[test]
    fn grad_check_quadratic() {
        let report = grad_check(
            |_t, xs| Ok(xs[0].mul(&xs[0])?.sum_all()),
            &[(vec![1.0, 2.0], vec![2])],
            1e-4,
            1e-8,
        )
        .unwrap();
        assert!(report.pass, "{:?}", report);
        // analytic [2, 4]
    }

    #[test]
    fn grad_check_negative_control() {
        // ste_round has a deliberately wrong (straight-through) adjoint.
        let report = grad_check(
            |_t, xs| Ok(xs[0].ste_round().sum_all()),
            &[(vec![0.3, 0.7], vec![2])],
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(!report.pass, "{:?}", report);
    }

    #[test]
    fn primitive_grads_vs_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let y: Vec<f64> = (0..12).map(|_| rng.gen_range(0.2..1.8)).collect();
        let cases: Vec<(&str, Box<dyn Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>>)> = vec![
            ("exp", Box::new(|_t, xs| Ok(xs[0].exp().sum_all()))),
            ("ln", Box::new(|_t, xs| Ok(xs[1].ln().sum_all()))),
            ("gelu", Box::new(|_t, xs| Ok(xs[0].gelu().sum_all()))),
            ("norm_cdf", Box::new(|_t, xs| Ok(xs[0].norm_cdf().sum_all()))),
            ("softmax", Box::new(|_t, xs| {
                let s = xs[0].softmax(0)?;
                Ok(s.mul(&s)?.sum_all())
            })),
            ("div", Box::new(|_t, xs| Ok(xs[0].div(&xs[1])?.sum_all()))),
            ("mul", Box::new(|_t, xs| Ok(xs[0].mul(&xs[1])?.sum_all()))),
            ("sub_scale", Box::new(|_t, xs| Ok(xs[0].sub(&xs[1])?.scale(0.7).sum_all()))),
            ("mean", Box::new(|_t, xs| {
                let m = xs[0].mean_all();
                Ok(m.mul(&m)?.sum_all())
            })),
            ("transpose", Box::new(|_t, xs| {
                let at = xs[0].transpose()?;
                Ok(at.mul(&at)?.sum_all())
            })),
            ("rope", Box::new(|_t, xs| {
                let r = xs[0].rope2d(&[(1.0, 2.0), (0.0, 3.0), (2.0, 0.0)], 100.0)?;
                Ok(r.mul(&xs[1])?.sum_all())
            })),
        ];
        for (name, f) in &cases[..9] {
            let report = grad_check(f, &[(x.clone(), vec![12]), (y.clone(), vec![12])], 1e-5, 1e-4)
                .unwrap();
            assert!(report.pass, "{name}: {:?}", report);
        }
        for (name, f) in &cases[9..] {
            let report = grad_check(f, &[(x.clone(), vec![3, 4]), (y.clone(), vec![3, 4])], 1e-5, 1e-4)
                .unwrap();
            assert!(report.pass, "{name}: {:?}", report);
        }
    }

    #[test]
    fn rope_preserves_norm_and_relative_position() {
        let t = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x: Vec<f64> = (0..2 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xt = t.constant(x.clone(), vec![2, 8]).unwrap();
        // zero position is the identity
        let y0 = xt.rope2d(&[(0.0, 0.0), (0.0, 0.0)], 100.0).unwrap();
        assert_eq!(y0.value(), x);
        // isometry
        let y = xt.rope2d(&[(3.0, 5.0), (7.0, 2.0)], 100.0).unwrap().value();
        for r in 0..2 {
            let n0: f64 = x[r * 8..(r + 1) * 8].iter().map(|v| v * v).sum();
            let n1: f64 = y[r * 8..(r + 1) * 8].iter().map(|v| v * v).sum();
            assert!((n0.sqrt() - n1.sqrt()).abs() < 1e-5);
        }
        // relative position: dot(rope(q,p1), rope(k,p2)) invariant under joint shift
        let q: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dot_at = |p1: (f64, f64), p2: (f64, f64)| -> f64 {
            let qt = t.constant(q.clone(), vec![1, 8]).unwrap();
            let kt = t.constant(k.clone(), vec![1, 8]).unwrap();
            let qr = qt.rope2d(&[p1], 100.0).unwrap().value();
            let kr = kt.rope2d(&[p2], 100.0).unwrap().value();
            qr.iter().zip(kr.iter()).map(|(a, b)| a * b).sum()
        };
        let d1 = dot_at((1.0, 2.0), (4.0, 3.0));
        let d2 = dot_at((1.0 + 5.0, 2.0 + 7.0), (4.0 + 5.0, 3.0 + 7.0));
        assert!((d1 - d2).abs() < 1e-5, "{d1} vs {d2}");
    }

    #[test]
    fn patch_permutations_invert() {
        let t = Tape::<f64>::new();
        let data: Vec<f64> = (0..3 * 8 * 8).map(|i| i as f64).collect();
        let img = t.constant(data.clone(), vec![3, 8, 8]).unwrap();
        let p = img.im2patches(4).unwrap();
        assert_eq!(p.shape(), &[4, 48]);
        let back = p.patches2im(3, 8, 8, 4).unwrap();
        assert_eq!(back.value(), data);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let t = Tape::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(1234);
            let a: Vec<f32> = (0..64).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let b: Vec<f32> = (0..64).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let at = t.constant(a, vec![8, 8]).unwrap();
            let bt = t.constant(b, vec![8, 8]).unwrap();
            at.matmul(&bt).unwrap().gelu().softmax(1).unwrap().value()
        };
        let x = run();
        let y = run();
        assert_eq!(
            x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn backward_accumulates_on_leaves() {
        let t = Tape::<f64>::new();
        let x = t.leaf(vec![2.0, -1.0], vec![2], true).unwrap();
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, -2.0]);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0, -4.0]);
    }

    #[test]
    fn quantize_round_half_away() {
        assert_eq!(round_half_away(0.4), 0.0);
        assert_eq!(round_half_away(-1.5), -2.0);
        assert_eq!(round_half_away(1.5), 2.0);
        assert_eq!(round_half_away(-0.5), -1.0);
    }
}
