//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable n-dimensional array handle. Operations record
//! the graph that produced them; [`Tensor::backward`] on a scalar populates
//! `grad` on every reachable tensor that requires gradients. Ops whose inputs
//! all have `requires_grad == false` record nothing, so inference builds no
//! graph.
//!
//! The op set is exactly what the matching pipeline needs: broadcasted
//! elementwise arithmetic, activations, softmax, reductions, batched matmul,
//! shape ops, zero-padded convolution, replicate-padded 3D unfolding,
//! horizontal bilinear warping, the two correlation volumes, and fixed-weight
//! bilinear upsampling.

pub mod scalar;
pub mod shape;

mod backward;
mod conv;
mod gradcheck;
mod special;

pub use gradcheck::grad_check;
pub use scalar::Scalar;
pub use special::OobMask;

/// Align-corners interpolation taps `(i0, i1, w0, w1)` per output index, for
/// raw resampling outside the graph.
pub fn lerp_taps_f64(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64, f64)> {
    special::lerp_taps::<f64>(in_len, out_len)
}

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use shape::{broadcast_shapes, broadcast_strides, check_axis, numel, strides, unravel};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Recorded primitive operations. Inputs are held by handle, which keeps the
/// graph alive until the output is dropped.
pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    AddScalar(Tensor<T>),
    MulScalar(Tensor<T>, T),
    Sigmoid(Tensor<T>),
    Tanh(Tensor<T>),
    Relu(Tensor<T>),
    Abs(Tensor<T>),
    Softmax(Tensor<T>, usize),
    SumAxis {
        input: Tensor<T>,
        axis: usize,
        keepdim: bool,
    },
    SumAll(Tensor<T>),
    Matmul(Tensor<T>, Tensor<T>),
    Reshape(Tensor<T>),
    Permute(Tensor<T>, Vec<usize>),
    Concat(Vec<Tensor<T>>, usize),
    Slice {
        input: Tensor<T>,
        axis: usize,
        start: usize,
        len: usize,
    },
    Conv {
        input: Tensor<T>,
        kernel: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: [usize; 3],
        pad: [usize; 3],
    },
    Unfold {
        input: Tensor<T>,
        kernel: [usize; 3],
    },
    WarpH {
        feat: Tensor<T>,
        disp: Tensor<T>,
    },
    CorrLocal {
        left: Tensor<T>,
        right: Tensor<T>,
        rx: usize,
        ry: usize,
    },
    CorrAllPairs {
        left: Tensor<T>,
        right: Tensor<T>,
        rx: usize,
        ry: usize,
    },
    BilinearUp {
        input: Tensor<T>,
        alpha: usize,
    },
}

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
}

pub struct Tensor<T: Scalar>(Arc<Inner<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.0.id, self.0.shape)
    }
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Inner {
            id: next_id(),
            shape,
            data: Arc::new(data),
            op,
            requires_grad,
        grad: Mutex::new(None),
        }))
    }

    /// Record an op result. When no input requires gradients the op is
    /// dropped so constant subgraphs free their intermediates eagerly.
    fn record(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: impl FnOnce() -> Op<T>) -> Self {
        if requires_grad {
            Self::build(shape, data, op(), true)
        } else {
            Self::build(shape, data, Op::Leaf, false)
        }
    }

    // ----- constructors -----

    /// Constant leaf (not differentiated).
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: format!("shape wants {} values, got {}", numel(shape), data.len()),
            });
        }
        Ok(Self::build(shape.to_vec(), data, Op::Leaf, false))
    }

    /// Trainable leaf: participates in backward.
    pub fn var(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(Tensor(Arc::new(Inner {
            id: next_id(),
            shape: t.0.shape.clone(),
            data: Arc::clone(&t.0.data),
            op: Op::Leaf,
            requires_grad: true,
            grad: Mutex::new(None),
        })))
    }

    pub fn from_f64s(vals: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(vals.iter().map(|&v| T::from_f64(v)).collect(), shape)
    }

    pub fn var_f64s(vals: &[f64], shape: &[usize]) -> Result<Self> {
        Self::var(vals.iter().map(|&v| T::from_f64(v)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![T::ZERO; numel(shape)], Op::Leaf, false)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::build(shape.to_vec(), vec![v; numel(shape)], Op::Leaf, false)
    }

    pub fn scalar(v: T) -> Self {
        Self::build(vec![], vec![v], Op::Leaf, false)
    }

    // ----- accessors -----

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.0.data)
    }

    pub(crate) fn op(&self) -> &Op<T> {
        &self.0.op
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.0.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Gradient accumulated by the last backward pass, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().unwrap().clone()
    }

    pub fn clear_grad(&self) {
        *self.0.grad.lock().unwrap() = None;
    }

    pub(crate) fn set_grad(&self, g: Vec<T>) {
        *self.0.grad.lock().unwrap() = Some(g);
    }

    /// A constant leaf sharing this tensor's storage; cuts the graph.
    pub fn detach(&self) -> Self {
        Tensor(Arc::new(Inner {
            id: next_id(),
            shape: self.0.shape.clone(),
            data: Arc::clone(&self.0.data),
            op: Op::Leaf,
            requires_grad: false,
            grad: Mutex::new(None),
        }))
    }

    /// Same data as a fresh trainable leaf.
    pub fn to_var(&self) -> Self {
        Tensor(Arc::new(Inner {
            id: next_id(),
            shape: self.0.shape.clone(),
            data: Arc::clone(&self.0.data),
            op: Op::Leaf,
            requires_grad: true,
            grad: Mutex::new(None),
        }))
    }

    /// Leaf with the same shape/flags but replaced data (used by optimizers
    /// between passes; never during one).
    pub fn with_data(&self, data: Vec<T>) -> Result<Self> {
        if data.len() != self.numel() {
            return Err(Error::InvalidShape {
                op: "with_data",
                shape: self.0.shape.clone(),
                reason: format!("expected {} values, got {}", self.numel(), data.len()),
            });
        }
        Ok(Tensor(Arc::new(Inner {
            id: next_id(),
            shape: self.0.shape.clone(),
            data: Arc::new(data),
            op: Op::Leaf,
            requires_grad: self.0.requires_grad,
            grad: Mutex::new(None),
        })))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data: Vec<U> = self.0.data.iter().map(|v| U::from_f64(v.to_f64())).collect();
        Tensor::<U>::from_vec(data, &self.0.shape).expect("same shape")
    }

    // ----- elementwise -----

    pub fn add(&self, other: &Self) -> Result<Self> {
        let (shape, data) = binary_map("add", self, other, |a, b| a + b)?;
        let rg = self.0.requires_grad || other.0.requires_grad;
        Ok(Self::record(shape, data, rg, || Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let (shape, data) = binary_map("sub", self, other, |a, b| a - b)?;
        let rg = self.0.requires_grad || other.0.requires_grad;
        Ok(Self::record(shape, data, rg, || Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        let (shape, data) = binary_map("mul", self, other, |a, b| a * b)?;
        let rg = self.0.requires_grad || other.0.requires_grad;
        Ok(Self::record(shape, data, rg, || Op::Mul(self.clone(), other.clone())))
    }

    pub fn add_scalar(&self, c: T) -> Self {
        let data = self.0.data.iter().map(|&v| v + c).collect();
        Self::record(self.0.shape.clone(), data, self.0.requires_grad, || {
            Op::AddScalar(self.clone())
        })
    }

    pub fn mul_scalar(&self, c: T) -> Self {
        let data = self.0.data.iter().map(|&v| v * c).collect();
        Self::record(self.0.shape.clone(), data, self.0.requires_grad, || {
            Op::MulScalar(self.clone(), c)
        })
    }

    pub fn neg(&self) -> Self {
        self.mul_scalar(-T::ONE)
    }

    pub fn sigmoid(&self) -> Self {
        let data = self
            .0
            .data
            .iter()
            .map(|&v| {
                // Split by sign so exp never overflows.
                if v >= T::ZERO {
                    T::ONE / (T::ONE + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::ONE + e)
                }
            })
            .collect();
        Self::record(self.0.shape.clone(), data, self.0.requires_grad, || {
            Op::Sigmoid(self.clone())
        })
    }

    pub fn tanh(&self) -> Self {
        let data = self.0.data.iter().map(|&v| v.tanh()).collect();
        Self::record(self.0.shape.clone(), data, self.0.requires_grad, || {
            Op::Tanh(self.clone())
        })
    }

    pub fn relu(&self) -> Self {
        let data = self
            .0
            .data
            .iter()
            .map(|&v| if v > T::ZERO { v } else { T::ZERO })
            .collect();
        Self::record(self.0.shape.clone(), data, self.0.requires_grad, || {
            Op::Relu(self.clone())
        })
    }

    pub fn abs(&self) -> Self {
        let data = self.0.data.iter().map(|&v| v.abs()).collect();
        Self::record(self.0.shape.clone(), data, self.0.requires_grad, || {
            Op::Abs(self.clone())
        })
    }

    // ----- softmax -----

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        check_axis("softmax", axis, self.rank())?;
        let st = strides(&self.0.shape);
        let len = self.0.shape[axis];
        let stride = st[axis];
        let pre: usize = self.0.shape[..axis].iter().product();
        let post: usize = self.0.shape[axis + 1..].iter().product();
        let src = &self.0.data;
        let mut out = vec![T::ZERO; src.len()];
        for p in 0..pre {
            for q in 0..post {
                let base = p * len * stride + q;
                let mut m = src[base];
                for j in 1..len {
                    m = m.maximum(src[base + j * stride]);
                }
                let mut sum = T::ZERO;
                for j in 0..len {
                    let e = (src[base + j * stride] - m).exp();
                    out[base + j * stride] = e;
                    sum += e;
                }
                let inv = T::ONE / sum;
                for j in 0..len {
                    out[base + j * stride] *= inv;
                }
            }
        }
        Ok(Self::record(self.0.shape.clone(), out, self.0.requires_grad, || {
            Op::Softmax(self.clone(), axis)
        }))
    }

    // ----- reductions -----

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Self> {
        check_axis("sum_axis", axis, self.rank())?;
        let len = self.0.shape[axis];
        let pre: usize = self.0.shape[..axis].iter().product();
        let post: usize = self.0.shape[axis + 1..].iter().product();
        let mut out = vec![T::ZERO; pre * post];
        let src = &self.0.data;
        for p in 0..pre {
            let obase = p * post;
            for j in 0..len {
                let ibase = (p * len + j) * post;
                for q in 0..post {
                    out[obase + q] += src[ibase + q];
                }
            }
        }
        let mut oshape = self.0.shape.clone();
        if keepdim {
            oshape[axis] = 1;
        } else {
            oshape.remove(axis);
        }
        Ok(Self::record(oshape, out, self.0.requires_grad, || Op::SumAxis {
            input: self.clone(),
            axis,
            keepdim,
        }))
    }

    pub fn sum_all(&self) -> Self {
        let total: T = self.0.data.iter().copied().sum();
        Self::record(vec![], vec![total], self.0.requires_grad, || {
            Op::SumAll(self.clone())
        })
    }

    pub fn mean_all(&self) -> Self {
        let n = self.numel();
        self.sum_all().mul_scalar(T::ONE / T::from_f64(n as f64))
    }

    // ----- matmul -----

    /// Batched matrix multiply over the last two axes. Leading dims must
    /// match exactly.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let ra = self.rank();
        let rb = other.rank();
        if ra < 2 || rb < 2 || ra != rb || self.0.shape[..ra - 2] != other.0.shape[..rb - 2] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.0.shape.clone(),
                rhs: other.0.shape.clone(),
            });
        }
        let m = self.0.shape[ra - 2];
        let k = self.0.shape[ra - 1];
        let k2 = other.0.shape[rb - 2];
        let n = other.0.shape[rb - 1];
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.0.shape.clone(),
                rhs: other.0.shape.clone(),
            });
        }
        let batch: usize = self.0.shape[..ra - 2].iter().product();
        let mut out = vec![T::ZERO; batch * m * n];
        let a = &self.0.data;
        let b = &other.0.data;
        for bi in 0..batch {
            let ab = bi * m * k;
            let bb = bi * k * n;
            let ob = bi * m * n;
            for i in 0..m {
                let orow = &mut out[ob + i * n..ob + (i + 1) * n];
                for p in 0..k {
                    let av = a[ab + i * k + p];
                    let brow = &b[bb + p * n..bb + (p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let mut oshape = self.0.shape[..ra - 2].to_vec();
        oshape.push(m);
        oshape.push(n);
        let rg = self.0.requires_grad || other.0.requires_grad;
        Ok(Self::record(oshape, out, rg, || {
            Op::Matmul(self.clone(), other.clone())
        }))
    }

    // ----- shape ops -----

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("cannot view {} elements as {:?}", self.numel(), shape),
            });
        }
        // Same storage, new shape.
        let t = Tensor(Arc::new(Inner {
            id: next_id(),
            shape: shape.to_vec(),
            data: Arc::clone(&self.0.data),
            op: if self.0.requires_grad {
                Op::Reshape(self.clone())
            } else {
                Op::Leaf
            },
            requires_grad: self.0.requires_grad,
            grad: Mutex::new(None),
        }));
        Ok(t)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidShape {
                op: "permute",
                shape: perm.to_vec(),
                reason: format!("not a permutation of rank {rank}"),
            });
        }
        let (oshape, out) = permute_raw(&self.0.data, &self.0.shape, perm);
        Ok(Self::record(oshape, out, self.0.requires_grad, || {
            Op::Permute(self.clone(), perm.to_vec())
        }))
    }

    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: "no tensors given".into(),
            });
        }
        let rank = parts[0].rank();
        check_axis("concat", axis, rank)?;
        for p in parts.iter().skip(1) {
            if p.rank() != rank
                || (0..rank).any(|d| d != axis && p.0.shape[d] != parts[0].0.shape[d])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].0.shape.clone(),
                    rhs: p.0.shape.clone(),
                });
            }
        }
        let mut oshape = parts[0].0.shape.clone();
        oshape[axis] = parts.iter().map(|p| p.0.shape[axis]).sum();
        let pre: usize = oshape[..axis].iter().product();
        let post: usize = oshape[axis + 1..].iter().product();
        let out_axis = oshape[axis];
        let mut out = vec![T::ZERO; numel(&oshape)];
        let mut offset = 0usize;
        for p in parts {
            let alen = p.0.shape[axis];
            let src = &p.0.data;
            for o in 0..pre {
                let sbase = o * alen * post;
                let dbase = (o * out_axis + offset) * post;
                out[dbase..dbase + alen * post].copy_from_slice(&src[sbase..sbase + alen * post]);
            }
            offset += alen;
        }
        let rg = parts.iter().any(|p| p.0.requires_grad);
        Ok(Self::record(oshape, out, rg, || {
            Op::Concat(parts.to_vec(), axis)
        }))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        check_axis("slice", axis, self.rank())?;
        if start + len > self.0.shape[axis] {
            return Err(Error::InvalidShape {
                op: "slice",
                shape: self.0.shape.clone(),
                reason: format!("range {start}..{} exceeds axis {axis}", start + len),
            });
        }
        let pre: usize = self.0.shape[..axis].iter().product();
        let post: usize = self.0.shape[axis + 1..].iter().product();
        let alen = self.0.shape[axis];
        let mut out = vec![T::ZERO; pre * len * post];
        let src = &self.0.data;
        for o in 0..pre {
            let sbase = (o * alen + start) * post;
            let dbase = o * len * post;
            out[dbase..dbase + len * post].copy_from_slice(&src[sbase..sbase + len * post]);
        }
        let mut oshape = self.0.shape.clone();
        oshape[axis] = len;
        Ok(Self::record(oshape, out, self.0.requires_grad, || Op::Slice {
            input: self.clone(),
            axis,
            start,
            len,
        }))
    }
}

// ----- shared kernels -----

/// Elementwise binary op with trailing-dimension broadcasting.
fn binary_map<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<usize>, Vec<T>)> {
    let ad = a.data();
    let bd = b.data();
    if a.shape() == b.shape() {
        let data = ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
        return Ok((a.shape().to_vec(), data));
    }
    let oshape = broadcast_shapes(op, a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &oshape);
    let sb = broadcast_strides(b.shape(), &oshape);
    let rank = oshape.len();
    let n = numel(&oshape);
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        out.push(f(ad[0], bd[0]));
        return Ok((oshape, out));
    }
    let inner = oshape[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let outer = n / inner;
    let mut coords = vec![0usize; rank - 1];
    for o in 0..outer {
        unravel(o, &oshape[..rank - 1], &mut coords);
        let mut oa = 0usize;
        let mut ob = 0usize;
        for d in 0..rank - 1 {
            oa += coords[d] * sa[d];
            ob += coords[d] * sb[d];
        }
        for j in 0..inner {
            out.push(f(ad[oa + j * la], bd[ob + j * lb]));
        }
    }
    Ok((oshape, out))
}

/// Rearrange `data` (shaped `shape`) by `perm`; returns the new shape/data.
pub(crate) fn permute_raw<T: Scalar>(
    data: &[T],
    shape: &[usize],
    perm: &[usize],
) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let perm_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = vec![T::ZERO; n];
    if rank == 0 {
        out.copy_from_slice(data);
        return (oshape, out);
    }
    let inner = oshape[rank - 1];
    let istride = perm_strides[rank - 1];
    let outer = if inner == 0 { 0 } else { n / inner };
    let mut coords = vec![0usize; rank];
    for o in 0..outer {
        unravel(o, &oshape[..rank - 1], &mut coords[..rank - 1]);
        let mut base = 0usize;
        for d in 0..rank - 1 {
            base += coords[d] * perm_strides[d];
        }
        let dst = &mut out[o * inner..(o + 1) * inner];
        for (j, slot) in dst.iter_mut().enumerate() {
            *slot = data[base + j * istride];
        }
    }
    (oshape, out)
}

/// Sum `grad` (shaped `gshape`) down to `target` shape, inverting broadcast.
pub(crate) fn reduce_grad<T: Scalar>(grad: &[T], gshape: &[usize], target: &[usize]) -> Vec<T> {
    if gshape == target {
        return grad.to_vec();
    }
    let st = broadcast_strides(target, gshape);
    let rank = gshape.len();
    let mut out = vec![T::ZERO; numel(target)];
    if rank == 0 {
        out[0] = grad[0];
        return out;
    }
    let inner = gshape[rank - 1];
    let li = st[rank - 1];
    let outer = grad.len() / inner;
    let mut coords = vec![0usize; rank - 1];
    for o in 0..outer {
        unravel(o, &gshape[..rank - 1], &mut coords);
        let mut ob = 0usize;
        for d in 0..rank - 1 {
            ob += coords[d] * st[d];
        }
        let row = &grad[o * inner..(o + 1) * inner];
        for (j, &g) in row.iter().enumerate() {
            out[ob + j * li] += g;
        }
    }
    out
}
