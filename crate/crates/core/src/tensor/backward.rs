//! Reverse-mode pass: topological ordering and per-op gradient rules.

use std::collections::{HashMap, HashSet};

use super::conv::{
    conv_backward_bias, conv_backward_input, conv_backward_kernel, ConvDims,
};
use super::scalar::Scalar;
use super::shape::{broadcast_strides, strides, unravel};
use super::special::{
    bilinear_up_backward, corr_all_pairs_backward, corr_local_backward, unfold_backward,
    warp_backward,
};
use super::{reduce_grad, Op, Tensor};
use crate::error::{Error, Result};

impl<T: Scalar> Op<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![a, b],
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::Softmax(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::SumAll(a)
            | Op::BilinearUp { input: a, .. }
            | Op::Unfold { input: a, .. }
            | Op::SumAxis { input: a, .. }
            | Op::Slice { input: a, .. } => vec![a],
            Op::Concat(parts, _) => parts.iter().collect(),
            Op::Conv {
                input,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![input, kernel];
                if let Some(b) = bias {
                    v.push(b);
                }
                v
            }
            Op::WarpH { feat, disp } => vec![feat, disp],
            Op::CorrLocal { left, right, .. } | Op::CorrAllPairs { left, right, .. } => {
                vec![left, right]
            }
        }
    }
}

/// `grad * other`, where `other` broadcasts to the grad's shape.
fn mul_broadcast<T: Scalar>(g: &[T], gshape: &[usize], other: &[T], oshape: &[usize]) -> Vec<T> {
    if gshape == oshape {
        return g.iter().zip(other).map(|(&a, &b)| a * b).collect();
    }
    let st = broadcast_strides(oshape, gshape);
    let rank = gshape.len();
    let mut out = Vec::with_capacity(g.len());
    if rank == 0 {
        out.push(g[0] * other[0]);
        return out;
    }
    let inner = gshape[rank - 1];
    let li = st[rank - 1];
    let outer = g.len() / inner;
    let mut coords = vec![0usize; rank - 1];
    for o in 0..outer {
        unravel(o, &gshape[..rank - 1], &mut coords);
        let mut ob = 0usize;
        for d in 0..rank - 1 {
            ob += coords[d] * st[d];
        }
        let row = &g[o * inner..(o + 1) * inner];
        for (j, &gv) in row.iter().enumerate() {
            out.push(gv * other[ob + j * li]);
        }
    }
    out
}

struct GradStore<T: Scalar> {
    grads: HashMap<u64, Vec<T>>,
}

impl<T: Scalar> GradStore<T> {
    fn accumulate(&mut self, t: &Tensor<T>, contrib: Vec<T>) {
        if !t.requires_grad() {
            return;
        }
        debug_assert_eq!(contrib.len(), t.numel());
        match self.grads.entry(t.id()) {
            std::collections::hash_map::Entry::Occupied(mut e) => {
                for (acc, v) in e.get_mut().iter_mut().zip(contrib) {
                    *acc += v;
                }
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(contrib);
            }
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// Reverse-mode pass from a scalar output. Populates `grad` on every
    /// reachable tensor with `requires_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::BackwardNonScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Iterative post-order DFS over the requires-grad subgraph.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(node.id()) {
                continue;
            }
            let children: Vec<Tensor<T>> = node
                .op()
                .inputs()
                .into_iter()
                .filter(|c| c.requires_grad())
                .cloned()
                .collect();
            stack.push((node, true));
            for c in children {
                if !seen.contains(&c.id()) {
                    stack.push((c, false));
                }
            }
        }

        let mut store = GradStore {
            grads: HashMap::new(),
        };
        store.grads.insert(self.id(), vec![T::ONE]);

        // Leaves first in `order`; walk from the output back.
        for node in order.iter().rev() {
            let g = match store.grads.remove(&node.id()) {
                Some(g) => g,
                None => continue,
            };
            self.apply_rule(node, &g, &mut store)?;
            node.set_grad(g);
        }
        Ok(())
    }

    fn apply_rule(&self, node: &Tensor<T>, g: &[T], store: &mut GradStore<T>) -> Result<()> {
        match node.op() {
            Op::Leaf => {}
            Op::Add(a, b) => {
                store.accumulate(a, reduce_grad(g, node.shape(), a.shape()));
                store.accumulate(b, reduce_grad(g, node.shape(), b.shape()));
            }
            Op::Sub(a, b) => {
                store.accumulate(a, reduce_grad(g, node.shape(), a.shape()));
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                store.accumulate(b, reduce_grad(&neg, node.shape(), b.shape()));
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    let ga = mul_broadcast(g, node.shape(), b.data(), b.shape());
                    store.accumulate(a, reduce_grad(&ga, node.shape(), a.shape()));
                }
                if b.requires_grad() {
                    let gb = mul_broadcast(g, node.shape(), a.data(), a.shape());
                    store.accumulate(b, reduce_grad(&gb, node.shape(), b.shape()));
                }
            }
            Op::AddScalar(a) => store.accumulate(a, g.to_vec()),
            Op::MulScalar(a, c) => {
                store.accumulate(a, g.iter().map(|&v| v * *c).collect());
            }
            Op::Sigmoid(a) => {
                let y = node.data();
                let ga = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * yv * (T::ONE - yv))
                    .collect();
                store.accumulate(a, ga);
            }
            Op::Tanh(a) => {
                let y = node.data();
                let ga = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * (T::ONE - yv * yv))
                    .collect();
                store.accumulate(a, ga);
            }
            Op::Relu(a) => {
                let x = a.data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > T::ZERO { gv } else { T::ZERO })
                    .collect();
                store.accumulate(a, ga);
            }
            Op::Abs(a) => {
                let x = a.data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| {
                        if xv > T::ZERO {
                            gv
                        } else if xv < T::ZERO {
                            -gv
                        } else {
                            T::ZERO
                        }
                    })
                    .collect();
                store.accumulate(a, ga);
            }
            Op::Softmax(a, axis) => {
                // dx = y * (g - sum(g * y, axis))
                let y = node.data();
                let sh = node.shape();
                let len = sh[*axis];
                let stv = strides(sh);
                let stride = stv[*axis];
                let pre: usize = sh[..*axis].iter().product();
                let post: usize = sh[*axis + 1..].iter().product();
                let mut ga = vec![T::ZERO; y.len()];
                for p in 0..pre {
                    for q in 0..post {
                        let base = p * len * stride + q;
                        let mut dot = T::ZERO;
                        for j in 0..len {
                            let i = base + j * stride;
                            dot += g[i] * y[i];
                        }
                        for j in 0..len {
                            let i = base + j * stride;
                            ga[i] = y[i] * (g[i] - dot);
                        }
                    }
                }
                store.accumulate(a, ga);
            }
            Op::SumAxis {
                input,
                axis,
                keepdim: _,
            } => {
                let sh = input.shape();
                let len = sh[*axis];
                let pre: usize = sh[..*axis].iter().product();
                let post: usize = sh[*axis + 1..].iter().product();
                let mut ga = vec![T::ZERO; input.numel()];
                for p in 0..pre {
                    let gbase = p * post;
                    for j in 0..len {
                        let ibase = (p * len + j) * post;
                        for q in 0..post {
                            ga[ibase + q] = g[gbase + q];
                        }
                    }
                }
                store.accumulate(input, ga);
            }
            Op::SumAll(a) => {
                store.accumulate(a, vec![g[0]; a.numel()]);
            }
            Op::Matmul(a, b) => {
                let ra = a.rank();
                let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
                let n = b.shape()[ra - 1];
                let batch: usize = a.shape()[..ra - 2].iter().product();
                let (ad, bd) = (a.data(), b.data());
                if a.requires_grad() {
                    // ga = g @ b^T
                    let mut ga = vec![T::ZERO; ad.len()];
                    for bi in 0..batch {
                        let gb = bi * m * n;
                        let bb = bi * k * n;
                        let ab = bi * m * k;
                        for i in 0..m {
                            for p in 0..k {
                                let mut acc = T::ZERO;
                                let grow = &g[gb + i * n..gb + (i + 1) * n];
                                let brow = &bd[bb + p * n..bb + (p + 1) * n];
                                for (&gv, &bv) in grow.iter().zip(brow) {
                                    acc += gv * bv;
                                }
                                ga[ab + i * k + p] = acc;
                            }
                        }
                    }
                    store.accumulate(a, ga);
                }
                if b.requires_grad() {
                    // gb = a^T @ g
                    let mut gbv = vec![T::ZERO; bd.len()];
                    for bi in 0..batch {
                        let gb = bi * m * n;
                        let bb = bi * k * n;
                        let ab = bi * m * k;
                        for i in 0..m {
                            for p in 0..k {
                                let av = ad[ab + i * k + p];
                                if av == T::ZERO {
                                    continue;
                                }
                                let grow = &g[gb + i * n..gb + (i + 1) * n];
                                let brow = &mut gbv[bb + p * n..bb + (p + 1) * n];
                                for (acc, &gv) in brow.iter_mut().zip(grow) {
                                    *acc += av * gv;
                                }
                            }
                        }
                    }
                    store.accumulate(b, gbv);
                }
            }
            Op::Reshape(a) => store.accumulate(a, g.to_vec()),
            Op::Permute(a, perm) => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, ga) = super::permute_raw(g, node.shape(), &inv);
                store.accumulate(a, ga);
            }
            Op::Concat(parts, axis) => {
                let oshape = node.shape();
                let pre: usize = oshape[..*axis].iter().product();
                let post: usize = oshape[*axis + 1..].iter().product();
                let out_axis = oshape[*axis];
                let mut offset = 0usize;
                for part in parts {
                    let alen = part.shape()[*axis];
                    if part.requires_grad() {
                        let mut gp = vec![T::ZERO; part.numel()];
                        for o in 0..pre {
                            let sbase = (o * out_axis + offset) * post;
                            let dbase = o * alen * post;
                            gp[dbase..dbase + alen * post]
                                .copy_from_slice(&g[sbase..sbase + alen * post]);
                        }
                        store.accumulate(part, gp);
                    }
                    offset += alen;
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => {
                let sh = input.shape();
                let pre: usize = sh[..*axis].iter().product();
                let post: usize = sh[*axis + 1..].iter().product();
                let alen = sh[*axis];
                let mut ga = vec![T::ZERO; input.numel()];
                for o in 0..pre {
                    let dbase = (o * alen + start) * post;
                    let sbase = o * len * post;
                    ga[dbase..dbase + len * post].copy_from_slice(&g[sbase..sbase + len * post]);
                }
                store.accumulate(input, ga);
            }
            Op::Conv {
                input,
                kernel,
                bias,
                stride,
                pad,
            } => {
                let (in5, ker5) = if input.rank() == 4 {
                    let mut i = input.shape().to_vec();
                    i.insert(2, 1);
                    let mut kk = kernel.shape().to_vec();
                    kk.insert(2, 1);
                    (i, kk)
                } else {
                    (input.shape().to_vec(), kernel.shape().to_vec())
                };
                let dims = ConvDims::resolve(&in5, &ker5, stride, pad).expect("checked at forward");
                if input.requires_grad() {
                    store.accumulate(input, conv_backward_input(g, kernel.data(), &dims));
                }
                if kernel.requires_grad() {
                    store.accumulate(kernel, conv_backward_kernel(g, input.data(), &dims));
                }
                if let Some(b) = bias {
                    if b.requires_grad() {
                        store.accumulate(b, conv_backward_bias(g, &dims));
                    }
                }
            }
            Op::Unfold { input, kernel } => {
                store.accumulate(input, unfold_backward(g, input.shape(), *kernel));
            }
            Op::WarpH { feat, disp } => {
                let (gf, gd) = warp_backward(g, feat.data(), disp.data(), feat.shape());
                store.accumulate(feat, gf);
                store.accumulate(disp, gd);
            }
            Op::CorrLocal {
                left,
                right,
                rx,
                ry,
            } => {
                let (gl, gr) =
                    corr_local_backward(g, left.data(), right.data(), left.shape(), *rx, *ry);
                store.accumulate(left, gl);
                store.accumulate(right, gr);
            }
            Op::CorrAllPairs {
                left,
                right,
                rx,
                ry,
            } => {
                let (gl, gr) =
                    corr_all_pairs_backward(g, left.data(), right.data(), left.shape(), *rx, *ry);
                store.accumulate(left, gl);
                store.accumulate(right, gr);
            }
            Op::BilinearUp { input, alpha } => {
                store.accumulate(input, bilinear_up_backward(g, input.shape(), *alpha));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T64 = Tensor<f64>;

    #[test]
    fn chain_through_mul_and_tanh() {
        // f = sum(tanh(a) * a); df/da = tanh(a) + a * (1 - tanh^2 a)
        let a = T64::var_f64s(&[0.3, -0.7, 1.2], &[3]).unwrap();
        let f = a.tanh().mul(&a).unwrap().sum_all();
        f.backward().unwrap();
        let g = a.grad().unwrap();
        for (i, &x) in [0.3f64, -0.7, 1.2].iter().enumerate() {
            let want = x.tanh() + x * (1.0 - x.tanh().powi(2));
            assert!((g[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_accumulates_across_reuse() {
        // f = sum(a + a) -> df/da = 2
        let a = T64::var_f64s(&[1.0, 2.0], &[2]).unwrap();
        let f = a.add(&a).unwrap().sum_all();
        f.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let a = T64::var_f64s(&[1.0, 2.0], &[2]).unwrap();
        assert!(matches!(
            a.backward(),
            Err(Error::BackwardNonScalar(_))
        ));
    }

    #[test]
    fn every_reachable_var_is_populated() {
        let a = T64::var_f64s(&[0.5, -0.5], &[2]).unwrap();
        let b = T64::var_f64s(&[2.0, 3.0], &[2]).unwrap();
        let mid = a.sigmoid().mul(&b).unwrap();
        let f = mid.sum_all();
        f.backward().unwrap();
        assert!(a.grad().is_some());
        assert!(b.grad().is_some());
        assert!(mid.grad().is_some());
    }
}
