//! Zero-padded cross-correlation convolutions, 2D over (H,W) and 3D over
//! (T,H,W). A 4D input is treated as a 5D input with a singleton time axis,
//! so one kernel serves both. Separable 3D convolutions are expressed by the
//! callers as a (1,k,k) conv followed by a (k,1,1) conv.

use super::scalar::Scalar;
use super::{Op, Tensor};
use crate::error::{Error, Result};

/// Dimensions of one conv invocation, normalized to 3 spatial axes.
#[derive(Clone, Copy)]
pub(crate) struct ConvDims {
    pub b: usize,
    pub c: usize,
    pub o: usize,
    pub inp: [usize; 3],
    pub ker: [usize; 3],
    pub out: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvDims {
    fn out_len(in_len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
        let padded = in_len + 2 * pad;
        if k > padded {
            return Err(Error::KernelTooLarge {
                kernel: vec![k],
                padded: vec![padded],
            });
        }
        Ok((padded - k) / stride + 1)
    }

    pub(crate) fn resolve(
        in_shape: &[usize],
        ker_shape: &[usize],
        stride: &[usize; 3],
        pad: &[usize; 3],
    ) -> Result<ConvDims> {
        let (b, c) = (in_shape[0], in_shape[1]);
        let inp = [in_shape[2], in_shape[3], in_shape[4]];
        let o = ker_shape[0];
        let ker = [ker_shape[2], ker_shape[3], ker_shape[4]];
        if ker_shape[1] != c {
            return Err(Error::ShapeMismatch {
                op: "conv",
                lhs: in_shape.to_vec(),
                rhs: ker_shape.to_vec(),
            });
        }
        let mut out = [0usize; 3];
        for d in 0..3 {
            if stride[d] == 0 {
                return Err(Error::InvalidShape {
                    op: "conv",
                    shape: stride.to_vec(),
                    reason: "stride must be >= 1".into(),
                });
            }
            out[d] = Self::out_len(inp[d], ker[d], stride[d], pad[d])?;
        }
        Ok(ConvDims {
            b,
            c,
            o,
            inp,
            ker,
            out,
            stride: *stride,
            pad: *pad,
        })
    }

    /// Output index range [lo, hi) on axis `d` for kernel offset `k` such
    /// that the corresponding input index is in bounds.
    fn valid_range(&self, d: usize, k: usize) -> (usize, usize) {
        let (len, stride, pad) = (self.inp[d], self.stride[d], self.pad[d]);
        let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
        if len + pad <= k {
            return (0, 0);
        }
        let hi = ((len - 1 + pad - k) / stride + 1).min(self.out[d]);
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv_forward<T: Scalar>(
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
) -> Vec<T> {
    let [t_in, h_in, w_in] = d.inp;
    let [kt, kh, kw] = d.ker;
    let [t_out, h_out, w_out] = d.out;
    let [st, sh, sw] = d.stride;
    let [pt, ph, pw] = d.pad;
    let in_plane = t_in * h_in * w_in;
    let out_plane = t_out * h_out * w_out;
    let mut out = vec![T::ZERO; d.b * d.o * out_plane];

    for b in 0..d.b {
        for o in 0..d.o {
            let obase = (b * d.o + o) * out_plane;
            if let Some(bias) = bias {
                out[obase..obase + out_plane].fill(bias[o]);
            }
            for ci in 0..d.c {
                let ibase = (b * d.c + ci) * in_plane;
                for zt in 0..kt {
                    let (tlo, thi) = d.valid_range(0, zt);
                    for zh in 0..kh {
                        let (hlo, hhi) = d.valid_range(1, zh);
                        for zw in 0..kw {
                            let w = kernel[(((o * d.c + ci) * kt + zt) * kh + zh) * kw + zw];
                            if w == T::ZERO {
                                continue;
                            }
                            let (wlo, whi) = d.valid_range(2, zw);
                            if wlo >= whi {
                                continue;
                            }
                            for to in tlo..thi {
                                let ti = to * st + zt - pt;
                                for ho in hlo..hhi {
                                    let hi = ho * sh + zh - ph;
                                    let irow = ibase + (ti * h_in + hi) * w_in;
                                    let orow = obase + (to * h_out + ho) * w_out;
                                    if sw == 1 {
                                        let iw0 = irow + wlo + zw - pw;
                                        let dst = &mut out[orow + wlo..orow + whi];
                                        let src = &input[iw0..iw0 + (whi - wlo)];
                                        for (acc, &v) in dst.iter_mut().zip(src) {
                                            *acc += w * v;
                                        }
                                    } else {
                                        for wo in wlo..whi {
                                            let wi = wo * sw + zw - pw;
                                            out[orow + wo] += w * input[irow + wi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_backward_input<T: Scalar>(gout: &[T], kernel: &[T], d: &ConvDims) -> Vec<T> {
    let [t_in, h_in, w_in] = d.inp;
    let [kt, kh, kw] = d.ker;
    let [t_out, h_out, w_out] = d.out;
    let [st, sh, sw] = d.stride;
    let [pt, ph, pw] = d.pad;
    let in_plane = t_in * h_in * w_in;
    let out_plane = t_out * h_out * w_out;
    let mut gin = vec![T::ZERO; d.b * d.c * in_plane];

    for b in 0..d.b {
        for ci in 0..d.c {
            let ibase = (b * d.c + ci) * in_plane;
            for o in 0..d.o {
                let obase = (b * d.o + o) * out_plane;
                for zt in 0..kt {
                    let (tlo, thi) = d.valid_range(0, zt);
                    for zh in 0..kh {
                        let (hlo, hhi) = d.valid_range(1, zh);
                        for zw in 0..kw {
                            let w = kernel[(((o * d.c + ci) * kt + zt) * kh + zh) * kw + zw];
                            if w == T::ZERO {
                                continue;
                            }
                            let (wlo, whi) = d.valid_range(2, zw);
                            if wlo >= whi {
                                continue;
                            }
                            for to in tlo..thi {
                                let ti = to * st + zt - pt;
                                for ho in hlo..hhi {
                                    let hi = ho * sh + zh - ph;
                                    let irow = ibase + (ti * h_in + hi) * w_in;
                                    let orow = obase + (to * h_out + ho) * w_out;
                                    if sw == 1 {
                                        let iw0 = irow + wlo + zw - pw;
                                        let dst = &mut gin[iw0..iw0 + (whi - wlo)];
                                        let src = &gout[orow + wlo..orow + whi];
                                        for (acc, &g) in dst.iter_mut().zip(src) {
                                            *acc += w * g;
                                        }
                                    } else {
                                        for wo in wlo..whi {
                                            let wi = wo * sw + zw - pw;
                                            gin[irow + wi] += w * gout[orow + wo];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

pub(crate) fn conv_backward_kernel<T: Scalar>(gout: &[T], input: &[T], d: &ConvDims) -> Vec<T> {
    let [t_in, h_in, w_in] = d.inp;
    let [kt, kh, kw] = d.ker;
    let [t_out, h_out, w_out] = d.out;
    let [st, sh, sw] = d.stride;
    let [pt, ph, pw] = d.pad;
    let in_plane = t_in * h_in * w_in;
    let out_plane = t_out * h_out * w_out;
    let mut gker = vec![T::ZERO; d.o * d.c * kt * kh * kw];

    for o in 0..d.o {
        for ci in 0..d.c {
            for zt in 0..kt {
                let (tlo, thi) = d.valid_range(0, zt);
                for zh in 0..kh {
                    let (hlo, hhi) = d.valid_range(1, zh);
                    for zw in 0..kw {
                        let (wlo, whi) = d.valid_range(2, zw);
                        let mut acc = T::ZERO;
                        for b in 0..d.b {
                            let ibase = (b * d.c + ci) * in_plane;
                            let obase = (b * d.o + o) * out_plane;
                            for to in tlo..thi {
                                let ti = to * st + zt - pt;
                                for ho in hlo..hhi {
                                    let hi = ho * sh + zh - ph;
                                    let irow = ibase + (ti * h_in + hi) * w_in;
                                    let orow = obase + (to * h_out + ho) * w_out;
                                    if sw == 1 {
                                        let iw0 = irow + wlo + zw - pw;
                                        let src = &input[iw0..iw0 + (whi - wlo)];
                                        let g = &gout[orow + wlo..orow + whi];
                                        for (&gv, &iv) in g.iter().zip(src) {
                                            acc += gv * iv;
                                        }
                                    } else {
                                        for wo in wlo..whi {
                                            let wi = wo * sw + zw - pw;
                                            acc += gout[orow + wo] * input[irow + wi];
                                        }
                                    }
                                }
                            }
                        }
                        gker[(((o * d.c + ci) * kt + zt) * kh + zh) * kw + zw] = acc;
                    }
                }
            }
        }
    }
    gker
}

pub(crate) fn conv_backward_bias<T: Scalar>(gout: &[T], d: &ConvDims) -> Vec<T> {
    let out_plane = d.out[0] * d.out[1] * d.out[2];
    let mut gb = vec![T::ZERO; d.o];
    for b in 0..d.b {
        for o in 0..d.o {
            let obase = (b * d.o + o) * out_plane;
            let mut acc = T::ZERO;
            for &g in &gout[obase..obase + out_plane] {
                acc += g;
            }
            gb[o] += acc;
        }
    }
    gb
}

impl<T: Scalar> Tensor<T> {
    /// Convolution over the trailing spatial axes. Accepts `[B,C,H,W]` with a
    /// `[O,C,kh,kw]` kernel (stride/pad of length 2) or `[B,C,T,H,W]` with a
    /// `[O,C,kt,kh,kw]` kernel (length 3). Bias shape `[O]`. Zero padding.
    pub fn conv(
        &self,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: &[usize],
        pad: &[usize],
    ) -> Result<Tensor<T>> {
        let rank = self.rank();
        if !(rank == 4 || rank == 5) || kernel.rank() != rank || stride.len() != rank - 2 || pad.len() != rank - 2 {
            return Err(Error::InvalidShape {
                op: "conv",
                shape: self.shape().to_vec(),
                reason: format!(
                    "input rank {} / kernel rank {} / stride len {} / pad len {}",
                    rank,
                    kernel.rank(),
                    stride.len(),
                    pad.len()
                ),
            });
        }
        if let Some(b) = bias {
            if b.shape() != [kernel.shape()[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv bias",
                    lhs: b.shape().to_vec(),
                    rhs: vec![kernel.shape()[0]],
                });
            }
        }
        // Normalize to 3 spatial axes with a leading singleton when 2D.
        let (in5, ker5, s3, p3) = if rank == 4 {
            let mut i = self.shape().to_vec();
            i.insert(2, 1);
            let mut k = kernel.shape().to_vec();
            k.insert(2, 1);
            (i, k, [1, stride[0], stride[1]], [0, pad[0], pad[1]])
        } else {
            (
                self.shape().to_vec(),
                kernel.shape().to_vec(),
                [stride[0], stride[1], stride[2]],
                [pad[0], pad[1], pad[2]],
            )
        };
        let dims = ConvDims::resolve(&in5, &ker5, &s3, &p3)?;
        let out = conv_forward(self.data(), kernel.data(), bias.map(|b| b.data()), &dims);
        let oshape = if rank == 4 {
            vec![dims.b, dims.o, dims.out[1], dims.out[2]]
        } else {
            vec![dims.b, dims.o, dims.out[0], dims.out[1], dims.out[2]]
        };
        let rg = self.requires_grad()
            || kernel.requires_grad()
            || bias.map(|b| b.requires_grad()).unwrap_or(false);
        Ok(Self::record(oshape, out, rg, || Op::Conv {
            input: self.clone(),
            kernel: kernel.clone(),
            bias: bias.cloned(),
            stride: s3,
            pad: p3,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};

    type T64 = Tensor<f64>;

    #[test]
    fn ones_3x3_full_overlap_sums_to_nine() {
        let input = T64::full(&[1, 1, 3, 3], 1.0);
        let kernel = T64::full(&[1, 1, 3, 3], 1.0);
        let out = input.conv(&kernel, None, &[1, 1], &[0, 0]).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data()[0], 9.0);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..2 * 25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let input = T64::from_f64s(&vals, &[1, 2, 5, 5]).unwrap();
        // center-one kernel per channel pair: identity only if O=C with diag taps
        let mut k = vec![0.0; 2 * 2 * 9];
        k[0 * 2 * 9 + 0 * 9 + 4] = 1.0;
        k[1 * 2 * 9 + 1 * 9 + 4] = 1.0;
        let kernel = T64::from_f64s(&k, &[2, 2, 3, 3]).unwrap();
        let out = input.conv(&kernel, None, &[1, 1], &[1, 1]).unwrap();
        assert_eq!(out.to_f64_vec(), input.to_f64_vec());
    }

    #[test]
    fn output_shape_formula() {
        for (h, k, s, p) in [(10, 3, 1, 0), (10, 3, 2, 1), (7, 5, 2, 2), (4, 1, 1, 0)] {
            let input = T64::zeros(&[1, 1, h, h]);
            let kernel = T64::zeros(&[1, 1, k, k]);
            let out = input.conv(&kernel, None, &[s, s], &[p, p]).unwrap();
            let expect = (h + 2 * p - k) / s + 1;
            assert_eq!(out.shape()[2], expect, "h={h} k={k} s={s} p={p}");
        }
    }

    #[test]
    fn kernel_larger_than_padded_input_errors() {
        let input = T64::zeros(&[1, 1, 2, 2]);
        let kernel = T64::zeros(&[1, 1, 5, 5]);
        assert!(matches!(
            input.conv(&kernel, None, &[1, 1], &[1, 1]),
            Err(Error::KernelTooLarge { .. })
        ));
    }

    #[test]
    fn conv2d_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let ivals: Vec<f64> = (0..2 * 3 * 5 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kvals: Vec<f64> = (0..4 * 3 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bvals: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let input = T64::var_f64s(&ivals, &[2, 3, 5, 5]).unwrap();
        let kernel = T64::var_f64s(&kvals, &[4, 3, 3, 3]).unwrap();
        let bias = T64::var_f64s(&bvals, &[4]).unwrap();
        let err = grad_check(
            |xs: &[T64]| xs[0].conv(&xs[1], Some(&xs[2]), &[2, 1], &[1, 1]).unwrap().sum_all(),
            &[input, kernel, bias],
        )
        .unwrap();
        assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn conv3d_strided_gradient() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let ivals: Vec<f64> = (0..2 * 3 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kvals: Vec<f64> = (0..2 * 2 * 3 * 1 * 1).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let input = T64::var_f64s(&ivals, &[1, 2, 3, 4, 4]).unwrap();
        let kernel = T64::var_f64s(&kvals, &[2, 2, 3, 1, 1]).unwrap();
        let err = grad_check(
            |xs: &[T64]| {
                xs[0]
                    .conv(&xs[1], None, &[1, 2, 2], &[1, 0, 0])
                    .unwrap()
                    .tanh()
                    .sum_all()
            },
            &[input, kernel],
        )
        .unwrap();
        assert!(err < 1e-5, "max rel err {err}");
    }
}
