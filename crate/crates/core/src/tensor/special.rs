//! Matching-specific primitives: replicate-padded 3D unfolding, horizontal
//! bilinear warping by a disparity field, local and all-to-all-pairs
//! correlation volumes, and fixed-weight bilinear upsampling.

use super::scalar::Scalar;
use super::{Op, Tensor};
use crate::error::{Error, Result};

/// Per-pixel flags marking warp samples that fell outside the source image.
#[derive(Debug, Clone)]
pub struct OobMask {
    /// `[B, T, H, W]`
    pub shape: Vec<usize>,
    /// true where the sample position was inside `[0, W-1]`.
    pub in_bounds: Vec<bool>,
}

fn kernel_offsets(k: usize) -> &'static [isize] {
    match k {
        1 => &[0],
        3 => &[-1, 0, 1],
        _ => unreachable!("unfold kernel dims are 1 or 3"),
    }
}

fn clamp(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

pub(crate) fn unfold_forward<T: Scalar>(
    input: &[T],
    shape: &[usize],
    kernel: [usize; 3],
) -> Vec<T> {
    let (b, c, t, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let k: usize = kernel.iter().product();
    let plane = t * h * w;
    let mut out = vec![T::ZERO; b * c * k * plane];
    let (dts, dys, dxs) = (
        kernel_offsets(kernel[0]),
        kernel_offsets(kernel[1]),
        kernel_offsets(kernel[2]),
    );
    for bc in 0..b * c {
        let ibase = bc * plane;
        let mut j = 0usize;
        for &dt in dts {
            for &dy in dys {
                for &dx in dxs {
                    let obase = (bc * k + j) * plane;
                    for ti in 0..t {
                        let ts = clamp(ti as isize + dt, t);
                        for yi in 0..h {
                            let ys = clamp(yi as isize + dy, h);
                            let srow = ibase + (ts * h + ys) * w;
                            let orow = obase + (ti * h + yi) * w;
                            for xi in 0..w {
                                let xs = clamp(xi as isize + dx, w);
                                out[orow + xi] = input[srow + xs];
                            }
                        }
                    }
                    j += 1;
                }
            }
        }
    }
    out
}

pub(crate) fn unfold_backward<T: Scalar>(
    gout: &[T],
    in_shape: &[usize],
    kernel: [usize; 3],
) -> Vec<T> {
    let (b, c, t, h, w) = (
        in_shape[0],
        in_shape[1],
        in_shape[2],
        in_shape[3],
        in_shape[4],
    );
    let k: usize = kernel.iter().product();
    let plane = t * h * w;
    let mut gin = vec![T::ZERO; b * c * plane];
    let (dts, dys, dxs) = (
        kernel_offsets(kernel[0]),
        kernel_offsets(kernel[1]),
        kernel_offsets(kernel[2]),
    );
    for bc in 0..b * c {
        let ibase = bc * plane;
        let mut j = 0usize;
        for &dt in dts {
            for &dy in dys {
                for &dx in dxs {
                    let obase = (bc * k + j) * plane;
                    for ti in 0..t {
                        let ts = clamp(ti as isize + dt, t);
                        for yi in 0..h {
                            let ys = clamp(yi as isize + dy, h);
                            let srow = ibase + (ts * h + ys) * w;
                            let orow = obase + (ti * h + yi) * w;
                            for xi in 0..w {
                                let xs = clamp(xi as isize + dx, w);
                                gin[srow + xs] += gout[orow + xi];
                            }
                        }
                    }
                    j += 1;
                }
            }
        }
    }
    gin
}

pub(crate) fn warp_forward<T: Scalar>(
    feat: &[T],
    disp: &[T],
    shape: &[usize],
) -> (Vec<T>, Vec<bool>) {
    let (b, c, t, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let plane = t * h * w;
    let mut out = vec![T::ZERO; b * c * plane];
    let mut in_bounds = vec![false; b * plane];
    for bi in 0..b {
        for ti in 0..t {
            for yi in 0..h {
                let drow = (bi * plane) + (ti * h + yi) * w;
                for xi in 0..w {
                    let d = disp[drow + xi].to_f64();
                    let xf = xi as f64 - d;
                    in_bounds[drow + xi] = xf >= 0.0 && xf <= (w - 1) as f64;
                    let x0 = xf.floor();
                    let frac = T::from_f64(xf - x0);
                    let x0 = x0 as isize;
                    let w0 = T::ONE - frac;
                    let w1 = frac;
                    let t0 = x0 >= 0 && x0 < w as isize;
                    let t1 = x0 + 1 >= 0 && x0 + 1 < w as isize;
                    for ci in 0..c {
                        let frow = ((bi * c + ci) * plane) + (ti * h + yi) * w;
                        let mut v = T::ZERO;
                        if t0 {
                            v += w0 * feat[frow + x0 as usize];
                        }
                        if t1 {
                            v += w1 * feat[frow + (x0 + 1) as usize];
                        }
                        out[frow + xi] = v;
                    }
                }
            }
        }
    }
    (out, in_bounds)
}

pub(crate) fn warp_backward<T: Scalar>(
    gout: &[T],
    feat: &[T],
    disp: &[T],
    shape: &[usize],
) -> (Vec<T>, Vec<T>) {
    let (b, c, t, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let plane = t * h * w;
    let mut gfeat = vec![T::ZERO; b * c * plane];
    let mut gdisp = vec![T::ZERO; b * plane];
    for bi in 0..b {
        for ti in 0..t {
            for yi in 0..h {
                let drow = (bi * plane) + (ti * h + yi) * w;
                for xi in 0..w {
                    let d = disp[drow + xi].to_f64();
                    let xf = xi as f64 - d;
                    let x0f = xf.floor();
                    let frac = T::from_f64(xf - x0f);
                    let x0 = x0f as isize;
                    let w0 = T::ONE - frac;
                    let w1 = frac;
                    let t0 = x0 >= 0 && x0 < w as isize;
                    let t1 = x0 + 1 >= 0 && x0 + 1 < w as isize;
                    let mut gd = T::ZERO;
                    for ci in 0..c {
                        let frow = ((bi * c + ci) * plane) + (ti * h + yi) * w;
                        let g = gout[frow + xi];
                        // d(out)/d(disp) = F[x0] - F[x0+1] over in-bounds taps
                        if t0 {
                            gfeat[frow + x0 as usize] += w0 * g;
                            gd += g * feat[frow + x0 as usize];
                        }
                        if t1 {
                            gfeat[frow + (x0 + 1) as usize] += w1 * g;
                            gd -= g * feat[frow + (x0 + 1) as usize];
                        }
                    }
                    gdisp[drow + xi] += gd;
                }
            }
        }
    }
    (gfeat, gdisp)
}

/// Output row range on an axis of length `len` such that `pos + off` stays in
/// bounds.
fn offset_range(off: isize, len: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = ((len as isize - off).min(len as isize)).max(0) as usize;
    (lo.min(hi), hi)
}

pub(crate) fn corr_local_forward<T: Scalar>(
    left: &[T],
    right: &[T],
    shape: &[usize],
    rx: usize,
    ry: usize,
) -> Vec<T> {
    let (b, c, t, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let k = (2 * rx + 1) * (2 * ry + 1);
    let plane = t * h * w;
    let hw = h * w;
    let inv = T::from_f64(1.0 / (c as f64).sqrt());
    let mut out = vec![T::ZERO; b * k * plane];
    for bi in 0..b {
        for ti in 0..t {
            let mut idx = 0usize;
            for dy in -(ry as isize)..=(ry as isize) {
                let (ylo, yhi) = offset_range(dy, h);
                for dx in -(rx as isize)..=(rx as isize) {
                    let (xlo, xhi) = offset_range(dx, w);
                    let obase = (bi * k + idx) * plane + ti * hw;
                    for ci in 0..c {
                        let fbase = (bi * c + ci) * plane + ti * hw;
                        for y in ylo..yhi {
                            let lrow = fbase + y * w;
                            let rrow = fbase + ((y as isize + dy) as usize) * w;
                            let orow = obase + y * w;
                            for x in xlo..xhi {
                                let xr = (x as isize + dx) as usize;
                                out[orow + x] += inv * left[lrow + x] * right[rrow + xr];
                            }
                        }
                    }
                    idx += 1;
                }
            }
        }
    }
    out
}

pub(crate) fn corr_local_backward<T: Scalar>(
    gout: &[T],
    left: &[T],
    right: &[T],
    shape: &[usize],
    rx: usize,
    ry: usize,
) -> (Vec<T>, Vec<T>) {
    let (b, c, t, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let k = (2 * rx + 1) * (2 * ry + 1);
    let plane = t * h * w;
    let hw = h * w;
    let inv = T::from_f64(1.0 / (c as f64).sqrt());
    let mut gl = vec![T::ZERO; b * c * plane];
    let mut gr = vec![T::ZERO; b * c * plane];
    for bi in 0..b {
        for ti in 0..t {
            let mut idx = 0usize;
            for dy in -(ry as isize)..=(ry as isize) {
                let (ylo, yhi) = offset_range(dy, h);
                for dx in -(rx as isize)..=(rx as isize) {
                    let (xlo, xhi) = offset_range(dx, w);
                    let obase = (bi * k + idx) * plane + ti * hw;
                    for ci in 0..c {
                        let fbase = (bi * c + ci) * plane + ti * hw;
                        for y in ylo..yhi {
                            let lrow = fbase + y * w;
                            let rrow = fbase + ((y as isize + dy) as usize) * w;
                            let orow = obase + y * w;
                            for x in xlo..xhi {
                                let xr = (x as isize + dx) as usize;
                                let g = inv * gout[orow + x];
                                gl[lrow + x] += g * right[rrow + xr];
                                gr[rrow + xr] += g * left[lrow + x];
                            }
                        }
                    }
                    idx += 1;
                }
            }
        }
    }
    (gl, gr)
}

pub(crate) fn corr_all_pairs_forward<T: Scalar>(
    left: &[T],
    right: &[T],
    shape: &[usize],
    rx: usize,
    ry: usize,
) -> Vec<T> {
    let (b, c, t, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let k1 = (2 * rx + 1) * (2 * ry + 1);
    let k = k1 * k1;
    let plane = t * h * w;
    let hw = h * w;
    let inv = T::from_f64(1.0 / (c as f64).sqrt());
    let mut out = vec![T::ZERO; b * k * plane];
    for bi in 0..b {
        for ti in 0..t {
            let mut i1 = 0usize;
            for d1y in -(ry as isize)..=(ry as isize) {
                for d1x in -(rx as isize)..=(rx as isize) {
                    let mut i2 = 0usize;
                    for d2y in -(ry as isize)..=(ry as isize) {
                        let (ylo1, yhi1) = offset_range(d1y, h);
                        let (ylo2, yhi2) = offset_range(d2y, h);
                        let (ylo, yhi) = (ylo1.max(ylo2), yhi1.min(yhi2));
                        for d2x in -(rx as isize)..=(rx as isize) {
                            let (xlo1, xhi1) = offset_range(d1x, w);
                            let (xlo2, xhi2) = offset_range(d2x, w);
                            let (xlo, xhi) = (xlo1.max(xlo2), xhi1.min(xhi2));
                            let obase = (bi * k + i1 * k1 + i2) * plane + ti * hw;
                            if xlo < xhi && ylo < yhi {
                                for ci in 0..c {
                                    let fbase = (bi * c + ci) * plane + ti * hw;
                                    for y in ylo..yhi {
                                        let lrow = fbase + ((y as isize + d1y) as usize) * w;
                                        let rrow = fbase + ((y as isize + d2y) as usize) * w;
                                        let orow = obase + y * w;
                                        for x in xlo..xhi {
                                            let xl = (x as isize + d1x) as usize;
                                            let xr = (x as isize + d2x) as usize;
                                            out[orow + x] += inv * left[lrow + xl] * right[rrow + xr];
                                        }
                                    }
                                }
                            }
                            i2 += 1;
                        }
                    }
                    i1 += 1;
                }
            }
        }
    }
    out
}

pub(crate) fn corr_all_pairs_backward<T: Scalar>(
    gout: &[T],
    left: &[T],
    right: &[T],
    shape: &[usize],
    rx: usize,
    ry: usize,
) -> (Vec<T>, Vec<T>) {
    let (b, c, t, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let k1 = (2 * rx + 1) * (2 * ry + 1);
    let k = k1 * k1;
    let plane = t * h * w;
    let hw = h * w;
    let inv = T::from_f64(1.0 / (c as f64).sqrt());
    let mut gl = vec![T::ZERO; b * c * plane];
    let mut gr = vec![T::ZERO; b * c * plane];
    for bi in 0..b {
        for ti in 0..t {
            let mut i1 = 0usize;
            for d1y in -(ry as isize)..=(ry as isize) {
                for d1x in -(rx as isize)..=(rx as isize) {
                    let mut i2 = 0usize;
                    for d2y in -(ry as isize)..=(ry as isize) {
                        let (ylo1, yhi1) = offset_range(d1y, h);
                        let (ylo2, yhi2) = offset_range(d2y, h);
                        let (ylo, yhi) = (ylo1.max(ylo2), yhi1.min(yhi2));
                        for d2x in -(rx as isize)..=(rx as isize) {
                            let (xlo1, xhi1) = offset_range(d1x, w);
                            let (xlo2, xhi2) = offset_range(d2x, w);
                            let (xlo, xhi) = (xlo1.max(xlo2), xhi1.min(xhi2));
                            let obase = (bi * k + i1 * k1 + i2) * plane + ti * hw;
                            if xlo < xhi && ylo < yhi {
                                for ci in 0..c {
                                    let fbase = (bi * c + ci) * plane + ti * hw;
                                    for y in ylo..yhi {
                                        let lrow = fbase + ((y as isize + d1y) as usize) * w;
                                        let rrow = fbase + ((y as isize + d2y) as usize) * w;
                                        let orow = obase + y * w;
                                        for x in xlo..xhi {
                                            let xl = (x as isize + d1x) as usize;
                                            let xr = (x as isize + d2x) as usize;
                                            let g = inv * gout[orow + x];
                                            gl[lrow + xl] += g * right[rrow + xr];
                                            gr[rrow + xr] += g * left[lrow + xl];
                                        }
                                    }
                                }
                            }
                            i2 += 1;
                        }
                    }
                    i1 += 1;
                }
            }
        }
    }
    (gl, gr)
}

/// Per-output-axis interpolation taps for align-corners bilinear resampling.
pub(crate) fn lerp_taps<T: Scalar>(in_len: usize, out_len: usize) -> Vec<(usize, usize, T, T)> {
    (0..out_len)
        .map(|o| {
            if out_len == 1 || in_len == 1 {
                return (0, 0, T::ONE, T::ZERO);
            }
            let f = o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
            let i0 = f.floor() as usize;
            let i0 = i0.min(in_len - 2);
            let frac = f - i0 as f64;
            (
                i0,
                i0 + 1,
                T::from_f64(1.0 - frac),
                T::from_f64(frac),
            )
        })
        .collect()
}

pub(crate) fn bilinear_up_forward<T: Scalar>(input: &[T], shape: &[usize], alpha: usize) -> Vec<T> {
    let (b, c, t, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let (ho, wo) = (h * alpha, w * alpha);
    let ytaps = lerp_taps::<T>(h, ho);
    let xtaps = lerp_taps::<T>(w, wo);
    let scale = T::from_f64(alpha as f64);
    let mut out = vec![T::ZERO; b * c * t * ho * wo];
    for bct in 0..b * c * t {
        let ibase = bct * h * w;
        let obase = bct * ho * wo;
        for (yo, &(y0, y1, wy0, wy1)) in ytaps.iter().enumerate() {
            let r0 = ibase + y0 * w;
            let r1 = ibase + y1 * w;
            let orow = obase + yo * wo;
            for (xo, &(x0, x1, wx0, wx1)) in xtaps.iter().enumerate() {
                let v = wy0 * (wx0 * input[r0 + x0] + wx1 * input[r0 + x1])
                    + wy1 * (wx0 * input[r1 + x0] + wx1 * input[r1 + x1]);
                out[orow + xo] = scale * v;
            }
        }
    }
    out
}

pub(crate) fn bilinear_up_backward<T: Scalar>(gout: &[T], shape: &[usize], alpha: usize) -> Vec<T> {
    let (b, c, t, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let (ho, wo) = (h * alpha, w * alpha);
    let ytaps = lerp_taps::<T>(h, ho);
    let xtaps = lerp_taps::<T>(w, wo);
    let scale = T::from_f64(alpha as f64);
    let mut gin = vec![T::ZERO; b * c * t * h * w];
    for bct in 0..b * c * t {
        let ibase = bct * h * w;
        let obase = bct * ho * wo;
        for (yo, &(y0, y1, wy0, wy1)) in ytaps.iter().enumerate() {
            let r0 = ibase + y0 * w;
            let r1 = ibase + y1 * w;
            let orow = obase + yo * wo;
            for (xo, &(x0, x1, wx0, wx1)) in xtaps.iter().enumerate() {
                let g = scale * gout[orow + xo];
                gin[r0 + x0] += wy0 * wx0 * g;
                gin[r0 + x1] += wy0 * wx1 * g;
                gin[r1 + x0] += wy1 * wx0 * g;
                gin[r1 + x1] += wy1 * wx1 * g;
            }
        }
    }
    gin
}

fn expect_rank5<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.rank() != 5 {
        return Err(Error::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: "expected a [B,C,T,H,W] tensor".into(),
        });
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    /// Gather 3D neighborhoods with replicate padding:
    /// `[B,C,T,H,W] -> [B,C,kt*kh*kw,T,H,W]`. Kernel dims must be 1 or 3.
    /// Channel order is t-major, then y, then x, so for a 3x3x3 kernel the
    /// center sits at index 13.
    pub fn unfold3(&self, kt: usize, kh: usize, kw: usize) -> Result<Tensor<T>> {
        expect_rank5("unfold3", self)?;
        for k in [kt, kh, kw] {
            if k != 1 && k != 3 {
                return Err(Error::InvalidShape {
                    op: "unfold3",
                    shape: vec![kt, kh, kw],
                    reason: "kernel dims must be 1 or 3".into(),
                });
            }
        }
        let kernel = [kt, kh, kw];
        let out = unfold_forward(self.data(), self.shape(), kernel);
        let s = self.shape();
        let oshape = vec![s[0], s[1], kt * kh * kw, s[2], s[3], s[4]];
        Ok(Self::record(oshape, out, self.requires_grad(), || Op::Unfold {
            input: self.clone(),
            kernel,
        }))
    }

    /// Warp features toward the reference view: the output at `(x, y)`
    /// bilinearly samples `self` at `(x - d(x,y), y)`. Taps outside
    /// `[0, W-1]` contribute zero; the mask flags fully in-bounds samples.
    /// Differentiable in both the features and the disparity.
    pub fn warp_h(&self, disp: &Tensor<T>) -> Result<(Tensor<T>, OobMask)> {
        expect_rank5("warp_h", self)?;
        let s = self.shape();
        let want = [s[0], 1, s[2], s[3], s[4]];
        if disp.shape() != want {
            return Err(Error::ShapeMismatch {
                op: "warp_h",
                lhs: self.shape().to_vec(),
                rhs: disp.shape().to_vec(),
            });
        }
        let (out, in_bounds) = warp_forward(self.data(), disp.data(), s);
        let mask = OobMask {
            shape: vec![s[0], s[2], s[3], s[4]],
            in_bounds,
        };
        let rg = self.requires_grad() || disp.requires_grad();
        let t = Self::record(s.to_vec(), out, rg, || Op::WarpH {
            feat: self.clone(),
            disp: disp.clone(),
        });
        Ok((t, mask))
    }

    /// Local correlation: channel-wise inner products between `self` at
    /// `(x,y)` and `right` at `(x+rx', y+ry')` for all offsets in the window,
    /// scaled by `1/sqrt(C)`. Output `[B,(2rx+1)(2ry+1),T,H,W]`, offsets
    /// ordered y-major.
    pub fn corr_local(&self, right: &Tensor<T>, rx: usize, ry: usize) -> Result<Tensor<T>> {
        expect_rank5("corr_local", self)?;
        if self.shape() != right.shape() {
            return Err(Error::ShapeMismatch {
                op: "corr_local",
                lhs: self.shape().to_vec(),
                rhs: right.shape().to_vec(),
            });
        }
        let s = self.shape();
        let out = corr_local_forward(self.data(), right.data(), s, rx, ry);
        let k = (2 * rx + 1) * (2 * ry + 1);
        let oshape = vec![s[0], k, s[2], s[3], s[4]];
        let rg = self.requires_grad() || right.requires_grad();
        Ok(Self::record(oshape, out, rg, || Op::CorrLocal {
            left: self.clone(),
            right: right.clone(),
            rx,
            ry,
        }))
    }

    /// All-to-all-pairs correlation: inner products between `self` at
    /// `(x+r1, y)` offsets and `right` at `(x+r2, y)` offsets over the
    /// window product. Output `[B,K^2,T,H,W]` with channel `i1*K+i2`;
    /// positions out of bounds on either side score zero.
    pub fn corr_all_pairs(&self, right: &Tensor<T>, rx: usize, ry: usize) -> Result<Tensor<T>> {
        expect_rank5("corr_all_pairs", self)?;
        if self.shape() != right.shape() {
            return Err(Error::ShapeMismatch {
                op: "corr_all_pairs",
                lhs: self.shape().to_vec(),
                rhs: right.shape().to_vec(),
            });
        }
        let s = self.shape();
        let out = corr_all_pairs_forward(self.data(), right.data(), s, rx, ry);
        let k1 = (2 * rx + 1) * (2 * ry + 1);
        let oshape = vec![s[0], k1 * k1, s[2], s[3], s[4]];
        let rg = self.requires_grad() || right.requires_grad();
        Ok(Self::record(oshape, out, rg, || Op::CorrAllPairs {
            left: self.clone(),
            right: right.clone(),
            rx,
            ry,
        }))
    }

    /// Per-frame align-corners bilinear upsampling by an integer factor with
    /// values scaled by the factor. No temporal mixing.
    pub fn bilinear_up(&self, alpha: usize) -> Result<Tensor<T>> {
        expect_rank5("bilinear_up", self)?;
        if alpha == 0 {
            return Err(Error::InvalidShape {
                op: "bilinear_up",
                shape: vec![alpha],
                reason: "alpha must be >= 1".into(),
            });
        }
        let s = self.shape();
        let out = bilinear_up_forward(self.data(), s, alpha);
        let oshape = vec![s[0], s[1], s[2], s[3] * alpha, s[4] * alpha];
        Ok(Self::record(oshape, out, self.requires_grad(), || Op::BilinearUp {
            input: self.clone(),
            alpha,
        }))
    }
}
