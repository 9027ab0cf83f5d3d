//! Exponentially weighted multi-iteration L1 loss.
//!
//! `L = sum_t sum_n gamma^(N-n) * mean_{valid px of frame t} |gt - D_n^t|`,
//! with every iterate supervised at full resolution and invalid pixels
//! excluded from the per-frame mean.

use crate::data::DisparityVideo;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Build the loss over all recorded iterates. Each iterate is `[B,1,T,H,W]`
/// at full resolution (B = 1).
pub fn sequence_loss<T: Scalar>(
    iterates: &[Tensor<T>],
    gt: &DisparityVideo,
    gamma: f64,
) -> Result<Tensor<T>> {
    let n_iters = iterates.len();
    if n_iters == 0 {
        return Err(Error::InvalidShape {
            op: "sequence_loss",
            shape: vec![],
            reason: "no iterates recorded".into(),
        });
    }
    let (t_n, h, w) = (gt.t, gt.h, gt.w);
    let want = [1, 1, t_n, h, w];
    for it in iterates {
        if it.shape() != want {
            return Err(Error::ShapeMismatch {
                op: "sequence_loss",
                lhs: it.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
    }

    // per-frame masks carrying validity and the 1/count normalization
    let hw = h * w;
    let mut mask = vec![T::ZERO; t_n * hw];
    let mut gt_vals = vec![T::ZERO; t_n * hw];
    for t in 0..t_n {
        let count = gt.valid[t * hw..(t + 1) * hw].iter().filter(|&&v| v).count();
        if count == 0 {
            return Err(Error::NoValidPixels(format!(" in frame {t}")));
        }
        let inv = T::from_f64(1.0 / count as f64);
        for i in 0..hw {
            if gt.valid[t * hw + i] {
                mask[t * hw + i] = inv;
                gt_vals[t * hw + i] = T::from_f64(gt.values[t * hw + i] as f64);
            }
        }
    }
    let mask = Tensor::from_vec(mask, &want)?;
    let gt_t = Tensor::from_vec(gt_vals, &want)?;

    let mut total: Option<Tensor<T>> = None;
    for (i, pred) in iterates.iter().enumerate() {
        let n = i + 1;
        let weight = T::from_f64(gamma.powi((n_iters - n) as i32));
        let term = pred
            .sub(&gt_t)?
            .abs()
            .mul(&mask)?
            .sum_all()
            .mul_scalar(weight);
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok(total.expect("nonempty"))
}
