//! Matching cost volumes: warp the right features by the current disparity,
//! then correlate. The all-to-all-pairs search scores every offset pair
//! between two windows; the plain local search is kept as the ablation
//! baseline. Inner products are scaled by 1/sqrt(C) so cost magnitudes do
//! not depend on the channel count.

use crate::error::Result;
use crate::model::CorrelationMode;
use crate::tensor::{OobMask, Scalar, Tensor};

/// Search radii. The alternating schedule uses (4,0) on odd iterations and
/// (1,1) on even ones, so both produce the same channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchWindow {
    pub r_x: usize,
    pub r_y: usize,
}

impl SearchWindow {
    pub fn offsets(&self) -> usize {
        (2 * self.r_x + 1) * (2 * self.r_y + 1)
    }
}

/// Per-frame matching costs, `[B,K,T,H',W']`.
#[derive(Debug, Clone)]
pub struct CostVolume<T: Scalar> {
    pub values: Tensor<T>,
    pub mode: CorrelationMode,
    pub window: SearchWindow,
}

impl<T: Scalar> CostVolume<T> {
    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Channel count for a mode and window.
pub fn cost_channels(mode: CorrelationMode, window: SearchWindow) -> usize {
    let k = window.offsets();
    match mode {
        CorrelationMode::Local => k,
        CorrelationMode::AllPairs => k * k,
    }
}

/// Window for 1-indexed iteration `n`: odd iterations search 1D (4,0), even
/// iterations 2D (1,1).
pub fn corr_schedule(iter_index: usize) -> SearchWindow {
    debug_assert!(iter_index >= 1);
    if iter_index % 2 == 1 {
        SearchWindow { r_x: 4, r_y: 0 }
    } else {
        SearchWindow { r_x: 1, r_y: 1 }
    }
}

/// Bilinearly warp right features toward the left view using the current
/// disparity (in feature-grid pixels at this scale).
pub fn warp_right<T: Scalar>(
    f_right: &Tensor<T>,
    disparity: &Tensor<T>,
) -> Result<(Tensor<T>, OobMask)> {
    f_right.warp_h(disparity)
}

pub fn corr_local<T: Scalar>(
    f_left: &Tensor<T>,
    f_right_hat: &Tensor<T>,
    window: SearchWindow,
) -> Result<CostVolume<T>> {
    Ok(CostVolume {
        values: f_left.corr_local(f_right_hat, window.r_x, window.r_y)?,
        mode: CorrelationMode::Local,
        window,
    })
}

pub fn corr_all_pairs<T: Scalar>(
    f_left: &Tensor<T>,
    f_right_hat: &Tensor<T>,
    window: SearchWindow,
) -> Result<CostVolume<T>> {
    Ok(CostVolume {
        values: f_left.corr_all_pairs(f_right_hat, window.r_x, window.r_y)?,
        mode: CorrelationMode::AllPairs,
        window,
    })
}

/// Build the cost volume for one iteration: warp, then correlate with the
/// scheduled window.
pub fn build_cost_volume<T: Scalar>(
    mode: CorrelationMode,
    f_left: &Tensor<T>,
    f_right: &Tensor<T>,
    disparity: &Tensor<T>,
    iter_index: usize,
) -> Result<CostVolume<T>> {
    let window = corr_schedule(iter_index);
    let (warped, _mask) = warp_right(f_right, disparity)?;
    match mode {
        CorrelationMode::Local => corr_local(f_left, &warped, window),
        CorrelationMode::AllPairs => corr_all_pairs(f_left, &warped, window),
    }
}

/// The center-channel index of a local window (zero offset).
pub fn center_channel(window: SearchWindow) -> usize {
    window.r_y * (2 * window.r_x + 1) + window.r_x
}
