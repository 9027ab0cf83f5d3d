//! Accuracy and temporal-consistency metrics.
//!
//! TEPE is evaluated at fixed pixel coordinates: for each transition
//! `t -> t+1` and pixel valid at both endpoints, the error is
//! `|(pred[t+1] - pred[t]) - (gt[t+1] - gt[t])|`. No flow-warped
//! correspondences are used; the same definition applies to every method
//! under test.

use crate::data::DisparityVideo;
use crate::error::{Error, Result};

/// Evaluation summary. `delta_t` maps a pixel threshold to the fraction of
/// counted transitions whose temporal error exceeds it.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub epe: f64,
    pub tepe: f64,
    pub delta_t: Vec<(f64, f64)>,
    pub per_frame_epe: Vec<f64>,
    pub valid_pixels: usize,
    pub counted_transitions: usize,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        s.push_str(&format!("epe,{}\n", self.epe));
        s.push_str(&format!("tepe,{}\n", self.tepe));
        for (n, v) in &self.delta_t {
            s.push_str(&format!("delta_{n}px,{v}\n"));
        }
        for (t, v) in self.per_frame_epe.iter().enumerate() {
            s.push_str(&format!("epe_frame_{t},{v}\n"));
        }
        s.push_str(&format!("valid_pixels,{}\n", self.valid_pixels));
        s.push_str(&format!("counted_transitions,{}\n", self.counted_transitions));
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<22} {:>12}\n", "metric", "value"));
        s.push_str(&format!("{:<22} {:>12.6}\n", "EPE (px)", self.epe));
        s.push_str(&format!("{:<22} {:>12.6}\n", "TEPE (px)", self.tepe));
        for (n, v) in &self.delta_t {
            s.push_str(&format!("{:<22} {:>12.6}\n", format!("delta_{n}px"), v));
        }
        s
    }
}

fn check_shapes(op: &'static str, pred: &DisparityVideo, gt: &DisparityVideo) -> Result<()> {
    if (pred.t, pred.h, pred.w) != (gt.t, gt.h, gt.w) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![pred.t, pred.h, pred.w],
            rhs: vec![gt.t, gt.h, gt.w],
        });
    }
    Ok(())
}

/// Mean absolute disparity error over valid pixels.
pub fn epe(pred: &DisparityVideo, gt: &DisparityVideo) -> Result<f64> {
    check_shapes("epe", pred, gt)?;
    let mut sum = 0f64;
    let mut n = 0usize;
    for i in 0..gt.values.len() {
        if gt.valid[i] {
            sum += (pred.values[i] as f64 - gt.values[i] as f64).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoValidPixels(String::new()));
    }
    Ok(sum / n as f64)
}

fn per_frame_epe(pred: &DisparityVideo, gt: &DisparityVideo) -> Result<Vec<f64>> {
    let hw = gt.h * gt.w;
    (0..gt.t)
        .map(|t| {
            let mut sum = 0f64;
            let mut n = 0usize;
            for i in t * hw..(t + 1) * hw {
                if gt.valid[i] {
                    sum += (pred.values[i] as f64 - gt.values[i] as f64).abs();
                    n += 1;
                }
            }
            if n == 0 {
                return Err(Error::NoValidPixels(format!(" in frame {t}")));
            }
            Ok(sum / n as f64)
        })
        .collect()
}

/// Temporal errors for every counted pixel transition (valid at both
/// endpoints), flattened.
fn temporal_errors(pred: &DisparityVideo, gt: &DisparityVideo) -> Result<Vec<f64>> {
    check_shapes("tepe", pred, gt)?;
    if gt.t < 2 {
        return Err(Error::InvalidShape {
            op: "tepe",
            shape: vec![gt.t, gt.h, gt.w],
            reason: "needs at least two frames".into(),
        });
    }
    let hw = gt.h * gt.w;
    let mut errs = Vec::new();
    for t in 0..gt.t - 1 {
        for i in 0..hw {
            let a = t * hw + i;
            let b = (t + 1) * hw + i;
            if gt.valid[a] && gt.valid[b] {
                let dp = pred.values[b] as f64 - pred.values[a] as f64;
                let dg = gt.values[b] as f64 - gt.values[a] as f64;
                errs.push((dp - dg).abs());
            }
        }
    }
    if errs.is_empty() {
        return Err(Error::NoValidPixels(" for temporal transitions".into()));
    }
    Ok(errs)
}

/// Mean temporal end-point error over counted transitions.
pub fn tepe(pred: &DisparityVideo, gt: &DisparityVideo) -> Result<f64> {
    let errs = temporal_errors(pred, gt)?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Fraction of counted transitions whose temporal error exceeds `n` px.
pub fn delta_t(pred: &DisparityVideo, gt: &DisparityVideo, n: f64) -> Result<f64> {
    let errs = temporal_errors(pred, gt)?;
    let over = errs.iter().filter(|&&e| e > n).count();
    Ok(over as f64 / errs.len() as f64)
}

/// Full report with configurable delta thresholds.
pub fn evaluate(pred: &DisparityVideo, gt: &DisparityVideo, thresholds: &[f64]) -> Result<EvalReport> {
    let errs = temporal_errors(pred, gt)?;
    let tepe = errs.iter().sum::<f64>() / errs.len() as f64;
    let delta_t = thresholds
        .iter()
        .map(|&n| {
            let over = errs.iter().filter(|&&e| e > n).count();
            (n, over as f64 / errs.len() as f64)
        })
        .collect();
    Ok(EvalReport {
        epe: epe(pred, gt)?,
        tepe,
        delta_t,
        per_frame_epe: per_frame_epe(pred, gt)?,
        valid_pixels: gt.valid.iter().filter(|&&v| v).count(),
        counted_transitions: errs.len(),
    })
}

/// Least-squares scale and shift aligning relative values onto a reference:
/// minimizes `sum_valid (s*rel + b - ref)^2` via the normal equations.
/// Returns the aligned values and `(s, b)`.
pub fn align_scale_shift(rel: &[f64], reference: &DisparityVideo) -> Result<(Vec<f64>, f64, f64)> {
    if rel.len() != reference.values.len() {
        return Err(Error::ShapeMismatch {
            op: "align_scale_shift",
            lhs: vec![rel.len()],
            rhs: vec![reference.values.len()],
        });
    }
    let mut n = 0f64;
    let (mut sr, mut srr, mut sf, mut srf) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..rel.len() {
        if reference.valid[i] {
            let r = rel[i];
            let f = reference.values[i] as f64;
            n += 1.0;
            sr += r;
            srr += r * r;
            sf += f;
            srf += r * f;
        }
    }
    if n < 2.0 {
        return Err(Error::NoValidPixels(" for scale-shift alignment".into()));
    }
    let det = srr * n - sr * sr;
    // det = n * variance(rel); zero when rel is constant over valid pixels
    if det.abs() <= 1e-12 * (srr * n).abs().max(1.0) {
        return Err(Error::DegenerateFit);
    }
    let s = (srf * n - sr * sf) / det;
    let b = (srr * sf - sr * srf) / det;
    let aligned = rel.iter().map(|&r| s * r + b).collect();
    Ok((aligned, s, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn dv(t: usize, h: usize, w: usize, values: Vec<f32>, valid: Option<Vec<bool>>) -> DisparityVideo {
        DisparityVideo {
            t,
            h,
            w,
            valid: valid.unwrap_or_else(|| vec![true; values.len()]),
            values,
        }
    }

    #[test]
    fn epe_identity_and_offset() {
        let gt = dv(2, 2, 2, vec![1.0; 8], None);
        assert_eq!(epe(&gt, &gt).unwrap(), 0.0);
        let pred = dv(2, 2, 2, vec![2.0; 8], None);
        assert_eq!(epe(&pred, &gt).unwrap(), 1.0);
    }

    #[test]
    fn epe_hand_computed_case() {
        // 2 frames of 3x3; a few invalid pixels
        let gt_vals: Vec<f32> = (0..18).map(|i| i as f32 * 0.5).collect();
        let mut valid = vec![true; 18];
        valid[0] = false;
        valid[17] = false;
        let pred_vals: Vec<f32> = gt_vals.iter().map(|v| v + 0.25).collect();
        let gt = dv(2, 3, 3, gt_vals, Some(valid));
        let pred = dv(2, 3, 3, pred_vals, None);
        // every valid pixel contributes exactly 0.25
        assert!((epe(&pred, &gt).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn tepe_bias_cancels() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let gt_vals: Vec<f32> = (0..3 * 4).map(|_| rng.gen_range(0.0f32..4.0)).collect();
        let gt = dv(3, 2, 2, gt_vals.clone(), None);
        let pred = dv(3, 2, 2, gt_vals.iter().map(|v| v + 7.5).collect(), None);
        assert!(tepe(&pred, &gt).unwrap().abs() < 1e-6);
    }

    #[test]
    fn unit_flicker_scores_one() {
        // static gt, prediction alternating 0/1 per frame
        let gt = dv(4, 2, 2, vec![3.0; 16], None);
        let pred_vals: Vec<f32> = (0..4)
            .flat_map(|t| vec![(t % 2) as f32; 4])
            .collect();
        let pred = dv(4, 2, 2, pred_vals, None);
        assert_eq!(tepe(&pred, &gt).unwrap(), 1.0);
        assert_eq!(delta_t(&pred, &gt, 0.5).unwrap(), 1.0);
        assert_eq!(delta_t(&pred, &gt, 1.0).unwrap(), 0.0); // strict exceed
    }

    #[test]
    fn tepe_hand_computed_three_frames() {
        // 3 frames of 2x2: pred deltas all zero, gt deltas vary
        let gt = dv(
            3,
            2,
            2,
            vec![
                0.0, 1.0, 2.0, 3.0, // t0
                0.5, 1.0, 2.0, 4.0, // t1: deltas 0.5,0,0,1
                0.5, 2.0, 2.0, 4.0, // t2: deltas 0,1,0,0
            ],
            None,
        );
        let pred = dv(3, 2, 2, vec![1.0; 12], None);
        let want = (0.5 + 0.0 + 0.0 + 1.0 + 0.0 + 1.0 + 0.0 + 0.0) / 8.0;
        assert!((tepe(&pred, &gt).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn half_flicker_gives_half_fraction() {
        // two pixels: one flickers by 1, one is perfect
        let gt = dv(2, 1, 2, vec![1.0, 1.0, 1.0, 1.0], None);
        let pred = dv(2, 1, 2, vec![1.0, 1.0, 2.0, 1.0], None);
        assert_eq!(delta_t(&pred, &gt, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn delta_monotone_in_threshold() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let gt_vals: Vec<f32> = (0..5 * 16).map(|_| rng.gen_range(0.0f32..8.0)).collect();
        let pr_vals: Vec<f32> = gt_vals.iter().map(|v| v + rng.gen_range(-2.0f32..2.0)).collect();
        let gt = dv(5, 4, 4, gt_vals, None);
        let pred = dv(5, 4, 4, pr_vals, None);
        let mut last = f64::MAX;
        for n in [0.1, 0.5, 1.0, 2.0, 4.0] {
            let frac = delta_t(&pred, &gt, n).unwrap();
            assert!(frac <= last, "delta not monotone at n={n}");
            last = frac;
        }
    }

    #[test]
    fn temporal_validity_requires_both_endpoints() {
        let mut valid = vec![true; 8];
        valid[0] = false; // (t0, pixel0) invalid -> transition 0 not counted
        let gt = dv(2, 2, 2, vec![1.0; 8], Some(valid));
        let mut pred_vals = vec![1.0f32; 8];
        pred_vals[4] = 9.0; // only affects the uncounted transition
        let pred = dv(2, 2, 2, pred_vals, None);
        assert_eq!(tepe(&pred, &gt).unwrap(), 0.0);
    }

    #[test]
    fn errors_on_degenerate_inputs() {
        let gt = dv(1, 2, 2, vec![1.0; 4], None);
        assert!(tepe(&gt, &gt).is_err()); // T < 2
        let invalid = dv(2, 1, 1, vec![1.0, 1.0], Some(vec![false, false]));
        assert!(matches!(epe(&invalid, &invalid), Err(Error::NoValidPixels(_))));
    }

    #[test]
    fn align_recovers_affine_map_exactly() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let ref_vals: Vec<f32> = (0..2 * 9).map(|_| rng.gen_range(1.0f32..9.0)).collect();
        let reference = dv(2, 3, 3, ref_vals.clone(), None);
        // rel = (ref - 3) / 2  =>  ref = 2*rel + 3
        let rel: Vec<f64> = ref_vals.iter().map(|&v| (v as f64 - 3.0) / 2.0).collect();
        let (aligned, s, b) = align_scale_shift(&rel, &reference).unwrap();
        assert!((s - 2.0).abs() < 1e-9, "s = {s}");
        assert!((b - 3.0).abs() < 1e-9, "b = {b}");
        for (a, r) in aligned.iter().zip(&ref_vals) {
            assert!((a - *r as f64).abs() < 1e-9);
        }
        // identity case
        let rel: Vec<f64> = ref_vals.iter().map(|&v| v as f64).collect();
        let (_, s, b) = align_scale_shift(&rel, &reference).unwrap();
        assert!((s - 1.0).abs() < 1e-9 && b.abs() < 1e-7);
    }

    #[test]
    fn align_beats_random_candidates() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let ref_vals: Vec<f32> = (0..2 * 16).map(|_| rng.gen_range(0.0f32..10.0)).collect();
        let reference = dv(2, 4, 4, ref_vals, None);
        let rel: Vec<f64> = (0..2 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, s, b) = align_scale_shift(&rel, &reference).unwrap();
        let residual = |s: f64, b: f64| -> f64 {
            rel.iter()
                .zip(&reference.values)
                .map(|(&r, &f)| (s * r + b - f as f64).powi(2))
                .sum()
        };
        let best = residual(s, b);
        for _ in 0..1000 {
            let cs = rng.gen_range(-20.0..20.0);
            let cb = rng.gen_range(-20.0..20.0);
            assert!(best <= residual(cs, cb) + 1e-9);
        }
    }

    #[test]
    fn align_degenerate_constant_rel_errors() {
        let reference = dv(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0], None);
        let rel = vec![5.0; 4];
        assert!(matches!(
            align_scale_shift(&rel, &reference),
            Err(Error::DegenerateFit)
        ));
    }

    #[test]
    fn report_serialization_contains_everything() {
        let gt = dv(2, 2, 2, vec![1.0; 8], None);
        let pred = dv(2, 2, 2, vec![1.5; 8], None);
        let report = evaluate(&pred, &gt, &[1.0, 3.0]).unwrap();
        assert_eq!(report.epe, 0.5);
        assert_eq!(report.tepe, 0.0);
        let csv = report.to_csv();
        assert!(csv.contains("epe,0.5"));
        assert!(csv.contains("delta_1px,0"));
        assert!(csv.contains("delta_3px,0"));
        assert!(report.to_table().contains("EPE"));
    }
}
