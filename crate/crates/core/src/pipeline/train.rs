//! Training loop: on-the-fly synthetic scenes, crop/rescale augmentation,
//! AdamW with a one-cycle schedule and gradient-norm clipping, periodic
//! held-out evaluation, and checkpointing.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{forward, loss::sequence_loss, optim::{AdamW, OneCycle}, CascadeConfig, ModelState};
use crate::data::{generate_scene, DisparityVideo, SceneFamily, StereoSequence, Video};
use crate::error::{Error, Result};
use crate::features::resize_plane;
use crate::metrics;
use crate::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub clip_norm: f64,
    /// Sequence length and GRU iterations during training.
    pub t_train: usize,
    pub n_train: usize,
    /// Sequence length and GRU iterations for held-out evaluation.
    pub t_eval: usize,
    pub n_eval: usize,
    /// Random crop size; a crop matching the frame size is a no-op.
    pub crop_h: usize,
    pub crop_w: usize,
    /// Horizontal-consistent random rescale before cropping.
    pub rescale: bool,
    pub seed: u64,
    /// Cycle length of the training set; 0 means a fresh scene per step.
    pub dataset_size: usize,
    pub eval_every: usize,
    pub eval_scenes: usize,
    pub checkpoint_every: usize,
    /// Stop once a held-out eval reaches both targets.
    pub target_epe: Option<f64>,
    pub target_tepe: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch: 1,
            lr: 2e-4,
            weight_decay: 1e-5,
            gamma: 0.9,
            clip_norm: 1.0,
            t_train: 5,
            n_train: 10,
            t_eval: 20,
            n_eval: 20,
            crop_h: 64,
            crop_w: 128,
            rescale: false,
            seed: 0,
            dataset_size: 0,
            eval_every: 100,
            eval_scenes: 4,
            checkpoint_every: 200,
            target_epe: None,
            target_tepe: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// (step, loss, lr) per step.
    pub loss_curve: Vec<(usize, f64, f64)>,
    /// (step, epe, tepe) at each held-out evaluation.
    pub eval_history: Vec<(usize, f64, f64)>,
    pub stopped_early_at: Option<usize>,
}

fn crop_video(v: &Video, y0: usize, x0: usize, ch: usize, cw: usize) -> Video {
    let mut out = Video::zeros(v.t, ch, cw);
    for t in 0..v.t {
        for y in 0..ch {
            for x in 0..cw {
                for c in 0..3 {
                    out.set(t, y, x, c, v.get(t, y0 + y, x0 + x, c));
                }
            }
        }
    }
    out
}

fn crop_disp(d: &DisparityVideo, y0: usize, x0: usize, ch: usize, cw: usize) -> DisparityVideo {
    let mut values = Vec::with_capacity(d.t * ch * cw);
    let mut valid = Vec::with_capacity(d.t * ch * cw);
    for t in 0..d.t {
        for y in 0..ch {
            for x in 0..cw {
                let i = d.idx(t, y0 + y, x0 + x);
                values.push(d.values[i]);
                valid.push(d.valid[i]);
            }
        }
    }
    DisparityVideo {
        t: d.t,
        h: ch,
        w: cw,
        values,
        valid,
    }
}

fn resize_video(v: &Video, nh: usize, nw: usize) -> Video {
    let mut out = Video::zeros(v.t, nh, nw);
    let mut plane = vec![0f32; v.h * v.w];
    for t in 0..v.t {
        for c in 0..3 {
            for y in 0..v.h {
                for x in 0..v.w {
                    plane[y * v.w + x] = v.get(t, y, x, c);
                }
            }
            let resized = resize_plane(&plane, v.h, v.w, nh, nw);
            for y in 0..nh {
                for x in 0..nw {
                    out.set(t, y, x, c, resized[y * nw + x]);
                }
            }
        }
    }
    out
}

fn resize_disp(d: &DisparityVideo, nh: usize, nw: usize) -> DisparityVideo {
    let sx = nw as f32 / d.w as f32;
    let hw = d.h * d.w;
    let mut values = Vec::with_capacity(d.t * nh * nw);
    let mut valid = Vec::with_capacity(d.t * nh * nw);
    for t in 0..d.t {
        let vplane = &d.values[t * hw..(t + 1) * hw];
        let iplane: Vec<f32> = d.valid[t * hw..(t + 1) * hw]
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        let rv = resize_plane(vplane, d.h, d.w, nh, nw);
        let ri = resize_plane(&iplane, d.h, d.w, nh, nw);
        for i in 0..nh * nw {
            // a resampled pixel is valid only when untouched by invalid taps
            let ok = ri[i] > 1.0 - 1e-6;
            valid.push(ok);
            values.push(if ok { rv[i] * sx } else { 0.0 });
        }
    }
    DisparityVideo {
        t: d.t,
        h: nh,
        w: nw,
        values,
        valid,
    }
}

/// Crop (and optionally rescale) a training sample. The same geometry is
/// applied to both views and the ground truth, with disparity values scaled
/// by the horizontal factor.
fn augment(seq: &StereoSequence, tcfg: &TrainConfig, rng: &mut ChaCha8Rng) -> StereoSequence {
    let mut left = seq.left.clone();
    let mut right = seq.right.clone();
    let mut gt = seq.gt.clone();
    if tcfg.rescale {
        let s: f64 = rng.gen_range(0.9..1.2);
        let nh = ((left.h as f64 * s).round() as usize).max(tcfg.crop_h);
        let nw = ((left.w as f64 * s).round() as usize).max(tcfg.crop_w);
        if (nh, nw) != (left.h, left.w) {
            left = resize_video(&left, nh, nw);
            right = resize_video(&right, nh, nw);
            gt = gt.map(|g| resize_disp(&g, nh, nw));
        }
    }
    let (h, w) = (left.h, left.w);
    let (ch, cw) = (tcfg.crop_h.min(h), tcfg.crop_w.min(w));
    if (ch, cw) != (h, w) {
        let y0 = rng.gen_range(0..=h - ch);
        let x0 = rng.gen_range(0..=w - cw);
        left = crop_video(&left, y0, x0, ch, cw);
        right = crop_video(&right, y0, x0, ch, cw);
        gt = gt.map(|g| crop_disp(&g, y0, x0, ch, cw));
    }
    StereoSequence {
        left,
        right,
        focal_px: seq.focal_px,
        baseline_m: seq.baseline_m,
        gt,
    }
}

fn heldout_seed(master: u64) -> u64 {
    master ^ 0x4845_4C44_4F55_5421 // distinct stream from training scenes
}

/// Mean EPE/TEPE of the model over `count` held-out scenes.
pub fn evaluate_model<T: Scalar>(
    model: &ModelState<T>,
    family: &SceneFamily,
    master_seed: u64,
    count: usize,
    t_eval: usize,
    n_eval: usize,
) -> Result<(f64, f64)> {
    let eval_model = model.detached();
    let cascade = CascadeConfig::from_model(&model.config, n_eval);
    let mut fam = family.clone();
    fam.frames = t_eval;
    let (mut epe_sum, mut tepe_sum) = (0.0, 0.0);
    for k in 0..count {
        let spec = fam.sample(heldout_seed(master_seed), k as u64);
        let seq = generate_scene(&spec)?;
        let out = forward(&seq, &eval_model, &cascade, false)?;
        let gt = seq.gt.as_ref().expect("generated scenes carry gt");
        epe_sum += metrics::epe(&out.disparity, gt)?;
        tepe_sum += metrics::tepe(&out.disparity, gt)?;
    }
    Ok((epe_sum / count as f64, tepe_sum / count as f64))
}

/// Train in place. Scenes are generated on the fly from `family`; all
/// randomness derives from `tcfg.seed`, so a rerun reproduces the loss curve
/// exactly. When `out_dir` is given, a loss-curve CSV, eval CSV, and
/// checkpoints are written there.
pub fn train<T: Scalar>(
    family: &SceneFamily,
    model: &mut ModelState<T>,
    tcfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut opt = AdamW::new(tcfg.weight_decay);
    let sched = OneCycle::new(tcfg.lr, tcfg.steps);
    let cascade = CascadeConfig::from_model(&model.config, tcfg.n_train);
    let mut fam = family.clone();
    fam.frames = tcfg.t_train;
    let mut report = TrainReport::default();

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    for step in 0..tcfg.steps {
        let lr = sched.lr(step);
        let mut step_loss = 0.0;
        let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for b in 0..tcfg.batch {
            let raw_index = (step * tcfg.batch + b) as u64;
            let index = if tcfg.dataset_size > 0 {
                raw_index % tcfg.dataset_size as u64
            } else {
                raw_index
            };
            let spec = fam.sample(tcfg.seed, index);
            let seq = generate_scene(&spec)?;
            let sample = augment(&seq, tcfg, &mut rng);
            let out = forward(&sample, model, &cascade, true)?;
            let gt = sample.gt.as_ref().expect("generated scenes carry gt");
            let loss = sequence_loss(&out.iterates, gt, tcfg.gamma)?
                .mul_scalar(T::from_f64(1.0 / tcfg.batch as f64));
            let lv = loss.item().to_f64();
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            step_loss += lv;
            loss.backward()?;
            for (name, p) in model.params.iter() {
                if let Some(g) = p.grad() {
                    let g64: Vec<f64> = g.iter().map(|v| v.to_f64()).collect();
                    match grads.entry(name.clone()) {
                        std::collections::btree_map::Entry::Occupied(mut e) => {
                            for (acc, v) in e.get_mut().iter_mut().zip(g64) {
                                *acc += v;
                            }
                        }
                        std::collections::btree_map::Entry::Vacant(e) => {
                            e.insert(g64);
                        }
                    }
                }
                p.clear_grad();
            }
        }
        AdamW::clip_grad_norm(&mut grads, tcfg.clip_norm);
        opt.step(&mut model.params, &grads, lr)?;
        report.loss_curve.push((step, step_loss, lr));

        let do_eval = tcfg.eval_every > 0
            && (step + 1) % tcfg.eval_every == 0
            && tcfg.eval_scenes > 0;
        if do_eval {
            let (epe, tepe) = evaluate_model(
                model,
                family,
                tcfg.seed,
                tcfg.eval_scenes,
                tcfg.t_eval,
                tcfg.n_eval,
            )?;
            report.eval_history.push((step, epe, tepe));
            let hit = tcfg.target_epe.map(|t| epe < t).unwrap_or(true)
                && tcfg.target_tepe.map(|t| tepe < t).unwrap_or(true)
                && (tcfg.target_epe.is_some() || tcfg.target_tepe.is_some());
            if hit {
                report.stopped_early_at = Some(step);
                break;
            }
        }
        if let Some(dir) = out_dir {
            if tcfg.checkpoint_every > 0 && (step + 1) % tcfg.checkpoint_every == 0 {
                super::save_checkpoint(model, &dir.join("checkpoint_latest.ckpt"))?;
            }
        }
    }

    if let Some(dir) = out_dir {
        super::save_checkpoint(model, &dir.join("model.ckpt"))?;
        let mut csv = String::from("step,loss,lr\n");
        for (s, l, lr) in &report.loss_curve {
            csv.push_str(&format!("{s},{l},{lr}\n"));
        }
        std::fs::write(dir.join("loss.csv"), csv)?;
        let mut csv = String::from("step,epe,tepe\n");
        for (s, e, t) in &report.eval_history {
            csv.push_str(&format!("{s},{e},{t}\n"));
        }
        std::fs::write(dir.join("eval.csv"), csv)?;
    }
    Ok(report)
}
