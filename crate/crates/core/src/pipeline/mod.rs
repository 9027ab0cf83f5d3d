//! Cascaded multi-resolution inference, training, and checkpointing.

mod checkpoint;
mod loss;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use loss::sequence_loss;
pub use optim::{AdamW, OneCycle};
pub use train::{evaluate_model, train, TrainConfig, TrainReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{self, GruState};
use crate::correlation::build_cost_volume;
use crate::data::{DisparityVideo, StereoSequence, Video};
use crate::error::{Error, Result};
use crate::features::{self, PriorProvider};
use crate::model::{ModelConfig, ParamMap};
use crate::tensor::{Scalar, Tensor};

/// All trainable parameters plus the architecture configuration.
#[derive(Debug, Clone)]
pub struct ModelState<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamMap<T>,
}

impl<T: Scalar> ModelState<T> {
    /// Fresh model with deterministic initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<ModelState<T>> {
        config.validate()?;
        let mut params = ParamMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        features::init_params(&mut params, &mut rng, &config);
        aggregation::init_params(&mut params, &mut rng, &config);
        Ok(ModelState { config, params })
    }

    /// Resolve the prior provider named by the configuration.
    pub fn prior(&self) -> Result<PriorProvider> {
        if self.config.c_prior == 0 {
            return Ok(PriorProvider::None);
        }
        match &self.config.prior_dir {
            Some(dir) => PriorProvider::open(dir),
            None => Err(Error::Config(
                "config wants prior features but no prior_dir is set".into(),
            )),
        }
    }

    /// Inference view: constant parameters, so forward builds no graph.
    pub fn detached(&self) -> ModelState<T> {
        ModelState {
            config: self.config.clone(),
            params: self.params.detached(),
        }
    }
}

/// Cascade schedule: scales coarse to fine, iterations per stage, and the
/// final upsampling rate from the finest stage to full resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CascadeConfig {
    pub stages: Vec<usize>,
    pub iters_per_stage: Vec<usize>,
    pub final_alpha: usize,
}

impl CascadeConfig {
    /// Derive the schedule from a model config and a total iteration count.
    pub fn from_model(cfg: &ModelConfig, total_iters: usize) -> CascadeConfig {
        let mut c = cfg.clone();
        c.iters = total_iters;
        CascadeConfig {
            stages: cfg.stages.clone(),
            iters_per_stage: c.iters_per_stage(),
            final_alpha: *cfg.stages.last().expect("validated config"),
        }
    }

    pub fn total_iters(&self) -> usize {
        self.iters_per_stage.iter().sum()
    }
}

/// Replicate-pad a video on the bottom/right so H and W divide `multiple`.
fn pad_video(v: &Video, multiple: usize) -> Video {
    let ph = v.h.div_ceil(multiple) * multiple;
    let pw = v.w.div_ceil(multiple) * multiple;
    if (ph, pw) == (v.h, v.w) {
        return v.clone();
    }
    let mut out = Video::zeros(v.t, ph, pw);
    for t in 0..v.t {
        for y in 0..ph {
            let sy = y.min(v.h - 1);
            for x in 0..pw {
                let sx = x.min(v.w - 1);
                for c in 0..3 {
                    out.set(t, y, x, c, v.get(t, sy, sx, c));
                }
            }
        }
    }
    out
}

/// Forward pass output: the final disparity video plus, when requested,
/// every iteration's full-resolution prediction (graph-carrying, for the
/// loss).
pub struct ForwardOutput<T: Scalar> {
    pub disparity: DisparityVideo,
    pub iterates: Vec<Tensor<T>>,
}

/// Run the cascade: extract features per stage, refine with the scheduled
/// correlation windows, promote disparity between stages with a 2x upsample,
/// and produce full-resolution disparities.
pub fn forward<T: Scalar>(
    seq: &StereoSequence,
    model: &ModelState<T>,
    cascade: &CascadeConfig,
    record_iterates: bool,
) -> Result<ForwardOutput<T>> {
    let cfg = &model.config;
    let params = &model.params;
    let prior = model.prior()?;
    let (orig_h, orig_w, t_n) = (seq.left.h, seq.left.w, seq.left.t);
    let coarsest = cascade.stages[0];

    let left = pad_video(&seq.left, coarsest);
    let right = pad_video(&seq.right, coarsest);
    let left_t = features::normalize_frames(&features::video_to_tensor::<T>(&left), cfg)?;
    let right_t = features::normalize_frames(&features::video_to_tensor::<T>(&right), cfg)?;

    let feats = features::extract_scales(params, cfg, &prior, &left_t, &right_t, &cascade.stages)?;

    let mut iterates: Vec<Tensor<T>> = Vec::new();
    let mut prev: Option<(GruState<T>, usize)> = None; // state + its scale
    let mut final_full: Option<Tensor<T>> = None;

    for (stage_idx, fm) in feats.iter().enumerate() {
        let scale = fm.scale;
        let stage_err = |e: Error| -> Error {
            match e {
                Error::NonFinite(what) => Error::NonFinite(format!("stage 1/{scale}: {what}")),
                other => other,
            }
        };
        let h = aggregation::init_hidden(params, &fm.f_ctx)?;
        let d = match prev.take() {
            None => {
                let s = fm.f_left.shape();
                Tensor::zeros(&[s[0], 1, s[2], s[3], s[4]])
            }
            Some((pstate, pscale)) => aggregation::upsample_disparity(
                params,
                cfg,
                &format!("ups.prom{pscale}"),
                &pstate.h,
                &pstate.d,
                2,
            )?,
        };
        let mut state = GruState {
            h,
            d,
            iter_index: 1,
        };
        let n_iters = cascade.iters_per_stage[stage_idx];
        for _ in 0..n_iters {
            let cv = build_cost_volume(
                cfg.correlation,
                &fm.f_left,
                &fm.f_right,
                &state.d,
                state.iter_index,
            )?;
            let e_n = aggregation::encode_cost(params, &cv)?;
            state = aggregation::gru_step(params, cfg, &state, &e_n, &fm.f_ctx).map_err(stage_err)?;
            let is_last_overall =
                stage_idx + 1 == feats.len() && state.iter_index == n_iters + 1;
            if record_iterates || is_last_overall {
                let full = aggregation::upsample_disparity(
                    params,
                    cfg,
                    &format!("ups.s{scale}"),
                    &state.h,
                    &state.d,
                    scale,
                )?;
                let cropped = crop_full(&full, t_n, orig_h, orig_w)?;
                if is_last_overall {
                    final_full = Some(cropped.clone());
                }
                if record_iterates {
                    iterates.push(cropped);
                }
            }
        }
        prev = Some((state, scale));
    }

    let full = final_full.expect("cascade ran at least one iteration");
    let values: Vec<f32> = full.data().iter().map(|v| v.to_f64() as f32).collect();
    Ok(ForwardOutput {
        disparity: DisparityVideo {
            t: t_n,
            h: orig_h,
            w: orig_w,
            values,
            valid: vec![true; t_n * orig_h * orig_w],
        },
        iterates,
    })
}

fn crop_full<T: Scalar>(full: &Tensor<T>, t: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = full.shape();
    debug_assert_eq!(s[2], t);
    let mut out = full.clone();
    if s[3] != h {
        out = out.slice(3, 0, h)?;
    }
    if out.shape()[4] != w {
        out = out.slice(4, 0, w)?;
    }
    Ok(out)
}
