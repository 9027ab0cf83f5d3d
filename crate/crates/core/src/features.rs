//! Per-frame matching and context features.
//!
//! Two trainable residual towers (matching weights shared between the left
//! and right views; a separate context tower runs on the left view only)
//! produce taps at 1/4, 1/8, 1/16, and optionally 1/32 resolution. Frozen
//! per-frame prior maps, when configured, are bilinearly resized to the tap
//! resolution, passed through a shallow trainable adapter, and concatenated,
//! so C_f = C_cnn + C_prior.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;

use crate::data::{pfm, StereoSequence, Video};
use crate::error::{Error, Result};
use crate::model::{apply_conv, init_conv, ModelConfig, ParamMap};
use crate::tensor::{Scalar, Tensor};

/// Matching and context features at one cascade scale.
#[derive(Debug, Clone)]
pub struct FeatureMaps<T: Scalar> {
    pub f_left: Tensor<T>,
    pub f_right: Tensor<T>,
    pub f_ctx: Tensor<T>,
    pub scale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Left,
    Right,
}

impl View {
    fn name(self) -> &'static str {
        match self {
            View::Left => "left",
            View::Right => "right",
        }
    }
}

/// Source of frozen per-frame prior feature maps.
#[derive(Debug, Clone, Default)]
pub enum PriorProvider {
    #[default]
    None,
    /// Directory of stacked PFM planes, one file per (view, frame, channel):
    /// `{view}_{frame:06}_c{channel:02}.pfm`, with a `manifest.txt` declaring
    /// `channels=N`.
    File { dir: PathBuf, channels: usize },
}

impl PriorProvider {
    pub fn channels(&self) -> usize {
        match self {
            PriorProvider::None => 0,
            PriorProvider::File { channels, .. } => *channels,
        }
    }

    pub fn open(dir: &Path) -> Result<PriorProvider> {
        let manifest = dir.join("manifest.txt");
        let text =
            std::fs::read_to_string(&manifest).map_err(|_| Error::MissingFile(manifest.clone()))?;
        let mut channels = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some(("channels", v)) => {
                    channels = Some(v.trim().parse().map_err(|e| Error::Format {
                        what: "prior manifest",
                        reason: format!("bad channels: {e}"),
                    })?)
                }
                _ => {
                    return Err(Error::Format {
                        what: "prior manifest",
                        reason: format!("unknown line '{line}'"),
                    })
                }
            }
        }
        Ok(PriorProvider::File {
            dir: dir.to_path_buf(),
            channels: channels.ok_or(Error::Format {
                what: "prior manifest",
                reason: "missing channels=".into(),
            })?,
        })
    }
}

/// Align-corners bilinear resize of a single plane.
pub fn resize_plane(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let ytaps = crate::tensor::lerp_taps_f64(h, oh);
    let xtaps = crate::tensor::lerp_taps_f64(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, wy0, wy1) in &ytaps {
        for &(x0, x1, wx0, wx1) in &xtaps {
            let v = wy0 * (wx0 * src[y0 * w + x0] as f64 + wx1 * src[y0 * w + x1] as f64)
                + wy1 * (wx0 * src[y1 * w + x0] as f64 + wx1 * src[y1 * w + x1] as f64);
            out.push(v as f32);
        }
    }
    out
}

/// Load one frame of prior features resized to `(oh, ow)`. The result is a
/// constant tensor: prior values never join the differentiation graph.
pub fn load_prior_frame<T: Scalar>(
    provider: &PriorProvider,
    view: View,
    t: usize,
    oh: usize,
    ow: usize,
) -> Result<Tensor<T>> {
    let (dir, channels) = match provider {
        PriorProvider::None => {
            return Tensor::from_vec(vec![], &[1, 0, 1, oh, ow]);
        }
        PriorProvider::File { dir, channels } => (dir, *channels),
    };
    let mut data: Vec<T> = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let path = dir.join(format!("{}_{t:06}_c{c:02}.pfm", view.name()));
        let (plane, h, w) = pfm::read_pfm_file(&path)?;
        let resized = resize_plane(&plane, h, w, oh, ow);
        data.extend(resized.iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::from_vec(data, &[1, channels, 1, oh, ow])
}

fn load_prior_video<T: Scalar>(
    provider: &PriorProvider,
    view: View,
    t_n: usize,
    oh: usize,
    ow: usize,
) -> Result<Tensor<T>> {
    let frames: Result<Vec<Tensor<T>>> = (0..t_n)
        .map(|t| load_prior_frame(provider, view, t, oh, ow))
        .collect();
    Tensor::concat(&frames?, 2)
}

fn scale_level(scale: usize) -> Result<usize> {
    match scale {
        4 => Ok(1),
        8 => Ok(2),
        16 => Ok(3),
        32 => Ok(4),
        other => Err(Error::Config(format!("unsupported feature scale {other}"))),
    }
}

/// Register encoder parameters for both towers and the prior adapter.
pub fn init_params<T: Scalar>(params: &mut ParamMap<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) {
    let c = cfg.c_cnn;
    let max_level = cfg
        .stages
        .iter()
        .map(|&s| scale_level(s).expect("validated"))
        .max()
        .unwrap_or(3);
    for tower in ["feat.match", "feat.ctx"] {
        init_conv(params, rng, &format!("{tower}.stem"), &[c, 3, 1, 7, 7]);
        for l in 1..=max_level {
            init_conv(params, rng, &format!("{tower}.down{l}"), &[c, c, 1, 3, 3]);
            for blk in ["a", "b"] {
                init_conv(params, rng, &format!("{tower}.res{l}{blk}.c1"), &[c, c, 1, 3, 3]);
                init_conv(params, rng, &format!("{tower}.res{l}{blk}.c2"), &[c, c, 1, 3, 3]);
            }
            init_conv(params, rng, &format!("{tower}.tap{l}"), &[c, c, 1, 1, 1]);
        }
    }
    if cfg.c_prior > 0 {
        let p = cfg.c_prior;
        init_conv(params, rng, "feat.adapter.c1", &[p, p, 1, 3, 3]);
        init_conv(params, rng, "feat.adapter.c2", &[p, p, 1, 3, 3]);
    }
}

/// `[T][H][W][3]` video to a constant `[1,3,T,H,W]` tensor.
pub fn video_to_tensor<T: Scalar>(v: &Video) -> Tensor<T> {
    let (t_n, h, w) = (v.t, v.h, v.w);
    let mut data = vec![T::ZERO; 3 * t_n * h * w];
    for t in 0..t_n {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data[((c * t_n + t) * h + y) * w + x] = T::from_f64(v.get(t, y, x, c) as f64);
                }
            }
        }
    }
    Tensor::from_vec(data, &[1, 3, t_n, h, w]).expect("sized")
}

/// Per-channel mean/std normalization of frames in [0,1].
pub fn normalize_frames<T: Scalar>(x: &Tensor<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    let mean: Vec<T> = cfg.norm_mean.iter().map(|&v| T::from_f64(-v)).collect();
    let inv_std: Vec<T> = cfg
        .norm_std
        .iter()
        .map(|&v| T::from_f64(1.0 / v))
        .collect();
    let mean = Tensor::from_vec(mean, &[3, 1, 1, 1])?;
    let inv_std = Tensor::from_vec(inv_std, &[3, 1, 1, 1])?;
    x.add(&mean)?.mul(&inv_std)
}

fn res_block<T: Scalar>(params: &ParamMap<T>, name: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    let y = apply_conv(params, &format!("{name}.c1"), x, &[1, 1, 1], &[0, 1, 1])?.relu();
    let y = apply_conv(params, &format!("{name}.c2"), &y, &[1, 1, 1], &[0, 1, 1])?;
    Ok(x.add(&y)?.relu())
}

/// Run one tower, returning taps for the requested levels.
fn encode_tower<T: Scalar>(
    params: &ParamMap<T>,
    tower: &str,
    x: &Tensor<T>,
    levels: &[usize],
) -> Result<BTreeMap<usize, Tensor<T>>> {
    let max_level = *levels.iter().max().expect("nonempty");
    let mut h = apply_conv(params, &format!("{tower}.stem"), x, &[1, 2, 2], &[0, 3, 3])?.relu();
    let mut taps = BTreeMap::new();
    for l in 1..=max_level {
        h = apply_conv(params, &format!("{tower}.down{l}"), &h, &[1, 2, 2], &[0, 1, 1])?.relu();
        h = res_block(params, &format!("{tower}.res{l}a"), &h)?;
        h = res_block(params, &format!("{tower}.res{l}b"), &h)?;
        if levels.contains(&l) {
            taps.insert(l, apply_conv(params, &format!("{tower}.tap{l}"), &h, &[1, 1, 1], &[0, 0, 0])?);
        }
    }
    Ok(taps)
}

fn adapt_prior<T: Scalar>(params: &ParamMap<T>, prior: &Tensor<T>) -> Result<Tensor<T>> {
    let y = apply_conv(params, "feat.adapter.c1", prior, &[1, 1, 1], &[0, 1, 1])?.relu();
    apply_conv(params, "feat.adapter.c2", &y, &[1, 1, 1], &[0, 1, 1])
}

/// Extract features for every requested scale in one pass over normalized
/// image tensors. `left`/`right` are `[B,3,T,H,W]` with H, W divisible by
/// every scale.
pub fn extract_scales<T: Scalar>(
    params: &ParamMap<T>,
    cfg: &ModelConfig,
    prior: &PriorProvider,
    left: &Tensor<T>,
    right: &Tensor<T>,
    scales: &[usize],
) -> Result<Vec<FeatureMaps<T>>> {
    let (b, t_n, h, w) = (
        left.shape()[0],
        left.shape()[2],
        left.shape()[3],
        left.shape()[4],
    );
    if prior.channels() != cfg.c_prior {
        return Err(Error::Config(format!(
            "prior provides {} channels but config wants {}",
            prior.channels(),
            cfg.c_prior
        )));
    }
    let levels: Vec<usize> = scales.iter().map(|&s| scale_level(s)).collect::<Result<_>>()?;
    let lr = Tensor::concat(&[left.clone(), right.clone()], 0)?;
    let match_taps = encode_tower(params, "feat.match", &lr, &levels)?;
    let ctx_taps = encode_tower(params, "feat.ctx", left, &levels)?;

    let mut out = Vec::with_capacity(scales.len());
    for (&scale, &level) in scales.iter().zip(&levels) {
        let tap = &match_taps[&level];
        let mut f_left = tap.slice(0, 0, b)?;
        let mut f_right = tap.slice(0, b, b)?;
        let mut f_ctx = ctx_taps[&level].clone();
        if cfg.c_prior > 0 {
            let (oh, ow) = (h / scale, w / scale);
            let pl = load_prior_video::<T>(prior, View::Left, t_n, oh, ow)?;
            let pr = load_prior_video::<T>(prior, View::Right, t_n, oh, ow)?;
            let al = adapt_prior(params, &pl)?;
            let ar = adapt_prior(params, &pr)?;
            f_left = Tensor::concat(&[f_left, al.clone()], 1)?;
            f_right = Tensor::concat(&[f_right, ar], 1)?;
            f_ctx = Tensor::concat(&[f_ctx, al], 1)?;
        }
        out.push(FeatureMaps {
            f_left,
            f_right,
            f_ctx,
            scale,
        });
    }
    Ok(out)
}

/// Extract features for a whole sequence at one scale. Frame sizes must be
/// divisible by the scale; the pipeline pads its inputs before calling.
pub fn extract<T: Scalar>(
    seq: &StereoSequence,
    params: &ParamMap<T>,
    cfg: &ModelConfig,
    prior: &PriorProvider,
    scale: usize,
) -> Result<FeatureMaps<T>> {
    let (h, w) = (seq.left.h, seq.left.w);
    if h % scale != 0 || w % scale != 0 {
        return Err(Error::InvalidShape {
            op: "features::extract",
            shape: vec![h, w],
            reason: format!("frame size not divisible by scale {scale}"),
        });
    }
    let left = normalize_frames(&video_to_tensor::<T>(&seq.left), cfg)?;
    let right = normalize_frames(&video_to_tensor::<T>(&seq.right), cfg)?;
    let mut maps = extract_scales(params, cfg, prior, &left, &right, &[scale])?;
    Ok(maps.pop().expect("one scale"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneSpec};
    use rand::SeedableRng;

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            stages: vec![8, 4],
            ..ModelConfig::default()
        }
    }

    fn toy_seq() -> StereoSequence {
        generate_scene(&SceneSpec {
            frames: 2,
            height: 32,
            width: 32,
            layers: vec![],
            ..SceneSpec::default()
        })
        .unwrap()
    }

    fn init(cfg: &ModelConfig, seed: u64) -> ParamMap<f64> {
        let mut params = ParamMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_params(&mut params, &mut rng, cfg);
        params
    }

    #[test]
    fn toy_config_feature_channels_and_dims() {
        let cfg = toy_cfg();
        let params = init(&cfg, 1);
        let seq = toy_seq();
        let maps = extract(&seq, &params, &cfg, &PriorProvider::None, 4).unwrap();
        assert_eq!(maps.f_left.shape(), &[1, 16, 2, 8, 8]);
        assert_eq!(maps.f_right.shape(), &[1, 16, 2, 8, 8]);
        assert_eq!(maps.f_ctx.shape(), &[1, 16, 2, 8, 8]);
        let maps8 = extract(&seq, &params, &cfg, &PriorProvider::None, 8).unwrap();
        assert_eq!(maps8.f_left.shape(), &[1, 16, 2, 4, 4]);
    }

    #[test]
    fn paper_scale_concatenates_to_128_channels() {
        let dir = tempfile::tempdir().unwrap();
        write_prior_dir(dir.path(), 32, 2, 8, 8);
        let cfg = ModelConfig {
            c_cnn: 96,
            c_prior: 32,
            stages: vec![4],
            ..ModelConfig::default()
        };
        let params = init(&cfg, 2);
        let seq = generate_scene(&SceneSpec {
            frames: 2,
            height: 16,
            width: 16,
            layers: vec![],
            ..SceneSpec::default()
        })
        .unwrap();
        let prior = PriorProvider::open(dir.path()).unwrap();
        let maps = extract(&seq, &params, &cfg, &prior, 4).unwrap();
        assert_eq!(maps.f_left.shape()[1], 128);
        assert_eq!(maps.f_ctx.shape()[1], 128);
    }

    #[test]
    fn identical_views_share_features_bitwise() {
        let cfg = toy_cfg();
        let params = init(&cfg, 3);
        let mut seq = toy_seq();
        seq.right = seq.left.clone();
        let maps = extract(&seq, &params, &cfg, &PriorProvider::None, 4).unwrap();
        assert_eq!(maps.f_left.to_f64_vec(), maps.f_right.to_f64_vec());
    }

    #[test]
    fn swapping_views_swaps_outputs() {
        let cfg = toy_cfg();
        let params = init(&cfg, 4);
        let seq = toy_seq();
        let fwd = extract(&seq, &params, &cfg, &PriorProvider::None, 4).unwrap();
        let mut swapped = seq.clone();
        std::mem::swap(&mut swapped.left, &mut swapped.right);
        let rev = extract(&swapped, &params, &cfg, &PriorProvider::None, 4).unwrap();
        assert_eq!(fwd.f_left.to_f64_vec(), rev.f_right.to_f64_vec());
        assert_eq!(fwd.f_right.to_f64_vec(), rev.f_left.to_f64_vec());
    }

    #[test]
    fn indivisible_frame_size_is_rejected() {
        let cfg = toy_cfg();
        let params = init(&cfg, 5);
        let seq = generate_scene(&SceneSpec {
            frames: 1,
            height: 30,
            width: 32,
            layers: vec![],
            ..SceneSpec::default()
        })
        .unwrap();
        assert!(extract(&seq, &params, &cfg, &PriorProvider::None, 4).is_err());
    }

    fn write_prior_dir(dir: &Path, channels: usize, frames: usize, h: usize, w: usize) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        std::fs::write(dir.join("manifest.txt"), format!("channels={channels}\n")).unwrap();
        for view in ["left", "right"] {
            for t in 0..frames {
                for c in 0..channels {
                    let plane: Vec<f32> = (0..h * w).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                    pfm::write_pfm_file(
                        &dir.join(format!("{view}_{t:06}_c{c:02}.pfm")),
                        &plane,
                        h,
                        w,
                    )
                    .unwrap();
                }
            }
        }
    }

    #[test]
    fn constant_prior_resizes_to_constant() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("manifest.txt"), "channels=1\n").unwrap();
        let plane = vec![0.75f32; 10 * 12];
        pfm::write_pfm_file(&dir.path().join("left_000000_c00.pfm"), &plane, 10, 12).unwrap();
        let prior = PriorProvider::open(dir.path()).unwrap();
        let t: Tensor<f64> = load_prior_frame(&prior, View::Left, 0, 4, 6).unwrap();
        assert_eq!(t.shape(), &[1, 1, 1, 4, 6]);
        assert!(t.data().iter().all(|&v| (v - 0.75).abs() < 1e-6));
    }

    #[test]
    fn missing_prior_file_and_channel_mismatch_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("manifest.txt"), "channels=2\n").unwrap();
        let prior = PriorProvider::open(dir.path()).unwrap();
        assert!(matches!(
            load_prior_frame::<f64>(&prior, View::Left, 0, 4, 4),
            Err(Error::MissingFile(_))
        ));
        // config wants a different channel count than the provider
        let cfg = ModelConfig {
            c_prior: 8,
            stages: vec![4],
            ..ModelConfig::default()
        };
        let params = init(&cfg, 6);
        let seq = toy_seq();
        assert!(extract(&seq, &params, &cfg, &prior, 4).is_err());
    }

    #[test]
    fn prior_values_stay_out_of_the_gradient_graph() {
        let dir = tempfile::tempdir().unwrap();
        write_prior_dir(dir.path(), 2, 2, 8, 8);
        let cfg = ModelConfig {
            c_prior: 2,
            stages: vec![4],
            ..ModelConfig::default()
        };
        let params = init(&cfg, 7);
        let prior_frame: Tensor<f64> = load_prior_frame(
            &PriorProvider::open(dir.path()).unwrap(),
            View::Left,
            0,
            8,
            8,
        )
        .unwrap();
        assert!(!prior_frame.requires_grad());
        // push it through the adapter and a loss; adapter weights get grads,
        // the prior leaf does not
        let adapted = adapt_prior(&params, &prior_frame).unwrap();
        adapted.sum_all().backward().unwrap();
        assert!(prior_frame.grad().is_none());
        assert!(params.get("feat.adapter.c1.w").unwrap().grad().is_some());
    }
}
