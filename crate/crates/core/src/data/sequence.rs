//! Stereo sequence containers and on-disk dataset layout.
//!
//! A dataset directory holds `left/` and `right/` with numbered PNG or PPM
//! frames, an optional `disp/` with per-frame PFM ground truth aligned to the
//! left view (+inf marks invalid pixels), and a `calib.txt` with
//! `focal_px=`/`baseline_m=` lines.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::GenericImageView;

use super::pfm;
use crate::error::{Error, Result};

/// RGB frame stack, values in [0,1], layout `[T][H][W][3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Video {
    pub fn zeros(t: usize, h: usize, w: usize) -> Video {
        Video {
            t,
            h,
            w,
            data: vec![0.0; t * h * w * 3],
        }
    }

    #[inline]
    pub fn get(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[((t * self.h + y) * self.w + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, t: usize, y: usize, x: usize, c: usize, v: f32) {
        self.data[((t * self.h + y) * self.w + x) * 3 + c] = v;
    }
}

/// Left-view aligned disparity video with validity flags.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityVideo {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DisparityVideo {
    pub fn constant(t: usize, h: usize, w: usize, v: f32) -> DisparityVideo {
        DisparityVideo {
            t,
            h,
            w,
            values: vec![v; t * h * w],
            valid: vec![true; t * h * w],
        }
    }

    #[inline]
    pub fn idx(&self, t: usize, y: usize, x: usize) -> usize {
        (t * self.h + y) * self.w + x
    }

    /// Frame `t` as a PFM payload with +inf at invalid pixels.
    pub fn frame_pfm(&self, t: usize) -> Vec<f32> {
        let hw = self.h * self.w;
        (0..hw)
            .map(|i| {
                if self.valid[t * hw + i] {
                    self.values[t * hw + i]
                } else {
                    f32::INFINITY
                }
            })
            .collect()
    }

    /// Rebuild a frame from PFM values: finite, non-negative pixels are valid.
    pub fn from_pfm_frames(frames: &[(Vec<f32>, usize, usize)]) -> Result<DisparityVideo> {
        if frames.is_empty() {
            return Err(Error::Format {
                what: "disparity frames",
                reason: "empty".into(),
            });
        }
        let (h, w) = (frames[0].1, frames[0].2);
        let t = frames.len();
        let mut values = Vec::with_capacity(t * h * w);
        let mut valid = Vec::with_capacity(t * h * w);
        for (vals, fh, fw) in frames {
            if (*fh, *fw) != (h, w) {
                return Err(Error::Format {
                    what: "disparity frames",
                    reason: format!("frame size {fh}x{fw} != {h}x{w}"),
                });
            }
            for &v in vals {
                let ok = v.is_finite() && v >= 0.0;
                valid.push(ok);
                values.push(if ok { v } else { 0.0 });
            }
        }
        Ok(DisparityVideo {
            t,
            h,
            w,
            values,
            valid,
        })
    }
}

/// Rectified stereo sequence plus calibration and optional ground truth.
#[derive(Debug, Clone)]
pub struct StereoSequence {
    pub left: Video,
    pub right: Video,
    pub focal_px: f64,
    pub baseline_m: f64,
    pub gt: Option<DisparityVideo>,
}

fn numbered_files(dir: &Path, extensions: &[&str]) -> Result<Vec<(u64, PathBuf)>> {
    let mut found: BTreeMap<u64, PathBuf> = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| extensions.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if !ext_ok {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let digits: String = stem.chars().filter(|c| c.is_ascii_digit()).collect();
        if digits.is_empty() {
            continue;
        }
        let idx: u64 = digits.parse().map_err(|_| Error::Format {
            what: "frame index",
            reason: format!("cannot parse index from '{stem}'"),
        })?;
        found.insert(idx, path);
    }
    Ok(found.into_iter().collect())
}

fn load_frame(path: &Path, video: &mut Video, t: usize) -> Result<()> {
    let img = image::open(path)?;
    let (w, h) = img.dimensions();
    if (h as usize, w as usize) != (video.h, video.w) {
        return Err(Error::Format {
            what: "frame",
            reason: format!("{}: size {}x{} differs from first frame", path.display(), h, w),
        });
    }
    let rgb = img.to_rgb8();
    for y in 0..video.h {
        for x in 0..video.w {
            let p = rgb.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                video.set(t, y, x, c, p.0[c] as f32 / 255.0);
            }
        }
    }
    Ok(())
}

pub fn read_calib(path: &Path) -> Result<(f64, f64)> {
    let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let (mut focal, mut baseline) = (None, None);
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            match k.trim() {
                "focal_px" => focal = Some(v.trim().parse().map_err(|e| Error::Format {
                    what: "calib",
                    reason: format!("bad focal_px: {e}"),
                })?),
                "baseline_m" => baseline = Some(v.trim().parse().map_err(|e| Error::Format {
                    what: "calib",
                    reason: format!("bad baseline_m: {e}"),
                })?),
                other => {
                    return Err(Error::Format {
                        what: "calib",
                        reason: format!("unknown key '{other}'"),
                    })
                }
            }
        }
    }
    match (focal, baseline) {
        (Some(f), Some(b)) => Ok((f, b)),
        _ => Err(Error::Format {
            what: "calib",
            reason: "needs focal_px= and baseline_m=".into(),
        }),
    }
}

/// Load a sequence directory. Frames are paired by numeric index; ground
/// truth is attached when a `disp/` directory is present.
pub fn load_sequence(dir: &Path) -> Result<StereoSequence> {
    let lefts = numbered_files(&dir.join("left"), &["png", "ppm", "pnm"])?;
    let rights = numbered_files(&dir.join("right"), &["png", "ppm", "pnm"])?;
    if lefts.len() != rights.len() {
        return Err(Error::FrameCountMismatch {
            left: lefts.len(),
            right: rights.len(),
        });
    }
    if lefts.is_empty() {
        return Err(Error::Format {
            what: "sequence",
            reason: format!("no frames found under {}", dir.display()),
        });
    }
    let first = image::open(&lefts[0].1)?;
    let (w, h) = first.dimensions();
    let (h, w) = (h as usize, w as usize);
    let t_n = lefts.len();
    let mut left = Video::zeros(t_n, h, w);
    let mut right = Video::zeros(t_n, h, w);
    for (t, ((_, lp), (_, rp))) in lefts.iter().zip(rights.iter()).enumerate() {
        load_frame(lp, &mut left, t)?;
        load_frame(rp, &mut right, t)?;
    }

    let disp_dir = dir.join("disp");
    let gt = if disp_dir.is_dir() {
        let files = numbered_files(&disp_dir, &["pfm"])?;
        if files.len() != t_n {
            return Err(Error::Format {
                what: "sequence",
                reason: format!("{} disparity frames for {} image frames", files.len(), t_n),
            });
        }
        let frames: Result<Vec<_>> = files.iter().map(|(_, p)| pfm::read_pfm_file(p)).collect();
        Some(DisparityVideo::from_pfm_frames(&frames?)?)
    } else {
        None
    };

    let (focal_px, baseline_m) = read_calib(&dir.join("calib.txt"))?;
    Ok(StereoSequence {
        left,
        right,
        focal_px,
        baseline_m,
        gt,
    })
}

/// Write a sequence as PNG frames + PFM ground truth + calibration.
pub fn save_sequence(seq: &StereoSequence, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("left"))?;
    std::fs::create_dir_all(dir.join("right"))?;
    let to_png = |video: &Video, t: usize, path: &Path| -> Result<()> {
        let mut img = image::RgbImage::new(video.w as u32, video.h as u32);
        for y in 0..video.h {
            for x in 0..video.w {
                let px = [
                    (video.get(t, y, x, 0).clamp(0.0, 1.0) * 255.0).round() as u8,
                    (video.get(t, y, x, 1).clamp(0.0, 1.0) * 255.0).round() as u8,
                    (video.get(t, y, x, 2).clamp(0.0, 1.0) * 255.0).round() as u8,
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(path)?;
        Ok(())
    };
    for t in 0..seq.left.t {
        to_png(&seq.left, t, &dir.join(format!("left/{t:06}.png")))?;
        to_png(&seq.right, t, &dir.join(format!("right/{t:06}.png")))?;
    }
    if let Some(gt) = &seq.gt {
        std::fs::create_dir_all(dir.join("disp"))?;
        for t in 0..gt.t {
            pfm::write_pfm_file(
                &dir.join(format!("disp/{t:06}.pfm")),
                &gt.frame_pfm(t),
                gt.h,
                gt.w,
            )?;
        }
    }
    std::fs::write(
        dir.join("calib.txt"),
        format!("focal_px={}\nbaseline_m={}\n", seq.focal_px, seq.baseline_m),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{generate_scene, SceneSpec};

    #[test]
    fn roundtrip_within_quantization() {
        let spec = SceneSpec {
            frames: 3,
            height: 16,
            width: 20,
            ..SceneSpec::default()
        };
        let seq = generate_scene(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_sequence(&seq, dir.path()).unwrap();
        let loaded = load_sequence(dir.path()).unwrap();
        assert_eq!(loaded.left.t, 3);
        assert_eq!(loaded.focal_px, seq.focal_px);
        let max_err = seq
            .left
            .data
            .iter()
            .zip(&loaded.left.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        assert!(max_err <= 1.0 / 255.0 + 1e-6, "max quantization error {max_err}");
        // disparity PFM roundtrip is exact on the valid mask and valid values
        let gt = seq.gt.unwrap();
        let lgt = loaded.gt.unwrap();
        assert_eq!(gt.valid, lgt.valid);
        for i in 0..gt.values.len() {
            if gt.valid[i] {
                assert_eq!(gt.values[i], lgt.values[i], "pixel {i}");
            }
        }
    }

    #[test]
    fn frame_count_mismatch_is_an_error() {
        let spec = SceneSpec {
            frames: 3,
            height: 8,
            width: 8,
            ..SceneSpec::default()
        };
        let seq = generate_scene(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_sequence(&seq, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("right/000002.png")).unwrap();
        match load_sequence(dir.path()) {
            Err(Error::FrameCountMismatch { left: 3, right: 2 }) => {}
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn missing_gt_dir_loads_without_gt() {
        let spec = SceneSpec {
            frames: 2,
            height: 8,
            width: 8,
            ..SceneSpec::default()
        };
        let seq = generate_scene(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_sequence(&seq, dir.path()).unwrap();
        std::fs::remove_dir_all(dir.path().join("disp")).unwrap();
        let loaded = load_sequence(dir.path()).unwrap();
        assert!(loaded.gt.is_none());
    }
}
