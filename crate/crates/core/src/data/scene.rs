//! Synthetic stereo video generation with exact ground-truth disparity.
//!
//! Scenes are layered: a fronto-parallel background plane plus rectangular
//! fronto-parallel layers, each with a linear depth trajectory and constant
//! lateral velocity. Textures are band-limited noise so local correlation is
//! discriminative. Left and right views are rendered independently from the
//! same layered model with a per-pixel depth buffer, so disparity
//! `d = focal_px * baseline_m / Z` is exact and pixels occluded in the right
//! view are marked invalid.
//!
//! By default layers move by whole pixels per frame and disparities are
//! rounded to integers, which makes forward-warp color consistency exact.
//! `sub_pixel = true` switches to bilinear sub-pixel rendering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sequence::{DisparityVideo, StereoSequence, Video};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    /// Top-left position and size at t = 0, in left-view pixels.
    pub rect: (f64, f64, usize, usize),
    /// Depth in meters, interpolated linearly from start to end over T.
    pub depth_start: f64,
    pub depth_end: f64,
    /// Lateral velocity in px/frame (x, y).
    pub vel: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub focal_px: f64,
    pub baseline_m: f64,
    pub background_depth: f64,
    /// Box-blur passes applied to the noise textures.
    pub texture_smooth: usize,
    /// Bilinear sub-pixel rendering instead of integer snapping.
    pub sub_pixel: bool,
    /// Near-to-far ordered layers.
    pub layers: Vec<LayerSpec>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            frames: 5,
            height: 64,
            width: 128,
            focal_px: 80.0,
            baseline_m: 0.2,
            background_depth: 16.0,
            texture_smooth: 2,
            sub_pixel: false,
            layers: vec![
                LayerSpec {
                    rect: (24.0, 12.0, 36, 24),
                    depth_start: 1.6,
                    depth_end: 1.6,
                    vel: (1.0, 0.0),
                },
                LayerSpec {
                    rect: (70.0, 30.0, 40, 22),
                    depth_start: 4.0,
                    depth_end: 3.2,
                    vel: (-1.0, 0.0),
                },
            ],
        }
    }
}

impl SceneSpec {
    fn depth_at(&self, layer: &LayerSpec, t: usize) -> f64 {
        if self.frames <= 1 {
            return layer.depth_start;
        }
        let a = t as f64 / (self.frames - 1) as f64;
        layer.depth_start + (layer.depth_end - layer.depth_start) * a
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Scene("frames/height/width must be positive".into()));
        }
        if self.focal_px <= 0.0 || self.baseline_m <= 0.0 {
            return Err(Error::Scene("focal_px and baseline_m must be positive".into()));
        }
        if self.background_depth <= 0.0 {
            return Err(Error::Scene("background depth must be positive".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            for t in 0..self.frames {
                let z = self.depth_at(l, t);
                if z <= 0.0 {
                    return Err(Error::Scene(format!("layer {i} has depth {z} <= 0 at frame {t}")));
                }
                if z >= self.background_depth {
                    return Err(Error::Scene(format!(
                        "layer {i} is behind the background at frame {t} (ordering violation)"
                    )));
                }
            }
            if i > 0 && self.layers[i - 1].depth_start > l.depth_start {
                return Err(Error::Scene(format!(
                    "layers must be ordered near-to-far (layer {i} violates)"
                )));
            }
        }
        Ok(())
    }

    /// Parse the line-oriented key=value scene file format. Unknown keys are
    /// rejected. `#` starts a comment.
    pub fn parse(text: &str) -> Result<SceneSpec> {
        let mut spec = SceneSpec {
            layers: Vec::new(),
            ..SceneSpec::default()
        };
        let mut layer_fields: std::collections::BTreeMap<usize, LayerSpec> = Default::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Scene(format!("line {}: expected key=value", ln + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let parse_f64 = |v: &str| -> Result<f64> {
                v.parse()
                    .map_err(|e| Error::Scene(format!("line {}: bad number '{v}': {e}", ln + 1)))
            };
            let parse_usize = |v: &str| -> Result<usize> {
                v.parse()
                    .map_err(|e| Error::Scene(format!("line {}: bad integer '{v}': {e}", ln + 1)))
            };
            if let Some(rest) = key.strip_prefix("layer.") {
                let (idx, field) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::Scene(format!("line {}: expected layer.N.field", ln + 1)))?;
                let idx: usize = idx
                    .parse()
                    .map_err(|_| Error::Scene(format!("line {}: bad layer index", ln + 1)))?;
                let layer = layer_fields.entry(idx).or_insert(LayerSpec {
                    rect: (0.0, 0.0, 8, 8),
                    depth_start: 1.0,
                    depth_end: 1.0,
                    vel: (0.0, 0.0),
                });
                match field {
                    "rect" => {
                        let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                        if parts.len() != 4 {
                            return Err(Error::Scene(format!("line {}: rect wants x,y,w,h", ln + 1)));
                        }
                        layer.rect = (
                            parse_f64(parts[0])?,
                            parse_f64(parts[1])?,
                            parse_usize(parts[2])?,
                            parse_usize(parts[3])?,
                        );
                    }
                    "depth" => {
                        if let Some((a, b)) = value.split_once(':') {
                            layer.depth_start = parse_f64(a.trim())?;
                            layer.depth_end = parse_f64(b.trim())?;
                        } else {
                            layer.depth_start = parse_f64(value)?;
                            layer.depth_end = layer.depth_start;
                        }
                    }
                    "vel" => {
                        let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                        if parts.len() != 2 {
                            return Err(Error::Scene(format!("line {}: vel wants vx,vy", ln + 1)));
                        }
                        layer.vel = (parse_f64(parts[0])?, parse_f64(parts[1])?);
                    }
                    other => {
                        return Err(Error::Scene(format!("line {}: unknown layer field '{other}'", ln + 1)))
                    }
                }
                continue;
            }
            match key {
                "seed" => spec.seed = parse_usize(value)? as u64,
                "frames" => spec.frames = parse_usize(value)?,
                "height" => spec.height = parse_usize(value)?,
                "width" => spec.width = parse_usize(value)?,
                "focal_px" => spec.focal_px = parse_f64(value)?,
                "baseline_m" => spec.baseline_m = parse_f64(value)?,
                "background_depth" => spec.background_depth = parse_f64(value)?,
                "texture_smooth" => spec.texture_smooth = parse_usize(value)?,
                "sub_pixel" => {
                    spec.sub_pixel = match value {
                        "true" | "1" => true,
                        "false" | "0" => false,
                        _ => return Err(Error::Scene(format!("line {}: sub_pixel wants true/false", ln + 1))),
                    }
                }
                other => return Err(Error::Scene(format!("line {}: unknown key '{other}'", ln + 1))),
            }
        }
        let mut layers: Vec<LayerSpec> = layer_fields.into_values().collect();
        if layers.is_empty() {
            layers = SceneSpec::default().layers;
        }
        spec.layers = layers;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("seed={}\n", self.seed));
        s.push_str(&format!("frames={}\n", self.frames));
        s.push_str(&format!("height={}\n", self.height));
        s.push_str(&format!("width={}\n", self.width));
        s.push_str(&format!("focal_px={}\n", self.focal_px));
        s.push_str(&format!("baseline_m={}\n", self.baseline_m));
        s.push_str(&format!("background_depth={}\n", self.background_depth));
        s.push_str(&format!("texture_smooth={}\n", self.texture_smooth));
        s.push_str(&format!("sub_pixel={}\n", self.sub_pixel));
        for (i, l) in self.layers.iter().enumerate() {
            s.push_str(&format!(
                "layer.{i}.rect={},{},{},{}\n",
                l.rect.0, l.rect.1, l.rect.2, l.rect.3
            ));
            s.push_str(&format!("layer.{i}.depth={}:{}\n", l.depth_start, l.depth_end));
            s.push_str(&format!("layer.{i}.vel={},{}\n", l.vel.0, l.vel.1));
        }
        s
    }
}

/// A smoothed-noise RGB texture sampled with clamping, bilinearly when
/// needed.
struct Texture {
    h: usize,
    w: usize,
    data: Vec<f32>, // h*w*3
}

impl Texture {
    fn noise(rng: &mut ChaCha8Rng, h: usize, w: usize, smooth_passes: usize) -> Texture {
        let mut data: Vec<f32> = (0..h * w * 3).map(|_| rng.gen_range(0.0f32..1.0)).collect();
        for _ in 0..smooth_passes {
            let mut next = vec![0f32; data.len()];
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        let mut acc = 0f32;
                        for dy in -1isize..=1 {
                            for dx in -1isize..=1 {
                                let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                                let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                                acc += data[(sy * w + sx) * 3 + c];
                            }
                        }
                        next[(y * w + x) * 3 + c] = acc / 9.0;
                    }
                }
            }
            data = next;
        }
        // stretch back to a fixed contrast band; smoothing compresses range
        let (mut lo, mut hi) = (f32::MAX, f32::MIN);
        for &v in &data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = (hi - lo).max(1e-6);
        for v in &mut data {
            *v = 0.1 + 0.8 * (*v - lo) / span;
        }
        Texture { h, w, data }
    }

    fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        let y = y.min(self.h - 1);
        let x = x.min(self.w - 1);
        self.data[(y * self.w + x) * 3 + c]
    }

    fn sample(&self, y: f64, x: f64, c: usize) -> f32 {
        let yc = y.clamp(0.0, (self.h - 1) as f64);
        let xc = x.clamp(0.0, (self.w - 1) as f64);
        let y0 = yc.floor() as usize;
        let x0 = xc.floor() as usize;
        let fy = (yc - y0 as f64) as f32;
        let fx = (xc - x0 as f64) as f32;
        let y1 = (y0 + 1).min(self.h - 1);
        let x1 = (x0 + 1).min(self.w - 1);
        (1.0 - fy) * ((1.0 - fx) * self.at(y0, x0, c) + fx * self.at(y0, x1, c))
            + fy * ((1.0 - fx) * self.at(y1, x0, c) + fx * self.at(y1, x1, c))
    }
}

/// Per-frame placement of one surface after integer snapping (when enabled).
struct Placed {
    /// left-view x of the surface origin
    px: f64,
    py: f64,
    disp: f64,
    depth: f64,
    w: f64,
    h: f64,
}

pub fn generate_scene(spec: &SceneSpec) -> Result<StereoSequence> {
    spec.validate()?;
    let (t_n, h, w) = (spec.frames, spec.height, spec.width);
    let fb = spec.focal_px * spec.baseline_m;
    let snap = |v: f64| if spec.sub_pixel { v } else { v.round() };

    let bg_disp = snap(fb / spec.background_depth);
    if bg_disp < 0.0 {
        return Err(Error::Scene("negative background disparity".into()));
    }
    let max_disp = spec
        .layers
        .iter()
        .flat_map(|l| (0..t_n).map(move |t| (l, t)))
        .map(|(l, t)| fb / spec.depth_at(l, t))
        .fold(bg_disp, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bg_tex = Texture::noise(
        &mut rng,
        h,
        w + max_disp.ceil() as usize + 2,
        spec.texture_smooth,
    );
    let layer_tex: Vec<Texture> = spec
        .layers
        .iter()
        .map(|l| Texture::noise(&mut rng, l.rect.3, l.rect.2, spec.texture_smooth))
        .collect();

    let mut left = Video::zeros(t_n, h, w);
    let mut right = Video::zeros(t_n, h, w);
    let mut gt_values = vec![0f32; t_n * h * w];
    let mut gt_valid = vec![false; t_n * h * w];

    for t in 0..t_n {
        let placed: Vec<Placed> = spec
            .layers
            .iter()
            .map(|l| {
                let depth = spec.depth_at(l, t);
                Placed {
                    px: snap(l.rect.0 + l.vel.0 * t as f64),
                    py: snap(l.rect.1 + l.vel.1 * t as f64),
                    disp: snap(fb / depth),
                    depth,
                    w: l.rect.2 as f64,
                    h: l.rect.3 as f64,
                }
            })
            .collect();

        // owner id per pixel: usize::MAX = background
        let mut owner_l = vec![usize::MAX; h * w];
        let mut owner_r = vec![usize::MAX; h * w];
        let mut depth_l = vec![spec.background_depth; h * w];
        let mut depth_r = vec![spec.background_depth; h * w];
        for (i, p) in placed.iter().enumerate() {
            for y in 0..h {
                let fy = y as f64;
                if fy < p.py || fy >= p.py + p.h {
                    continue;
                }
                for x in 0..w {
                    let fx = x as f64;
                    // left view
                    if fx >= p.px && fx < p.px + p.w && p.depth < depth_l[y * w + x] {
                        depth_l[y * w + x] = p.depth;
                        owner_l[y * w + x] = i;
                    }
                    // right view: shifted left by the layer disparity
                    let rx = p.px - p.disp;
                    if fx >= rx && fx < rx + p.w && p.depth < depth_r[y * w + x] {
                        depth_r[y * w + x] = p.depth;
                        owner_r[y * w + x] = i;
                    }
                }
            }
        }

        for y in 0..h {
            for x in 0..w {
                let li = y * w + x;
                for c in 0..3 {
                    let lv = match owner_l[li] {
                        usize::MAX => bg_tex.sample(y as f64, x as f64, c),
                        i => {
                            let p = &placed[i];
                            layer_tex[i].sample(y as f64 - p.py, x as f64 - p.px, c)
                        }
                    };
                    left.set(t, y, x, c, lv);
                    let rv = match owner_r[li] {
                        usize::MAX => bg_tex.sample(y as f64, x as f64 + bg_disp, c),
                        i => {
                            let p = &placed[i];
                            layer_tex[i].sample(y as f64 - p.py, x as f64 - (p.px - p.disp), c)
                        }
                    };
                    right.set(t, y, x, c, rv);
                }

                // ground truth for the left pixel
                let (disp, oid) = match owner_l[li] {
                    usize::MAX => (bg_disp, usize::MAX),
                    i => (placed[i].disp, i),
                };
                gt_values[t * h * w + li] = disp as f32;
                // valid iff the matching right-view sample is owned by the
                // same surface (both bilinear taps when sub-pixel)
                let xr = x as f64 - disp;
                let x0 = xr.floor();
                let x1 = xr.ceil();
                let in_img = x0 >= 0.0 && x1 <= (w - 1) as f64;
                let same_owner = in_img
                    && owner_r[y * w + x0 as usize] == oid
                    && owner_r[y * w + x1 as usize] == oid;
                gt_valid[t * h * w + li] = same_owner;
            }
        }
    }

    Ok(StereoSequence {
        left,
        right,
        focal_px: spec.focal_px,
        baseline_m: spec.baseline_m,
        gt: Some(DisparityVideo {
            t: t_n,
            h,
            w,
            values: gt_values,
            valid: gt_valid,
        }),
    })
}

/// Random scene distribution used for training and held-out evaluation.
/// Disparities are sampled directly and converted to depths, so the generated
/// range is controlled in pixels.
#[derive(Debug, Clone)]
pub struct SceneFamily {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub focal_px: f64,
    pub baseline_m: f64,
    pub min_disp: f64,
    pub max_disp: f64,
    pub min_layers: usize,
    pub max_layers: usize,
    pub max_vel: f64,
    pub texture_smooth: usize,
    pub sub_pixel: bool,
}

impl Default for SceneFamily {
    fn default() -> Self {
        SceneFamily {
            frames: 5,
            height: 64,
            width: 128,
            focal_px: 80.0,
            baseline_m: 0.2,
            min_disp: 1.0,
            max_disp: 16.0,
            min_layers: 1,
            max_layers: 3,
            max_vel: 2.0,
            texture_smooth: 2,
            sub_pixel: false,
        }
    }
}

impl SceneFamily {
    /// Deterministic spec for sample `index` under `master_seed`.
    pub fn sample(&self, master_seed: u64, index: u64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed ^ index.wrapping_mul(0x9E3779B97F4A7C15));
        let fb = self.focal_px * self.baseline_m;
        let n_layers = rng.gen_range(self.min_layers..=self.max_layers);
        // background sits at the far end of the disparity range
        let bg_disp = self.min_disp;
        // split the remaining disparity range into disjoint bands, nearest
        // (largest disparity) first, so depth ordering never crosses
        let band = (self.max_disp - bg_disp - 0.5) / n_layers.max(1) as f64;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let d_hi = self.max_disp - band * i as f64;
            let d_lo = (d_hi - band + 0.25).max(bg_disp + 0.5);
            let d_start = rng.gen_range(d_lo..d_hi);
            let d_end = rng.gen_range(d_lo..d_hi);
            let lw = rng.gen_range(self.width / 6..self.width / 2).max(4);
            let lh = rng.gen_range(self.height / 6..self.height / 2).max(4);
            let px = rng.gen_range(0.0..(self.width - lw) as f64);
            let py = rng.gen_range(0.0..(self.height - lh) as f64);
            let vel = (
                rng.gen_range(-self.max_vel..=self.max_vel),
                rng.gen_range(-self.max_vel / 2.0..=self.max_vel / 2.0),
            );
            layers.push(LayerSpec {
                rect: (px, py, lw, lh),
                depth_start: fb / d_start,
                depth_end: fb / d_end,
                vel,
            });
        }
        SceneSpec {
            seed: rng.gen(),
            frames: self.frames,
            height: self.height,
            width: self.width,
            focal_px: self.focal_px,
            baseline_m: self.baseline_m,
            background_depth: fb / bg_disp,
            texture_smooth: self.texture_smooth,
            sub_pixel: self.sub_pixel,
            layers,
        }
    }
}
