//! ASCII PLY export of a colored metric point cloud from one frame.

use crate::error::{Error, Result};

/// Back-project valid pixels through the pinhole model:
/// `Z = focal_px * baseline_m / d`, `X = (x - cx) * Z / focal_px`,
/// `Y = (y - cy) * Z / focal_px`, colored from the frame.
///
/// `frame` is `[H][W][3]` in [0,1]; `disp`/`valid` are `[H][W]`.
#[allow(clippy::too_many_arguments)]
pub fn export_pointcloud(
    frame: &[f32],
    disp: &[f32],
    valid: &[bool],
    h: usize,
    w: usize,
    focal_px: f64,
    baseline_m: f64,
    cx: f64,
    cy: f64,
) -> Result<Vec<u8>> {
    if focal_px <= 0.0 || baseline_m <= 0.0 {
        return Err(Error::Scene("focal_px and baseline_m must be positive".into()));
    }
    let count = valid.iter().filter(|&&v| v).count();
    let mut body = String::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !valid[i] {
                continue;
            }
            let d = disp[i] as f64;
            if d <= 0.0 {
                return Err(Error::Scene(format!(
                    "zero or negative disparity {d} at valid pixel ({x},{y})"
                )));
            }
            let z = focal_px * baseline_m / d;
            let px = (x as f64 - cx) * z / focal_px;
            let py = (y as f64 - cy) * z / focal_px;
            let r = (frame[i * 3].clamp(0.0, 1.0) * 255.0).round() as u8;
            let g = (frame[i * 3 + 1].clamp(0.0, 1.0) * 255.0).round() as u8;
            let b = (frame[i * 3 + 2].clamp(0.0, 1.0) * 255.0).round() as u8;
            body.push_str(&format!("{px} {py} {z} {r} {g} {b}\n"));
        }
    }
    let header = format!(
        "ply\nformat ascii 1.0\nelement vertex {count}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         end_header\n"
    );
    let mut out = header.into_bytes();
    out.extend_from_slice(body.as_bytes());
    Ok(out)
}
