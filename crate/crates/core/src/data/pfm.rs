//! PFM (portable float map) reader/writer, grayscale `Pf` variant.
//!
//! Layout: `Pf\n<width> <height>\n<scale>\n` followed by `width*height`
//! 4-byte floats, rows stored bottom-to-top. A negative scale marks a
//! little-endian payload, positive big-endian; the magnitude is ignored on
//! read, as is conventional. Non-finite values are preserved (we use +inf to
//! mark invalid disparities).

use crate::error::{Error, Result};
use std::path::Path;

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "pfm",
        reason: reason.into(),
    }
}

/// Serialize a row-major (top-to-bottom) array. Always writes little-endian
/// with the canonical `-1.0` scale.
pub fn write_pfm(values: &[f32], h: usize, w: usize) -> Vec<u8> {
    assert_eq!(values.len(), h * w, "pfm payload size");
    let header = format!("Pf\n{w} {h}\n-1.0\n");
    let mut out = Vec::with_capacity(header.len() + values.len() * 4);
    out.extend_from_slice(header.as_bytes());
    for row in (0..h).rev() {
        for col in 0..w {
            out.extend_from_slice(&values[row * w + col].to_le_bytes());
        }
    }
    out
}

/// Parse PFM bytes into a row-major (top-to-bottom) array.
pub fn read_pfm(bytes: &[u8]) -> Result<(Vec<f32>, usize, usize)> {
    let mut pos = 0usize;
    let mut token = |what: &str| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(format!("missing {what}")));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token("magic")?;
    if magic != "Pf" {
        return Err(format_err(format!("expected 'Pf' header, got '{magic}'")));
    }
    let w: usize = token("width")?
        .parse()
        .map_err(|e| format_err(format!("bad width: {e}")))?;
    let h: usize = token("height")?
        .parse()
        .map_err(|e| format_err(format!("bad height: {e}")))?;
    let scale: f64 = token("scale")?
        .parse()
        .map_err(|e| format_err(format!("bad scale: {e}")))?;
    if scale == 0.0 {
        return Err(format_err("scale must be nonzero"));
    }
    let little_endian = scale < 0.0;
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err("missing header terminator"));
    }
    pos += 1;

    let need = w * h * 4;
    let payload = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format_err(format!("truncated payload: need {need} bytes")))?;
    let mut values = vec![0f32; w * h];
    for row_from_bottom in 0..h {
        let row = h - 1 - row_from_bottom;
        for col in 0..w {
            let off = (row_from_bottom * w + col) * 4;
            let raw: [u8; 4] = payload[off..off + 4].try_into().unwrap();
            values[row * w + col] = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
        }
    }
    Ok((values, h, w))
}

pub fn write_pfm_file(path: &Path, values: &[f32], h: usize, w: usize) -> Result<()> {
    std::fs::write(path, write_pfm(values, h, w))?;
    Ok(())
}

pub fn read_pfm_file(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    read_pfm(&std::fs::read(path)?)
}
