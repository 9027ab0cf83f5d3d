//! Shape and index arithmetic shared by the tensor kernels.

use crate::error::{Error, Result};

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast two shapes under numpy-style trailing-dimension rules:
/// shapes are right-aligned, missing leading dims count as 1, and a dim of 1
/// stretches to match. Anything else is a shape mismatch.
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed as `out_shape`, with 0 for broadcast dims.
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = out_shape.len() - shape.len();
    let mut s = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        s[pad + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    s
}

/// Decompose a linear row-major index into coordinates for `shape`.
pub fn unravel(mut idx: usize, shape: &[usize], coords: &mut [usize]) {
    for i in (0..shape.len()).rev() {
        coords[i] = idx % shape[i];
        idx /= shape[i];
    }
}

pub fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::InvalidAxis { op, axis, rank })
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_trailing() {
        assert_eq!(broadcast_shapes("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(
            broadcast_shapes("t", &[4, 1, 1, 1], &[2, 4, 5, 6, 7]).unwrap(),
            vec![2, 4, 5, 6, 7]
        );
        assert!(broadcast_shapes("t", &[2, 3], &[4]).is_err());
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
    }

    #[test]
    fn unravel_roundtrip() {
        let shape = [2, 3, 4];
        let mut c = [0usize; 3];
        unravel(17, &shape, &mut c);
        assert_eq!(c, [1, 1, 1]);
        let s = strides(&shape);
        assert_eq!(c.iter().zip(&s).map(|(a, b)| a * b).sum::<usize>(), 17);
    }
}
