//! Trailing-dimension broadcasting helpers shared by the binary ops.

use crate::error::{HitError, Result};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(HitError::dim(format!(
                    "cannot broadcast shapes {:?} and {:?}",
                    a, b
                )))
            }
        };
    }
    Ok(out)
}

/// For every element of `out` (row-major), the flat index of the source
/// element in `input`. `None` means the shapes are identical.
pub(crate) fn broadcast_map(input: &[usize], out: &[usize]) -> Option<Vec<usize>> {
    if input == out {
        return None;
    }
    let rank = out.len();
    let pad = rank - input.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..input.len()).rev() {
        if input[d] != 1 {
            strides[pad + d] = s;
        }
        s *= input[d];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

#[inline]
pub(crate) fn src(map: &Option<Vec<usize>>, i: usize) -> usize {
    match map {
        Some(m) => m[i],
        None => i,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_alignment() {
        assert_eq!(broadcast_shape(&[2, 1], &[1, 3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[4, 2, 3], &[3]).unwrap(), vec![4, 2, 3]);
        assert_eq!(broadcast_shape(&[], &[5]).unwrap(), vec![5]);
        assert!(broadcast_shape(&[2, 3], &[3, 2]).is_err());
    }

    #[test]
    fn map_repeats_rows_and_columns() {
        let m = broadcast_map(&[2, 1], &[2, 3]).unwrap();
        assert_eq!(m, vec![0, 0, 0, 1, 1, 1]);
        let m = broadcast_map(&[1, 3], &[2, 3]).unwrap();
        assert_eq!(m, vec![0, 1, 2, 0, 1, 2]);
        assert!(broadcast_map(&[2, 3], &[2, 3]).is_none());
    }
}
