//! Shape arithmetic shared by the graph ops.

use crate::error::{Result, TensorError};

/// Numpy-style broadcast of two shapes, aligned on trailing dimensions.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_end(a, rank - 1 - i);
        let db = dim_from_end(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::Dimension(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )))
            }
        };
    }
    Ok(out)
}

fn dim_from_end(shape: &[usize], from_end: usize) -> usize {
    if from_end < shape.len() {
        shape[shape.len() - 1 - from_end]
    } else {
        1
    }
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every flat index of `out`, the flat index of the broadcast source of
/// shape `src`. `None` when no broadcasting happens.
pub fn source_index_map(out: &[usize], src: &[usize]) -> Option<Vec<usize>> {
    if out == src {
        return None;
    }
    let numel: usize = out.iter().product();
    let src_numel: usize = src.iter().product();
    // Common case: src is a suffix of out, so indices wrap around.
    if out.len() >= src.len() && out[out.len() - src.len()..] == *src {
        return Some((0..numel).map(|i| i % src_numel).collect());
    }
    if src_numel == 1 {
        return Some(vec![0; numel]);
    }
    let rank = out.len();
    let src_strides = strides(src);
    // Source stride per output axis, zero where the axis is broadcast.
    let mut eff = vec![0usize; rank];
    let offset = rank - src.len();
    for (i, e) in eff.iter_mut().enumerate().skip(offset) {
        let j = i - offset;
        if src[j] != 1 {
            *e = src_strides[j];
        }
    }
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..numel {
        map.push(pos);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            pos += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            pos -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Some(map)
}

pub fn normalize_axis(axis: isize, rank: usize) -> Result<usize> {
    let a = if axis < 0 { axis + rank as isize } else { axis };
    if a < 0 || a as usize >= rank {
        return Err(TensorError::Dimension(format!(
            "axis {axis} out of range for rank {rank}"
        )));
    }
    Ok(a as usize)
}
