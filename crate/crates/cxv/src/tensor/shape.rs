//! Shape arithmetic: row-major strides, numpy-style broadcasting, and the
//! odometer walks used by broadcasted elementwise kernels.

use crate::error::{CxvError, Result};
use crate::scalar::Scalar;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

/// Broadcast result shape of `a` and `b` (right-aligned; 1 stretches).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(CxvError::Dim(format!(
                "shapes not broadcast-compatible: {a:?} vs {b:?}"
            )));
        };
    }
    Ok(out)
}

/// Strides of `shape` padded/stretched to walk an `out_shape`-sized index
/// space: broadcast dims get stride 0.
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = row_major_strides(shape);
    let pad = out_shape.len() - shape.len();
    let mut strides = vec![0; out_shape.len()];
    for i in 0..shape.len() {
        strides[pad + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    strides
}

/// Walk every index of `out_shape`, yielding `(out_flat, a_off, b_off)`.
/// `visit` runs once per output element in row-major order.
pub fn zip_broadcast<F: FnMut(usize, usize, usize)>(
    out_shape: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut visit: F,
) {
    let total = numel(out_shape);
    if total == 0 {
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        visit(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut a_off = 0usize;
    let mut b_off = 0usize;
    for flat in 0..total {
        visit(flat, a_off, b_off);
        // odometer increment from the rightmost dim
        for d in (0..rank).rev() {
            idx[d] += 1;
            a_off += a_strides[d];
            b_off += b_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            a_off -= a_strides[d] * out_shape[d];
            b_off -= b_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// Sum `grad` (shaped `grad_shape`) down to `target_shape`, reversing a
/// broadcast. Returns a buffer of `numel(target_shape)`.
pub fn reduce_to_shape<E: Scalar>(
    grad: &[E],
    grad_shape: &[usize],
    target_shape: &[usize],
) -> Vec<E> {
    let mut out = vec![E::zero(); numel(target_shape)];
    let t_strides = broadcast_strides(target_shape, grad_shape);
    let g_strides = row_major_strides(grad_shape);
    zip_broadcast(grad_shape, &g_strides, &t_strides, |flat, _, t_off| {
        out[t_off] += grad[flat];
    });
    out
}

/// Split a shape at the last `tail` dims: `([batch...], [tail...])`.
pub fn split_tail(shape: &[usize], tail: usize) -> (&[usize], &[usize]) {
    let cut = shape.len() - tail;
    (&shape[..cut], &shape[cut..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shapes(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shapes(&[4, 1, 3], &[2, 1]).unwrap(), vec![4, 2, 3]);
        assert_eq!(broadcast_shapes(&[], &[2, 2]).unwrap(), vec![2, 2]);
        assert!(broadcast_shapes(&[2, 3], &[2, 4]).is_err());
    }

    #[test]
    fn zip_broadcast_bias_add_pattern() {
        // [2,3] + [3]
        let a = [0.0f64, 1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [10.0f64, 20.0, 30.0];
        let out_shape = [2, 3];
        let asr = broadcast_strides(&[2, 3], &out_shape);
        let bsr = broadcast_strides(&[3], &out_shape);
        let mut out = vec![0.0; 6];
        zip_broadcast(&out_shape, &asr, &bsr, |f, ao, bo| out[f] = a[ao] + b[bo]);
        assert_eq!(out, vec![10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
    }

    #[test]
    fn reduce_reverses_broadcast() {
        // grad over [2,3] reduced to [3] sums the rows
        let g = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[3]), vec![5.0, 7.0, 9.0]);
        // reduced to [2,1] sums the columns
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[2, 1]), vec![6.0, 15.0]);
        // reduced to scalar
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[]), vec![21.0]);
    }
}
