//! Dense kernels shared by the tape's forward and backward passes.
//!
//! Matrix products may be split across threads by output row; every output
//! element is written by exactly one thread with a fixed-order inner loop,
//! so results are bit-identical regardless of thread count.

use rayon::prelude::*;

/// Below this many multiply-adds a parallel dispatch costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 16;

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let work = m * k * n;
    let body = |i: usize, c_row: &mut [f64]| {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    };
    if work >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    c
}

/// C[m,n] = A[m,k] * B[n,k]^T
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let work = m * k * n;
    let body = |i: usize, c_row: &mut [f64]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cj) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            *cj = s;
        }
    };
    if work >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    c
}

/// C[m,n] = A[k,m]^T * B[k,n]
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let work = m * k * n;
    let body = |i: usize, c_row: &mut [f64]| {
        for p in 0..k {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += api * bj;
            }
        }
    };
    if work >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    c
}

/// Right-aligned broadcast of two shapes, NumPy style.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

/// Pad `shape` on the left with ones up to `rank` dims.
pub fn pad_shape(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut out = vec![1usize; rank];
    out[rank - shape.len()..].copy_from_slice(shape);
    out
}

/// Row-major strides, with stride 0 on broadcast (size-1) axes.
pub fn broadcast_strides(padded: &[usize]) -> Vec<usize> {
    let rank = padded.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for d in (0..rank).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    strides
}

/// Apply `f` elementwise over the broadcast of `a` and `b`.
pub fn broadcast_apply(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let numel: usize = out_shape.iter().product();
    // fast paths: identical shapes, or a scalar on either side
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if b.len() == 1 {
        let y = b[0];
        return a.iter().map(|&x| f(x, y)).collect();
    }
    if a.len() == 1 {
        let x = a[0];
        return b.iter().map(|&y| f(x, y)).collect();
    }
    // fast path: [r, c] op [c] (bias rows)
    if out_shape.len() == 2 && a_shape == out_shape && b_shape == [out_shape[1]] {
        let c = out_shape[1];
        let mut out = Vec::with_capacity(numel);
        for row in a.chunks(c) {
            for (x, y) in row.iter().zip(b) {
                out.push(f(*x, *y));
            }
        }
        return out;
    }
    // general strided walk
    let rank = out_shape.len();
    let ap = pad_shape(a_shape, rank);
    let bp = pad_shape(b_shape, rank);
    let astr = broadcast_strides(&ap);
    let bstr = broadcast_strides(&bp);
    let mut out = Vec::with_capacity(numel);
    let mut coords = vec![0usize; rank];
    let mut ai = 0usize;
    let mut bi = 0usize;
    for _ in 0..numel {
        out.push(f(a[ai], b[bi]));
        for d in (0..rank).rev() {
            coords[d] += 1;
            ai += astr[d];
            bi += bstr[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ai -= astr[d] * out_shape[d];
            bi -= bstr[d] * out_shape[d];
        }
    }
    out
}

/// Accumulate `grad` (shaped `grad_shape`) into `acc` (shaped `target_shape`),
/// summing over axes that were broadcast in the forward pass. `weight_of`
/// maps a flat index in `grad` to the value to accumulate, so callers can
/// fuse a multiplication with the reduction.
pub fn reduce_into(
    acc: &mut [f64],
    target_shape: &[usize],
    grad_shape: &[usize],
    weight_of: impl Fn(usize) -> f64,
) {
    let grad_numel: usize = grad_shape.iter().product();
    if target_shape == grad_shape {
        for i in 0..grad_numel {
            acc[i] += weight_of(i);
        }
        return;
    }
    if acc.len() == 1 {
        let mut s = 0.0;
        for i in 0..grad_numel {
            s += weight_of(i);
        }
        acc[0] += s;
        return;
    }
    // fast path: target is the trailing row [c] of grad [r, c]
    if grad_shape.len() == 2 && target_shape == [grad_shape[1]] {
        let c = grad_shape[1];
        for i in 0..grad_numel {
            acc[i % c] += weight_of(i);
        }
        return;
    }
    let rank = grad_shape.len();
    let tp = pad_shape(target_shape, rank);
    let tstr = broadcast_strides(&tp);
    let mut coords = vec![0usize; rank];
    let mut ti = 0usize;
    for i in 0..grad_numel {
        acc[ti] += weight_of(i);
        for d in (0..rank).rev() {
            coords[d] += 1;
            ti += tstr[d];
            if coords[d] < grad_shape[d] {
                break;
            }
            coords[d] = 0;
            ti -= tstr[d] * grad_shape[d];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [2x3] * [3x2]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let c = matmul_nn(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0]; // 2x3 = B^T for B 3x2
        let c = matmul_nt(&a, &bt, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);

        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2 = A^T
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let c2 = matmul_tn(&at, &b, 3, 2, 2);
        assert_eq!(c2, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[4, 1], &[1, 3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[], &[2, 2]), Some(vec![2, 2]));
        assert_eq!(broadcast_shape(&[2], &[3]), None);
    }

    #[test]
    fn broadcast_apply_row_bias() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [10.0, 20.0, 30.0];
        let out = broadcast_apply(&a, &[2, 3], &b, &[3], &[2, 3], |x, y| x + y);
        assert_eq!(out, vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    }

    #[test]
    fn reduce_into_bias() {
        let mut acc = vec![0.0; 3];
        let g = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        reduce_into(&mut acc, &[3], &[2, 3], |i| g[i]);
        assert_eq!(acc, vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn reduce_into_general_middle_axis() {
        // grad [2,2,2] -> target [2,1,2]: sum over middle axis
        let g = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let mut acc = vec![0.0; 4];
        reduce_into(&mut acc, &[2, 1, 2], &[2, 2, 2], |i| g[i]);
        assert_eq!(acc, vec![4.0, 6.0, 12.0, 14.0]);
    }
}
