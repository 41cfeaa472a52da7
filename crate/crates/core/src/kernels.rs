//! Dense matrix kernels shared by the graph and the inference paths.
//!
//! Every kernel accumulates into `out` and sums over the inner index in
//! ascending order, so a given output row is bit-identical regardless of how
//! many other rows are computed alongside it.

use alloc::vec;

const MR: usize = 4;
const NR: usize = 8;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 || k == 0 {
        return;
    }
    let full_rows = m - m % MR;
    let full_cols = n - n % NR;
    for i in (0..full_rows).step_by(MR) {
        for j in (0..full_cols).step_by(NR) {
            tile(a, b, out, i, j, k, n);
        }
        for r in i..i + MR {
            edge(a, b, out, r, full_cols, n, k, n);
        }
    }
    for r in full_rows..m {
        edge(a, b, out, r, 0, n, k, n);
    }
}

/// Register-blocked `MR × NR` block of the output at `(i, j)`.
#[inline(always)]
fn tile(a: &[f64], b: &[f64], out: &mut [f64], i: usize, j: usize, k: usize, n: usize) {
    let mut acc = [[0.0f64; NR]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + NR]);
    }
    let a_rows: [&[f64]; MR] = core::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
    for p in 0..k {
        let bp: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
        for r in 0..MR {
            let x = a_rows[r][p];
            for c in 0..NR {
                acc[r][c] += x * bp[c];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        out[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
    }
}

/// Columns `j0..j1` of output row `r`.
#[allow(clippy::too_many_arguments)]
fn edge(a: &[f64], b: &[f64], out: &mut [f64], r: usize, j0: usize, j1: usize, k: usize, n: usize) {
    if j0 == j1 {
        return;
    }
    let ar = &a[r * k..(r + 1) * k];
    let c = &mut out[r * n + j0..r * n + j1];
    for (p, &x) in ar.iter().enumerate() {
        let bp = &b[p * n + j0..p * n + j1];
        for (y, &bv) in c.iter_mut().zip(bp) {
            *y += x * bv;
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    matmul_nn(a, &bt, out, m, k, n);
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let at = transpose(a, k, m);
    matmul_nn(&at, b, out, m, k, n);
}

/// Transpose of a row-major `rows×cols` matrix.
pub fn transpose(x: &[f64], rows: usize, cols: usize) -> alloc::vec::Vec<f64> {
    debug_assert_eq!(x.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    for (r, row) in x.chunks_exact(cols.max(1)).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn blocked_kernel_matches_triple_loop_bitwise() {
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (4, 4, 4), (9, 7, 13), (16, 3, 1)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
            let mut out = vec![0.0; m * n];
            matmul_nn(&a, &b, &mut out, m, k, n);
            assert_eq!(out, naive(&a, &b, m, k, n));

            let bt = transpose(&b, k, n);
            let mut out_nt = vec![0.0; m * n];
            matmul_nt(&a, &bt, &mut out_nt, m, k, n);
            assert_eq!(out_nt, out);

            let at = transpose(&a, m, k);
            let mut out_tn = vec![0.0; m * n];
            matmul_tn(&at, &b, &mut out_tn, m, k, n);
            assert_eq!(out_tn, out);
        }
    }

    #[test]
    fn kernel_accumulates() {
        let mut out = vec![1.0; 4];
        matmul_nn(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], &mut out, 2, 2, 2);
        assert_eq!(out, vec![20.0, 23.0, 44.0, 51.0]);
    }
}
