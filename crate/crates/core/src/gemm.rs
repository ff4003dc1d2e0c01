//! Register-blocked dense matrix multiply used by the convolution kernels.
//!
//! Each output element accumulates its products in ascending reduction index,
//! starting from the value already in `c`.

use crate::tensor::Element;

const MR: usize = 4;
const NR: usize = 8;

/// `c[m, n] += a[m, k] * b[k, n]`, all row-major and densely packed.
/// Returns the number of multiply-accumulates executed.
pub(crate) fn gemm_acc<T: Element>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) -> u64 {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut macs = 0u64;
    let full_cols = n - n % NR;
    let mut panel = vec![T::zero(); k * NR];

    for j0 in (0..full_cols).step_by(NR) {
        for p in 0..k {
            panel[p * NR..(p + 1) * NR].copy_from_slice(&b[p * n + j0..p * n + j0 + NR]);
        }
        let mut i0 = 0;
        while i0 + MR <= m {
            let mut acc = [[T::zero(); NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
            }
            let a0 = &a[i0 * k..(i0 + 1) * k];
            let a1 = &a[(i0 + 1) * k..(i0 + 2) * k];
            let a2 = &a[(i0 + 2) * k..(i0 + 3) * k];
            let a3 = &a[(i0 + 3) * k..(i0 + 4) * k];
            for (p, bp) in panel.chunks_exact(NR).enumerate() {
                let bv: &[T; NR] = bp.try_into().unwrap();
                let av = [a0[p], a1[p], a2[p], a3[p]];
                for r in 0..MR {
                    for j in 0..NR {
                        acc[r][j] = acc[r][j] + av[r] * bv[j];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
            }
            macs += (MR * NR * k) as u64;
            i0 += MR;
        }
        for i in i0..m {
            let mut acc = [T::zero(); NR];
            acc.copy_from_slice(&c[i * n + j0..i * n + j0 + NR]);
            let ar = &a[i * k..(i + 1) * k];
            for (p, bp) in panel.chunks_exact(NR).enumerate() {
                for j in 0..NR {
                    acc[j] = acc[j] + ar[p] * bp[j];
                }
            }
            c[i * n + j0..i * n + j0 + NR].copy_from_slice(&acc);
            macs += (NR * k) as u64;
        }
    }

    if full_cols < n {
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            for j in full_cols..n {
                let mut acc = c[i * n + j];
                for p in 0..k {
                    acc = acc + ar[p] * b[p * n + j];
                }
                c[i * n + j] = acc;
            }
            macs += ((n - full_cols) * k) as u64;
        }
    }
    macs
}

/// Row-major transpose of an `rows x cols` matrix.
pub(crate) fn transpose<T: Copy>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for j in 0..cols {
        for i in 0..rows {
            out.push(src[i * cols + j]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
        for i in 0..m {
            for j in 0..n {
                let mut acc = c[i * n + j];
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = acc;
            }
        }
    }

    #[test]
    fn matches_naive_bitwise_for_ragged_sizes() {
        for &(m, n, k) in &[(1, 1, 1), (4, 8, 3), (5, 9, 7), (13, 21, 17), (3, 64, 27), (16, 7, 2)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 31 % 17) as f64 - 8.0) * 0.37).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 13 % 11) as f64 - 5.0) * 1.13).collect();
            let mut c1: Vec<f64> = (0..m * n).map(|i| i as f64 * 0.01).collect();
            let mut c2 = c1.clone();
            let macs = gemm_acc(m, n, k, &a, &b, &mut c1);
            naive(m, n, k, &a, &b, &mut c2);
            assert_eq!(c1, c2);
            assert_eq!(macs, (m * n * k) as u64);
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let v: Vec<i32> = (0..12).collect();
        let t = transpose(&v, 3, 4);
        assert_eq!(t[1], 4);
        assert_eq!(transpose(&t, 4, 3), v);
    }
}
