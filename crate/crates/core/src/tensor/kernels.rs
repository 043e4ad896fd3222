//! Row-major matrix kernels. All of them accumulate into `c`.

use super::Real;

/// c[m×n] += a[m×k] · b[k×n]
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            if a_il == T::zero() {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj = *cj + a_il * bj;
            }
        }
    }
}

/// c[m×n] += a[m×k] · b[n×k]ᵀ
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] = c[i * n + j] + dot(a_row, b_row);
        }
    }
}

/// c[k×n] += a[m×k]ᵀ · b[m×n]
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            if a_il == T::zero() {
                continue;
            }
            let c_row = &mut c[l * n..(l + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj = *cj + a_il * bj;
            }
        }
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // fixed four-lane reduction order
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for (lane, slot) in acc.iter_mut().enumerate() {
            *slot = *slot + a[c * 4 + lane] * b[c * 4 + lane];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail = tail + a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
