//! Row-major matrix products. Each output row is produced by the same
//! sequence of operations on either path, so the parallel path is bitwise
//! identical to the reference path.

use rayon::prelude::*;

use super::{threads, Real};

// below this many multiply-adds the rayon dispatch costs more than it saves
const PARALLEL_MIN_WORK: usize = 1 << 16;

fn for_each_row<T: Real>(c: &mut [T], n: usize, work: usize, f: impl Fn(usize, &mut [T]) + Sync) {
    if n == 0 {
        return;
    }
    if threads() > 1 && work >= PARALLEL_MIN_WORK {
        c.par_chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
    } else {
        c.chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn matmul_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for_each_row(c, n, m * k * n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    });
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for_each_row(c, n, m * k * n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, c_ij) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *c_ij += acc;
        }
    });
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for_each_row(c, n, m * k * n, |i, row| {
        for p in 0..k {
            let a_pi = a[p * m + i];
            if a_pi == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in row.iter_mut().zip(b_row) {
                *c_ij += a_pi * b_pj;
            }
        }
    });
}
