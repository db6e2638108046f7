//! Small dense matmul kernels used by the convolution paths.
//!
//! All three variants accumulate into the destination so backward passes can
//! sum contributions without temporaries. Inner loops run over contiguous
//! rows to keep auto-vectorization effective.

use crate::tensor::Scalar;

/// C[m x n] += A[m x k] * B[k x n], all row-major.
pub fn mm_acc<E: Scalar>(c: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        let mut kk = 0;
        while kk + 4 <= k {
            let (a0, a1, a2, a3) = (a_row[kk], a_row[kk + 1], a_row[kk + 2], a_row[kk + 3]);
            let b0 = &b[kk * n..(kk + 1) * n];
            let b1 = &b[(kk + 1) * n..(kk + 2) * n];
            let b2 = &b[(kk + 2) * n..(kk + 3) * n];
            let b3 = &b[(kk + 3) * n..(kk + 4) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            kk += 4;
        }
        while kk < k {
            let av = a_row[kk];
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + av * b_row[j];
            }
            kk += 1;
        }
    }
}

/// C[m x p] += A[m x n] * B[p x n]^T (rows of A dotted with rows of B).
pub fn mm_abt_acc<E: Scalar>(c: &mut [E], a: &[E], b: &[E], m: usize, n: usize, p: usize) {
    assert_eq!(a.len(), m * n);
    assert_eq!(b.len(), p * n);
    assert_eq!(c.len(), m * p);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..p {
            let b_row = &b[j * n..(j + 1) * n];
            let mut acc = E::zero();
            for q in 0..n {
                acc = acc + a_row[q] * b_row[q];
            }
            c[i * p + j] = c[i * p + j] + acc;
        }
    }
}

/// C[k x n] += A[m x k]^T * B[m x n].
pub fn mm_atb_acc<E: Scalar>(c: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), m * n);
    assert_eq!(c.len(), k * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for j in 0..k {
            let av = a[i * k + j];
            if av == E::zero() {
                continue;
            }
            let c_row = &mut c[j * n..(j + 1) * n];
            for q in 0..n {
                c_row[q] = c_row[q] + av * b_row[q];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for q in 0..k {
                    c[i * n + j] += a[i * k + q] * b[q * n + j];
                }
            }
        }
        c
    }

    fn rand_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn variants_match_naive_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 4), (8, 9, 17), (5, 32, 7)] {
            let a = rand_vec(&mut rng, m * k);
            let b = rand_vec(&mut rng, k * n);
            let want = naive_mm(&a, &b, m, k, n);

            let mut c = vec![0.0; m * n];
            mm_acc(&mut c, &a, &b, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }

            // A * B == A * (B^T)^T, exercised through mm_abt_acc.
            let mut bt = vec![0.0; k * n];
            for i in 0..k {
                for j in 0..n {
                    bt[j * k + i] = b[i * n + j];
                }
            }
            let mut c2 = vec![0.0; m * n];
            mm_abt_acc(&mut c2, &a, &bt, m, k, n);
            for (x, y) in c2.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }

            // A * B == (A^T)^T * B, exercised through mm_atb_acc.
            let mut at = vec![0.0; m * k];
            for i in 0..m {
                for j in 0..k {
                    at[j * m + i] = a[i * k + j];
                }
            }
            let mut c3 = vec![0.0; m * n];
            mm_atb_acc(&mut c3, &at, &b, k, m, n);
            for (x, y) in c3.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn accumulates_instead_of_overwriting() {
        let a = vec![1.0f64, 2.0];
        let b = vec![3.0f64, 4.0];
        let mut c = vec![10.0f64];
        mm_acc(&mut c, &a, &b, 1, 2, 1);
        assert_eq!(c[0], 10.0 + 3.0 + 8.0);
    }
}
