//! Inner loops for the matrix products. All matrices are row-major.

use crate::scalar::Scalar;

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `out += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], out: &mut [T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// `c[m×p] += a[m×k] · b[k×p]`
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let crow = &mut c[i * p..(i + 1) * p];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik != T::zero() {
                axpy(aik, &b[kk * p..(kk + 1) * p], crow);
            }
        }
    }
}

/// `c[m×p] += a[m×k] · b[p×k]ᵀ`
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..p {
            c[i * p + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[k×p] += a[m×k]ᵀ · b[m×p]`
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let brow = &b[i * p..(i + 1) * p];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik != T::zero() {
                axpy(aik, brow, &mut c[kk * p..(kk + 1) * p]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                for t in 0..k {
                    c[i * p + j] += a[i * k + t] * b[t * p + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        (0..c * r).map(|i| a[(i % r) * c + i / r]).collect()
    }

    #[test]
    fn products_agree_with_the_triple_loop() {
        let (m, k, p) = (3, 11, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * p).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(&a, &b, m, k, p);
        let close = |x: &[f64]| x.iter().zip(&want).all(|(u, v)| (u - v).abs() < 1e-12);

        let mut c = vec![0.0; m * p];
        gemm_nn(&a, &b, &mut c, m, k, p);
        assert!(close(&c));

        let mut c = vec![0.0; m * p];
        gemm_nt(&a, &transpose(&b, k, p), &mut c, m, k, p);
        assert!(close(&c));

        let mut c = vec![0.0; m * p];
        gemm_tn(&transpose(&a, m, k), &b, &mut c, k, m, p);
        assert!(close(&c));
    }

    #[test]
    fn dot_handles_remainders() {
        for n in [0, 1, 7, 8, 9, 17] {
            let a: Vec<f64> = (0..n).map(|i| i as f64).collect();
            assert_eq!(dot(&a, &a), (0..n).map(|i| (i * i) as f64).sum::<f64>());
        }
    }
}
