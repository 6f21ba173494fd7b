//! Row-major dense kernels.
//!
//! The summation order for any output element depends only on that element's
//! own row and column, never on how many rows are processed together. Decoding
//! relies on this: scoring a prefix alone or inside a longer teacher-forced
//! sequence yields bit-identical rows.

use super::Float;

/// `out[m,n] = a[m,k] · b[k,n]` (overwrites `out`).
pub fn matmul_into<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        o_row.iter_mut().for_each(|v| *v = T::zero());
        for (p, &a_ip) in a_row.iter().enumerate() {
            axpy(a_ip, &b[p * n..(p + 1) * n], o_row);
        }
    }
}

/// `out[m,k] += g[m,n] · b[k,n]ᵀ`.
pub fn matmul_nt_into<T: Float>(g: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    // transposing once turns the inner loop into a contiguous axpy
    let mut bt = vec![T::zero(); n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let o_row = &mut out[i * k..(i + 1) * k];
        for (j, &gv) in g_row.iter().enumerate() {
            if gv != T::zero() {
                axpy(gv, &bt[j * k..(j + 1) * k], o_row);
            }
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · g[m,n]`.
pub fn matmul_tn_into<T: Float>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            axpy(a_ip, g_row, &mut out[p * n..(p + 1) * n]);
        }
    }
}

/// `y += a·x`.
#[inline]
pub(crate) fn axpy<T: Float>(a: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    let mut yc = y.chunks_exact_mut(8);
    let mut xc = x.chunks_exact(8);
    for (yy, xx) in (&mut yc).zip(&mut xc) {
        for l in 0..8 {
            yy[l] += a * xx[l];
        }
    }
    for (yy, &xx) in yc.into_remainder().iter_mut().zip(xc.remainder()) {
        *yy += a * xx;
    }
}

#[inline]
pub(crate) fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    // Eight independent lanes let the compiler vectorize the loop.
    let mut acc = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (&x, &y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

pub(crate) fn softmax_in_place<T: Float>(x: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    x.iter_mut().for_each(|v| *v *= inv);
}

pub(crate) fn log_softmax_in_place<T: Float>(x: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = x.iter().map(|&v| (v - max).exp()).sum();
    let shift = max + sum.ln();
    x.iter_mut().for_each(|v| *v -= shift);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Float>(x: T) -> T {
    let c = T::cast(GELU_C);
    let a = T::cast(GELU_A);
    let half = T::cast(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::cast(GELU_C);
    let a = T::cast(GELU_A);
    let half = T::cast(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::cast(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_small_case() {
        let eye = [1.0f32, 0.0, 0.0, 1.0];
        let m = [1.0f32, 2.0, 3.0, 4.0];
        let mut out = [0.0f32; 4];
        matmul_into(&eye, &m, &mut out, 2, 2, 2);
        assert_eq!(out, m);

        let b = [5.0f32, 6.0];
        let mut out = [0.0f32; 2];
        matmul_into(&m, &b, &mut out, 2, 2, 1);
        assert_eq!(out, [17.0, 39.0]);
    }

    #[test]
    fn transposed_products_match_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let g: Vec<f64> = (0..m * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.23).sin()).collect();

        let mut nt = vec![0.0; m * k];
        matmul_nt_into(&g, &b, &mut nt, m, n, k);
        let mut tn = vec![0.0; k * n];
        matmul_tn_into(&a, &g, &mut tn, m, k, n);
        for i in 0..m {
            for p in 0..k {
                let want: f64 = (0..n).map(|j| g[i * n + j] * b[p * n + j]).sum();
                assert!((nt[i * k + p] - want).abs() < 1e-12);
            }
        }
        for p in 0..k {
            for j in 0..n {
                let want: f64 = (0..m).map(|i| a[i * k + p] * g[i * n + j]).sum();
                assert!((tn[p * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_do_not_depend_on_batch_height() {
        let (k, n) = (7, 9);
        let a: Vec<f32> = (0..5 * k).map(|i| ((i * 31 % 17) as f32 - 8.0) * 0.13).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 7 % 23) as f32 - 11.0) * 0.07).collect();
        let mut all = vec![0.0; 5 * n];
        matmul_into(&a, &b, &mut all, 5, k, n);
        let mut one = vec![0.0; n];
        matmul_into(&a[3 * k..4 * k], &b, &mut one, 1, k, n);
        assert_eq!(&all[3 * n..4 * n], &one[..]);
    }
}
