// Slice-level kernels shared by the graph and the free functions.

use super::Real;

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn matmul_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// out[m×k] += a[m×n] · b[k×n]ᵀ
pub(crate) fn matmul_nt_acc<T: Real>(
    a: &[T],
    b: &[T],
    m: usize,
    n: usize,
    k: usize,
    out: &mut [T],
) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let b_row = &b[j * n..(j + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            out[i * k + j] = out[i * k + j] + acc;
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub(crate) fn matmul_tn_acc<T: Real>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

pub(crate) fn kron_into<T: Real>(
    a: &[T],
    b: &[T],
    p: usize,
    q: usize,
    r: usize,
    s: usize,
    out: &mut [T],
) {
    let cols = q * s;
    for i in 0..p {
        for j in 0..q {
            let av = a[i * q + j];
            for k in 0..r {
                for l in 0..s {
                    out[(i * r + k) * cols + j * s + l] = av * b[k * s + l];
                }
            }
        }
    }
}

/// Numerically stable softmax over the first `valid` entries of `row`;
/// entries past `valid` are set to zero.
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T], valid: usize) {
    let max = row[..valid]
        .iter()
        .copied()
        .fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row[..valid].iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row[..valid].iter_mut() {
        *x = *x / sum;
    }
    for x in row[valid..].iter_mut() {
        *x = T::zero();
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::of_f64(GELU_C);
    let k = T::of_f64(GELU_K);
    let half = T::of_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of_f64(GELU_C);
    let k = T::of_f64(GELU_K);
    let half = T::of_f64(0.5);
    let three = T::of_f64(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}
