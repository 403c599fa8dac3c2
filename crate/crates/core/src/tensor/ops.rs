//! Raw kernels shared by the tape and the plain tensor helpers.

use super::Scalar;

/// `out[p×r] = a[p×q] · b[q×r]`, overwriting `out`.
pub(crate) fn gemm<T: Scalar>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    if r == 1 {
        for (o, a_row) in out.iter_mut().zip(a.chunks_exact(q.max(1))) {
            *o = dot(a_row, &b[..q]);
        }
        return;
    }
    for o in out.iter_mut() {
        *o = T::zero();
    }
    for i in 0..p {
        let out_row = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            axpy(out_row, aik, &b[k * r..(k + 1) * r]);
        }
    }
}

/// `y += alpha · x`
pub(crate) fn axpy<T: Scalar>(y: &mut [T], alpha: T, x: &[T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o = *o + alpha * v;
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let split = a.len() - a.len() % LANES;
    for (ca, cb) in a[..split].chunks_exact(LANES).zip(b[..split].chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] = acc[l] + ca[l] * cb[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in a[split..].iter().zip(&b[split..]) {
        tail = tail + x * y;
    }
    acc.iter().fold(T::zero(), |s, &x| s + x) + tail
}

/// `out[p×q] += g[p×r] · b[q×r]ᵀ`
pub(crate) fn gemm_nt_acc<T: Scalar>(g: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let g_row = &g[i * r..(i + 1) * r];
        for k in 0..q {
            let b_row = &b[k * r..(k + 1) * r];
            out[i * q + k] = out[i * q + k] + dot(g_row, b_row);
        }
    }
}

/// `out[q×r] += a[p×q]ᵀ · g[p×r]`
pub(crate) fn gemm_tn_acc<T: Scalar>(a: &[T], g: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let g_row = &g[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            axpy(&mut out[k * r..(k + 1) * r], aik, g_row);
        }
    }
}

/// Block layout `out[i·r+k, j·s+l] = a[i,j]·b[k,l]`.
pub(crate) fn kron_into<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    (p, q): (usize, usize),
    (r, s): (usize, usize),
) {
    let cols = q * s;
    for i in 0..p {
        for j in 0..q {
            let aij = a[i * q + j];
            for k in 0..r {
                let start = (i * r + k) * cols + j * s;
                for (o, &bv) in out[start..start + s].iter_mut().zip(&b[k * s..(k + 1) * s]) {
                    *o = aij * bv;
                }
            }
        }
    }
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    let c = (T::from_f64(2.0) / T::PI()).sqrt();
    (c, T::from_f64(0.044715))
}

/// Tanh approximation of GELU.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let half = T::from_f64(0.5);
    let th = (c * (x + k * x * x * x)).tanh();
    let du = c * (T::one() + T::from_f64(3.0) * k * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

/// Splits a shape around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`.
pub(crate) fn softmax_axis<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let mut max = T::neg_infinity();
            for k in 0..len {
                max = max.max(x[idx(k)]);
            }
            let mut sum = T::zero();
            for k in 0..len {
                let e = (x[idx(k)] - max).exp();
                out[idx(k)] = e;
                sum = sum + e;
            }
            for k in 0..len {
                out[idx(k)] = out[idx(k)] / sum;
            }
        }
    }
    out
}
