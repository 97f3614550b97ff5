//! Low-level kernels shared by the forward and backward passes.

use crate::tensorcore::scalar::Scalar;

/// C[m,n] += alpha * A[m,k] @ B[k,n], all row-major contiguous.
pub(crate) fn gemm_nn<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] += alpha * A[m,k] @ B[n,k]^T  (B transposed).
pub(crate) fn gemm_nt<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] += alpha * A[k,m]^T @ B[k,n]  (A transposed).
pub(crate) fn gemm_tn<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Expands `x` of shape [N, C_in, T] into a [N*T, C_in*K] patch matrix for a
/// causal dilated convolution: cols[(n,t), (i,j)] = x[n, i, t - d*(K-1-j)],
/// with out-of-range positions reading 0.
pub(crate) fn im2col_causal<T: Scalar>(
    x: &[T],
    n: usize,
    c_in: usize,
    t_len: usize,
    k: usize,
    dilation: usize,
) -> Vec<T> {
    let mut cols = vec![T::ZERO; n * t_len * c_in * k];
    let row_w = c_in * k;
    for ni in 0..n {
        let x_base = ni * c_in * t_len;
        for t in 0..t_len {
            let row = (ni * t_len + t) * row_w;
            for j in 0..k {
                let back = dilation * (k - 1 - j);
                if back > t {
                    continue;
                }
                let src_t = t - back;
                for i in 0..c_in {
                    cols[row + i * k + j] = x[x_base + i * t_len + src_t];
                }
            }
        }
    }
    cols
}

/// Scatter-adds a [N*T, C_in*K] patch-gradient back onto dx of shape
/// [N, C_in, T]. Inverse of [`im2col_causal`].
pub(crate) fn col2im_causal<T: Scalar>(
    dcols: &[T],
    dx: &mut [T],
    n: usize,
    c_in: usize,
    t_len: usize,
    k: usize,
    dilation: usize,
) {
    let row_w = c_in * k;
    for ni in 0..n {
        let x_base = ni * c_in * t_len;
        for t in 0..t_len {
            let row = (ni * t_len + t) * row_w;
            for j in 0..k {
                let back = dilation * (k - 1 - j);
                if back > t {
                    continue;
                }
                let src_t = t - back;
                for i in 0..c_in {
                    dx[x_base + i * t_len + src_t] += dcols[row + i * k + j];
                }
            }
        }
    }
}

/// Iterates the lanes of `shape` along `axis`, invoking `f(lane_offsets)`
/// where the k-th element of a lane lives at `base + k*inner`.
pub(crate) fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            f(base, axis_len, inner);
        }
    }
}

/// Softmax of one lane in f64, writing results back as `T`.
///
/// `allowed` restricts the support; excluded positions get exactly 0. Lanes
/// accumulate in f64 so the result does not depend on element order beyond
/// the f64 rounding of a ~dozen-term sum, which keeps node-relabeling tests
/// bit-stable at f32.
pub(crate) fn softmax_lane<T: Scalar>(
    src: &[T],
    dst: &mut [T],
    base: usize,
    len: usize,
    stride: usize,
    allowed: Option<&[bool]>,
    allowed_base: usize,
) {
    let mut max = f64::NEG_INFINITY;
    for k in 0..len {
        if allowed.map(|m| m[allowed_base + k]).unwrap_or(true) {
            max = max.max(src[base + k * stride].to_f64());
        }
    }
    let mut denom = 0.0f64;
    for k in 0..len {
        if allowed.map(|m| m[allowed_base + k]).unwrap_or(true) {
            denom += (src[base + k * stride].to_f64() - max).exp();
        }
    }
    for k in 0..len {
        let idx = base + k * stride;
        if allowed.map(|m| m[allowed_base + k]).unwrap_or(true) {
            dst[idx] = T::from_f64((src[idx].to_f64() - max).exp() / denom);
        } else {
            dst[idx] = T::ZERO;
        }
    }
}
