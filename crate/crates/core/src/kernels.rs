//! Raw numeric kernels shared by the tape and the no-grad paths.
//!
//! All loops run in a fixed order so results are bitwise reproducible.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `c (m×n) = op(a) · op(b)`, optionally accumulating into `c`.
///
/// `a` is stored `m×k` (or `k×m` when `trans_a`), `b` is stored `k×n`
/// (or `n×k` when `trans_b`), all row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm lhs length");
    assert_eq!(b.len(), k * n, "gemm rhs length");
    assert_eq!(c.len(), m * n, "gemm out length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths asserted above cover every index reachable via the strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain matrix product of two rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(dim_err!("matmul needs [M,K]·[K,N], got {a:?} and {b:?}"));
    }
    Ok((a[0], a[1], b[1]))
}

/// Row-wise numerically stable softmax over contiguous slices of length `n`.
pub fn softmax_rows<T: Scalar>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// Output extent of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(dim_err!("convolution stride must be positive"));
    }
    let padded = input + 2 * pad;
    if kernel == 0 || kernel > padded {
        return Err(dim_err!(
            "kernel {kernel} larger than padded input {padded} (input {input}, pad {pad})"
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Geometry of an NHWC convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// `x` is `[B,H,W,Cin]` (or `[H,W,Cin]`), `kernel` is `[k,k,Cin,Cout]`.
    pub fn new(x: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (batch, h, w, cin) = match *x {
            [h, w, c] => (1, h, w, c),
            [b, h, w, c] => (b, h, w, c),
            _ => return Err(dim_err!("conv2d input must be [H,W,C] or [B,H,W,C], got {x:?}")),
        };
        let [kh, kw, kc, cout] = *kernel else {
            return Err(dim_err!("conv2d kernel must be [k,k,Cin,Cout], got {kernel:?}"));
        };
        if kh != kw || kc != cin {
            return Err(dim_err!("conv2d kernel {kernel:?} incompatible with input {x:?}"));
        }
        let ho = conv_out_len(h, kh, stride, pad)?;
        let wo = conv_out_len(w, kw, stride, pad)?;
        Ok(ConvGeom { batch, h, w, cin, k: kh, cout, stride, pad, ho, wo })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.ho * self.wo
    }

    pub fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    /// Source pixel of kernel tap `(ky, kx)` for output `(oy, ox)`, if in bounds.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }
}

pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                            let src = ((b * g.h + iy) * g.w + ix) * g.cin;
                            let off = (ky * g.k + kx) * g.cin;
                            dst[off..off + g.cin].copy_from_slice(&x[src..src + g.cin]);
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let patch = g.patch();
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let src = &cols[row * patch..(row + 1) * patch];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                            let dst = ((b * g.h + iy) * g.w + ix) * g.cin;
                            let off = (ky * g.k + kx) * g.cin;
                            for c in 0..g.cin {
                                dx[dst + c] += src[off + c];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation (no kernel flip), no bias, NHWC layout.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), kernel.shape(), stride, pad)?;
    let out = conv2d_raw(x.data(), kernel.data(), &g);
    let shape = if x.rank() == 3 {
        vec![g.ho, g.wo, g.cout]
    } else {
        vec![g.batch, g.ho, g.wo, g.cout]
    };
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn conv2d_raw<T: Scalar>(x: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.rows() * g.cout];
    if g.k == 1 && g.stride == 1 && g.pad == 0 {
        gemm(g.rows(), g.cin, g.cout, x, false, kernel, false, &mut out, false);
    } else {
        let cols = im2col(x, g);
        gemm(g.rows(), g.patch(), g.cout, &cols, false, kernel, false, &mut out, false);
    }
    out
}

/// Adaptive pooling bins `[floor(i·n/p), ceil((i+1)·n/p))`.
pub fn adaptive_bins(n: usize, p: usize) -> Vec<(usize, usize)> {
    (0..p).map(|i| ((i * n) / p, ((i + 1) * n).div_ceil(p))).collect()
}

/// Adaptive average pooling of `[B,H,W,C]` to `[B,P,P,C]`.
pub(crate) fn adaptive_avg_pool_raw<T: Scalar>(
    x: &[T],
    (b, h, w, c): (usize, usize, usize, usize),
    p: usize,
) -> Vec<T> {
    let ybins = adaptive_bins(h, p);
    let xbins = adaptive_bins(w, p);
    let mut out = vec![T::zero(); b * p * p * c];
    for bi in 0..b {
        for (py, &(y0, y1)) in ybins.iter().enumerate() {
            for (px, &(x0, x1)) in xbins.iter().enumerate() {
                let dst = ((bi * p + py) * p + px) * c;
                let count = T::lit(((y1 - y0) * (x1 - x0)) as f64);
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let src = ((bi * h + y) * w + xx) * c;
                        for ch in 0..c {
                            out[dst + ch] += x[src + ch];
                        }
                    }
                }
                for ch in 0..c {
                    out[dst + ch] /= count;
                }
            }
        }
    }
    out
}

/// Permute tensor axes: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute_raw<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..x.len() {
        out.push(x[src]);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            src += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            src -= src_strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn identity_and_dot_product() {
        let eye = Tensor::<f64>::from_f64([2, 2], &[1., 0., 0., 1.]).unwrap();
        let b = Tensor::from_f64([2, 2], &[3., 4., 5., 6.]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap().data(), &[3., 4., 5., 6.]);
        let row = Tensor::<f64>::from_f64([1, 2], &[1., 2.]).unwrap();
        let col = Tensor::from_f64([2, 1], &[3., 4.]).unwrap();
        assert_eq!(matmul(&row, &col).unwrap().data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros([2, 3]);
        let b = Tensor::<f64>::zeros([2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_gemm_matches_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive_matmul(&a, &b, m, k, n);
        let (at, _) = permute_raw(&a, &[m, k], &[1, 0]);
        let (bt, _) = permute_raw(&b, &[k, n], &[1, 0]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, &mut c, false);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_and_single() {
        assert_eq!(softmax_rows(&[0.0f64; 4], 4), vec![0.25; 4]);
        assert_eq!(softmax_rows(&[123.0f64], 1), vec![1.0]);
        let s = softmax_rows(&[1000.0f64, 1000.5], 2);
        let want = 1.0 / (1.0 + (0.5f64).exp());
        assert!((s[0] - want).abs() < 1e-15 && s.iter().all(|v| v.is_finite()));
    }

    fn brute_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
        let g = ConvGeom::new(x.shape(), k.shape(), stride, pad).unwrap();
        let mut out = vec![0.0; g.rows() * g.cout];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                for co in 0..g.cout {
                    let mut acc = 0.0;
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                continue;
                            }
                            for ci in 0..g.cin {
                                acc += x.at(&[iy as usize, ix as usize, ci]) * k.at(&[ky, kx, ci, co]);
                            }
                        }
                    }
                    out[(oy * g.wo + ox) * g.cout + co] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_brute_force_loops() {
        let x = Tensor::<f64>::from_fn([7, 6, 3], |i| ((i * 7919) % 23) as f64 / 11.0 - 1.0);
        let k = Tensor::<f64>::from_fn([4, 4, 3, 2], |i| ((i * 104729) % 17) as f64 / 8.0 - 1.0);
        let got = conv2d(&x, &k, 2, 1).unwrap();
        assert_eq!(got.shape(), &[3, 3, 2]);
        let want = brute_conv(&x, &k, 2, 1);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_shapes() {
        let x = Tensor::<f64>::zeros([8, 8, 5]);
        let k = Tensor::<f64>::zeros([4, 4, 5, 3]);
        assert_eq!(conv2d(&x, &k, 2, 1).unwrap().shape(), &[4, 4, 3]);
        let big = Tensor::<f64>::zeros([9, 9, 5, 3]);
        assert!(conv2d(&x, &big, 1, 0).is_err());
    }

    #[test]
    fn identity_pointwise_conv() {
        let x = Tensor::<f64>::from_fn([3, 3, 4], |i| i as f64);
        let mut k = Tensor::<f64>::zeros([1, 1, 4, 4]);
        for c in 0..4 {
            k.data_mut()[c * 4 + c] = 1.0;
        }
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn adaptive_pool_values() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        assert_eq!(adaptive_avg_pool_raw(&x, (1, 4, 4, 1), 2), vec![2.5, 4.5, 10.5, 12.5]);
        assert_eq!(adaptive_avg_pool_raw(&x, (1, 4, 4, 1), 4), x);
        assert_eq!(adaptive_bins(5, 2), vec![(0, 3), (2, 5)]);
    }

    #[test]
    fn permute_roundtrip() {
        let x: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let perm = [2, 0, 1];
        let (y, shape) = permute_raw(&x, &[2, 3, 4], &perm);
        assert_eq!(shape, vec![4, 2, 3]);
        assert_eq!(y[1], 4.0);
        let (back, s2) = permute_raw(&y, &shape, &inverse_permutation(&perm));
        assert_eq!(s2, vec![2, 3, 4]);
        assert_eq!(back, x);
    }
}
