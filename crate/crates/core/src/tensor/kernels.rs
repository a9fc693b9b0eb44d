//! Forward kernels on plain tensors. The graph records these and adds the
//! matching backward passes; they are also usable directly for inference.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::{DType, Tensor};
use crate::encoder::AttentionMask;
use crate::error::{Error, Result};

pub(crate) fn same_dtype(op: &'static str, a: &Tensor, b: &Tensor) -> Result<DType> {
    if a.dtype() != b.dtype() {
        return Err(Error::DTypeMismatch {
            op,
            left: a.dtype(),
            right: b.dtype(),
        });
    }
    Ok(a.dtype())
}

/// `[m x k] . [k x n] -> [m x n]`, accumulating in row-major `i, p, j` order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dtype = same_dtype("matmul", a, b)?;
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("[{k} x _] right operand"),
            format!("{:?}", b.shape()),
        ));
    }
    let out = matmul_raw(a.data(), b.data(), m, k, n);
    let t = Tensor::from_parts(vec![m, n], dtype, out);
    t.ensure_finite("matmul")?;
    Ok(t)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    let src = x.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], x.dtype(), out))
}

/// Exact GELU, `0.5 x (1 + erf(x / sqrt 2))`.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let t = x.map(gelu_scalar);
    t.ensure_finite("gelu")?;
    Ok(t)
}

/// Per-row normalisation statistics kept for the backward pass.
pub(crate) struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_fwd(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let dtype = same_dtype("layer_norm", x, gamma)?;
    same_dtype("layer_norm", x, beta)?;
    let (n, d) = x.dims2()?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!("affine [{d}]"),
            format!("{:?} / {:?}", gamma.shape(), beta.shape()),
        ));
    }
    let src = x.data();
    let (g, b) = (gamma.data(), beta.data());
    let mut out = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut rstd = vec![0.0; n];
    for r in 0..n {
        let row = &src[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            out[r * d + c] = h * g[c] + b[c];
        }
    }
    let t = Tensor::from_parts(vec![n, d], dtype, out);
    t.ensure_finite("layer_norm")?;
    Ok((t, LayerNormCache { xhat, rstd }))
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_fwd(x, gamma, beta, eps).map(|(t, _)| t)
}

/// Row softmax restricted to the allowed entries of `mask`. Disallowed
/// entries are excluded from the max and the normaliser and come out as
/// exactly `0.0`.
pub fn masked_softmax(logits: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
    let (n, m) = logits.dims2()?;
    if mask.len() != n || n != m {
        return Err(Error::shape(
            "masked_softmax",
            format!("[{0} x {0}] to match mask", mask.len()),
            format!("{:?}", logits.shape()),
        ));
    }
    let src = logits.data();
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        let allow = mask.row(r);
        let row = &src[r * n..(r + 1) * n];
        let mut max = f64::NEG_INFINITY;
        for (&v, &ok) in row.iter().zip(allow) {
            if ok && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateAttentionRow { row: r });
        }
        let dst = &mut out[r * n..(r + 1) * n];
        let mut sum = 0.0;
        for c in 0..n {
            if allow[c] {
                let e = (row[c] - max).exp();
                dst[c] = e;
                sum += e;
            }
        }
        for c in 0..n {
            if allow[c] {
                dst[c] /= sum;
            }
        }
    }
    let t = Tensor::from_parts(vec![n, n], logits.dtype(), out);
    t.ensure_finite("masked_softmax")?;
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub fn conv2d_geometry(
    x_shape: &[usize],
    k_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Conv2dGeometry> {
    let (c_in, h, w) = match *x_shape {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("conv2d", "input [c_in x h x w]", format!("{x_shape:?}"))),
    };
    let (c_out, kc, kh, kw) = match *k_shape {
        [o, c, kh, kw] => (o, c, kh, kw),
        _ => {
            return Err(Error::shape(
                "conv2d",
                "kernel [c_out x c_in x kh x kw]",
                format!("{k_shape:?}"),
            ))
        }
    };
    if kc != c_in {
        return Err(Error::shape("conv2d", format!("kernel c_in {c_in}"), format!("{kc}")));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::InvalidArgument(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    Ok(Conv2dGeometry {
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        stride,
        padding,
        out_h: (h + 2 * padding - kh) / stride + 1,
        out_w: (w + 2 * padding - kw) / stride + 1,
    })
}

/// Cross-correlation with zero padding, `[c_in x h x w] * [c_out x c_in x kh x kw]`.
pub fn conv2d(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let dtype = same_dtype("conv2d", x, kernel)?;
    let g = conv2d_geometry(x.shape(), kernel.shape(), stride, padding)?;
    if let Some(b) = bias {
        same_dtype("conv2d", x, b)?;
        if b.shape() != [g.c_out] {
            return Err(Error::shape("conv2d", format!("bias [{}]", g.c_out), format!("{:?}", b.shape())));
        }
    }
    let (xs, ks) = (x.data(), kernel.data());
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.c_out * plane];
    for co in 0..g.c_out {
        let dst = &mut out[co * plane..(co + 1) * plane];
        if let Some(b) = bias {
            dst.iter_mut().for_each(|v| *v = b.data()[co]);
        }
        for ci in 0..g.c_in {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = ks[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &xs[(ci * g.h + iy as usize) * g.w..][..g.w];
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            dst[oy * g.out_w + ox] += wv * src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    let t = Tensor::from_parts(vec![g.c_out, g.out_h, g.out_w], dtype, out);
    t.ensure_finite("conv2d")?;
    Ok(t)
}

/// Mean negative log-likelihood and the row softmax it was computed from.
pub(crate) fn cross_entropy_fwd(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (n, c) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::shape("cross_entropy", format!("{n} labels"), format!("{}", labels.len())));
    }
    let src = logits.data();
    let mut probs = vec![0.0; n * c];
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let row = &src[r * c..(r + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[label];
        for j in 0..c {
            probs[r * c + j] = (row[j] - lse).exp();
        }
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy" });
    }
    Ok((loss, probs))
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    cross_entropy_fwd(logits, labels).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::AttentionMask;

    #[test]
    fn matmul_identity() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = matmul(&a, &Tensor::eye(2)).unwrap();
        assert!(c.bitwise_eq(&a));
        let s = matmul(&Tensor::new(&[1, 1], vec![2.0]).unwrap(), &Tensor::new(&[1, 1], vec![3.0]).unwrap()).unwrap();
        assert_eq!(s.data(), &[6.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::ShapeMismatch { .. })));
        let b32 = Tensor::zeros(&[3, 2]).to_dtype(DType::F32);
        assert!(matches!(matmul(&a, &b32), Err(Error::DTypeMismatch { .. })));
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_constant_row_and_zero_gamma() {
        let x = Tensor::full(&[2, 4], 3.5);
        let y = layer_norm(&x, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = Tensor::new(&[1, 4], vec![1.0, -2.0, 0.5, 7.0]).unwrap();
        let beta = Tensor::new(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let y = layer_norm(&x, &Tensor::zeros(&[4]), &beta, 1e-6).unwrap();
        assert_eq!(y.data(), beta.data());
        assert!(layer_norm(&x, &Tensor::zeros(&[4]), &beta, 0.0).is_err());
    }

    #[test]
    fn masked_softmax_examples() {
        let eq = Tensor::zeros(&[2, 2]);
        let y = masked_softmax(&eq, &AttentionMask::full(2)).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5]);

        let mut mask = AttentionMask::full(3);
        mask.set(1, 1, false);
        mask.set(1, 2, false);
        let logits = Tensor::new(&[3, 3], vec![0.3, 1.0, -2.0, -5.0, 9.0, 8.0, 0.0, 0.0, 0.0]).unwrap();
        let y = masked_softmax(&logits, &mask).unwrap();
        assert_eq!(&y.data()[3..6], &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn masked_softmax_degenerate_row() {
        let mut mask = AttentionMask::full(2);
        mask.set(0, 0, false);
        mask.set(0, 1, false);
        let err = masked_softmax(&Tensor::zeros(&[2, 2]), &mask).unwrap_err();
        assert!(matches!(err, Error::DegenerateAttentionRow { row: 0 }));
        assert_eq!(err.to_string(), "degenerate attention row 0: no allowed entries");
    }

    #[test]
    fn conv_sum_and_identity() {
        let x = Tensor::new(&[1, 16, 16], (0..256).map(|v| v as f64 * 0.5).collect()).unwrap();
        let k = Tensor::ones(&[1, 1, 16, 16]);
        let y = conv2d(&x, &k, None, 10, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data()[0], x.data().iter().sum::<f64>());

        let x = Tensor::new(&[1, 3, 4], (0..12).map(f64::from).collect()).unwrap();
        let y = conv2d(&x, &Tensor::ones(&[1, 1, 1, 1]), None, 1, 0).unwrap();
        assert!(y.reshape(&[1, 3, 4]).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn conv_kernel_too_large() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let k = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(conv2d(&x, &k, None, 1, 0).is_err());
        assert!(conv2d(&x, &k, None, 1, 1).is_ok());
    }

    #[test]
    fn cross_entropy_examples() {
        let l = cross_entropy(&Tensor::zeros(&[3, 4]), &[0, 1, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let logits = Tensor::new(&[1, 3], vec![margin, 0.0, 0.0]).unwrap();
            let l = cross_entropy(&logits, &[0]).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
        assert!(matches!(
            cross_entropy(&Tensor::zeros(&[1, 3]), &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }
}
