//! Plain (untracked) tensor primitives.
//!
//! The tape in [`super::tape`] reuses these kernels for its forward values.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default epsilon for layer normalization.
pub const LN_EPS: f32 = 1e-5;

const SQRT_2_OVER_PI: f32 = 0.797_884_6;
const GELU_CUBIC: f32 = 0.044_715;

/// `c = op(a) * op(b)` into a fresh buffer, where `op` optionally transposes.
/// `a` is `m x k` after op, `b` is `k x n` after op.
pub(crate) fn gemm(
    a: &[f32],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[f32],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
) -> (Vec<f32>, usize, usize) {
    let (m, k) = if trans_a { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (k2, n) = if trans_b { (b_cols, b_rows) } else { (b_rows, b_cols) };
    debug_assert_eq!(k, k2);
    let mut c = vec![0.0f32; m * n];
    if m == 0 || n == 0 || k == 0 {
        return (c, m, n);
    }
    // Row-major strides; transposition swaps them.
    let (rsa, csa) = if trans_a { (1, a_cols as isize) } else { (a_cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b_cols as isize) } else { (b_cols as isize, 1) };
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    (c, m, n)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "matmul {:?} x {:?}: inner dimensions disagree",
            a.shape(),
            b.shape()
        )));
    }
    let (c, m, n) = gemm(
        a.data(),
        a.rows(),
        a.cols(),
        false,
        b.data(),
        b.rows(),
        b.cols(),
        false,
    );
    Ok(Tensor::from_parts(vec![m, n], c))
}

/// Row-wise layer normalization with population variance.
///
/// `eps = 0` is accepted; a zero-variance row then normalizes to zero.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Shape(format!(
            "layer_norm: x {:?} with gamma {:?} / beta {:?}",
            x.shape(),
            gamma.shape(),
            beta.shape()
        )));
    }
    if !(eps >= 0.0) {
        return Err(Error::Config(format!("layer_norm eps must be >= 0, got {eps}")));
    }
    let (y, _, _) = layer_norm_raw(x.data(), x.rows(), d, gamma.data(), beta.data(), eps);
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

/// Returns `(y, xhat, rstd)`.
pub(crate) fn layer_norm_raw(
    x: &[f32],
    rows: usize,
    d: usize,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut y = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut rstds = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let denom = var + eps;
        let rstd = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
        rstds[r] = rstd;
        for c in 0..d {
            let h = (row[c] - mean) * rstd;
            xhat[r * d + c] = h;
            y[r * d + c] = h * gamma[c] + beta[c];
        }
    }
    (y, xhat, rstds)
}

/// GELU, tanh approximation:
/// `0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))`.
pub fn gelu_scalar(x: f32) -> f32 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad_scalar(x: f32) -> f32 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "softmax axis {axis} invalid for shape {shape:?}"
        )));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| o * len * inner + k * inner + i;
            let m = (0..len).map(|k| out[idx(k)]).fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0;
            for k in 0..len {
                let e = (out[idx(k)] - m).exp();
                out[idx(k)] = e;
                s += e;
            }
            for k in 0..len {
                out[idx(k)] /= s;
            }
        }
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

pub(crate) fn softmax_row_inplace(row: &mut [f32]) {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// `ln(sigmoid(x))` without overflow for large `|x|`.
pub fn log_sigmoid(x: f32) -> f32 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let b = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(matmul(&Tensor::identity(3), &b).unwrap(), b);
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let z = matmul(&a, &Tensor::zeros(&[2, 1])).unwrap();
        assert_eq!(z.data(), &[0., 0.]);
        let c = matmul(&a, &t(&[2, 2], &[5., 6., 7., 8.])).unwrap();
        assert_eq!(c.data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_mismatch_names_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::ones(&[3]);
        let b = Tensor::zeros(&[3]);
        let y = layer_norm(&t(&[1, 3], &[5., 5., 5.]), &g, &b, LN_EPS).unwrap();
        assert_eq!(y.data(), &[0., 0., 0.]);

        let y = layer_norm(&t(&[1, 2], &[1., -1.]), &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 0.0)
            .unwrap();
        assert_eq!(y.data(), &[1., -1.]);

        let y = layer_norm(
            &t(&[1, 2], &[0., 2.]),
            &Tensor::full(&[2], 2.0),
            &Tensor::ones(&[2]),
            0.0,
        )
        .unwrap();
        assert_eq!(y.data(), &[-1., 3.]);

        assert!(layer_norm(&t(&[1, 2], &[0., 2.]), &g, &b, LN_EPS).is_err());
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
        let expected = 0.5 * (1.0 + (0.797_884_56_f64 * 1.044_715).tanh());
        assert!((gelu_scalar(1.0) as f64 - expected).abs() < 1e-6);
        assert!((gelu_scalar(1.0) - 0.8412).abs() < 1e-4);
    }

    #[test]
    fn softmax_examples() {
        let y = softmax(&t(&[3], &[0., 0., 0.]), 0).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let y = softmax(&t(&[2], &[1000., 0.]), 0).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-7 && y.data()[1] < 1e-30);
        let y = softmax(&t(&[3], &[0.0, 2f32.ln(), 3f32.ln()]), 0).unwrap();
        for (v, e) in y.data().iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
            assert!((v - e).abs() < 1e-6);
        }
        assert!(softmax(&t(&[3], &[0., 0., 0.]), 1).is_err());
    }

    #[test]
    fn softmax_along_first_axis() {
        let y = softmax(&t(&[2, 2], &[0., 1., 0., 1.]), 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) - 0.5f32.ln()).abs() < 1e-7);
        assert!(log_sigmoid(100.0).abs() < 1e-30);
        assert!((log_sigmoid(-100.0) + 100.0).abs() < 1e-4);
        assert!(log_sigmoid(-1e6).is_finite());
    }
}
