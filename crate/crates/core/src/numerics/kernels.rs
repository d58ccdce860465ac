//! Forward kernels shared by the tape and the plain tensor functions.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// `out[m,n] = a[m,k] · b[k,n]` (overwrites `out`).
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(1.0, a, false, b, false, 0.0, out, m, k, n);
}

/// General product `out = alpha · op(a) · op(b) + beta · out` where `op`
/// optionally transposes. Shapes are those of the *logical* operands:
/// `op(a)` is `m × k`, `op(b)` is `k × n`.
#[allow(clippy::too_many_arguments, unsafe_code)]
pub fn gemm(
    alpha: f64,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    assert!(
        a.len() == m * k && b.len() == k * n && out.len() == m * n,
        "gemm operand sizes"
    );
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the three buffers were length-checked above against the
    // strides passed here, and `out` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2)) + x * FRAC_1_SQRT_2PI * libm::exp(-0.5 * x * x)
}

/// Row-wise layer normalisation. Returns the normalised rows (before the
/// affine map) and the per-row reciprocal standard deviations.
pub fn layer_norm_rows(
    x: &[f64],
    cols: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    out: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rs = 1.0 / libm::sqrt(var + eps);
        rstd.push(rs);
        for c in 0..cols {
            let h = (row[c] - mean) * rs;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gamma[c] + beta[c];
        }
    }
    (xhat, rstd)
}

/// Depthwise convolution over time with `K - 1` zeros of left padding, so
/// `out[t]` only sees `x[..=t]`. `x` is `[len, ch]`, `kernel` is `[K, ch]`.
pub fn causal_conv(x: &[f64], kernel: &[f64], bias: &[f64], ch: usize, out: &mut [f64]) {
    let len = x.len() / ch;
    let taps = kernel.len() / ch;
    for t in 0..len {
        let o = &mut out[t * ch..(t + 1) * ch];
        o.copy_from_slice(bias);
        for j in 0..taps {
            // tap j multiplies x[t + j - (K - 1)]
            let src = t + j;
            if src < taps - 1 {
                continue;
            }
            let s = src - (taps - 1);
            let xr = &x[s * ch..(s + 1) * ch];
            let kr = &kernel[j * ch..(j + 1) * ch];
            for c in 0..ch {
                o[c] += kr[c] * xr[c];
            }
        }
    }
}

// ---- plain tensor functions ------------------------------------------------

/// Elementwise `log(1 + e^x)`.
pub fn softplus_tensor(x: &Tensor) -> Tensor {
    x.map(softplus)
}

/// Elementwise `x · sigmoid(x)`.
pub fn silu_tensor(x: &Tensor) -> Tensor {
    x.map(silu)
}

/// Layer normalisation over the last axis followed by `gamma`/`beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.cols();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            "layer_norm",
            format!("affine params must have {c} entries"),
        ));
    }
    if eps < 0.0 {
        return Err(Error::invalid("layer_norm", "eps must be non-negative"));
    }
    let mut out = vec![0.0; x.len()];
    layer_norm_rows(x.data(), c, gamma.data(), beta.data(), eps, &mut out);
    Tensor::new(x.shape(), out)
}

/// Causal depthwise 1-D convolution, `x: [L, C]`, `kernel: [K, C]`, `bias: [C]`.
pub fn causal_depthwise_conv1d(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = x.cols();
    if x.shape().len() != 2 || kernel.shape().len() != 2 || kernel.cols() != c || bias.len() != c {
        return Err(Error::shape(
            "causal_depthwise_conv1d",
            format!(
                "x {:?}, kernel {:?}, bias {:?}",
                x.shape(),
                kernel.shape(),
                bias.shape()
            ),
        ));
    }
    let mut out = vec![0.0; x.len()];
    causal_conv(x.data(), kernel.data(), bias.data(), c, &mut out);
    Tensor::new(x.shape(), out)
}

/// Affine map along the last axis: `x · w (+ b)`, `w: [in, out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (fan_in, fan_out) = match w.shape() {
        [i, o] => (*i, *o),
        s => {
            return Err(Error::shape(
                "linear",
                format!("weight must be 2-D, got {s:?}"),
            ))
        }
    };
    if x.cols() != fan_in {
        return Err(Error::shape(
            "linear",
            format!("input width {} vs weight {fan_in}", x.cols()),
        ));
    }
    if let Some(b) = b {
        if b.len() != fan_out {
            return Err(Error::shape(
                "linear",
                format!("bias has {} entries, need {fan_out}", b.len()),
            ));
        }
    }
    let rows = x.rows();
    let mut out = vec![0.0; rows * fan_out];
    matmul(x.data(), w.data(), &mut out, rows, fan_in, fan_out);
    if let Some(b) = b {
        for row in out.chunks_mut(fan_out) {
            for (o, bb) in row.iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("non-empty") = fan_out;
    Tensor::new(shape, out)
}
