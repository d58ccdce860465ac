//! Forward-only block kernels, generic over `f32`/`f64`, for throughput
//! measurements. No tape, no finite checks.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use super::block::{BlockConfig, BlockKind};
use super::scan::{scan_forward, ScanDims, ScanInputs};
use crate::numerics::ParamStore;
use crate::{Error, Result};

/// Floating-point element with a BLAS-style product.
pub trait Real: Float + Default + 'static {
    const BYTES: usize;

    /// `c = alpha · a · b + beta · c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        beta: Self,
        c: &mut [Self],
    );
}

fn strides(rows: usize, cols: usize, t: bool) -> (isize, isize) {
    if t {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $bytes:expr, $f:path) => {
        impl Real for $t {
            const BYTES: usize = $bytes;

            #[allow(unsafe_code)]
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: $t,
                a: &[$t],
                a_t: bool,
                b: &[$t],
                b_t: bool,
                beta: $t,
                c: &mut [$t],
            ) {
                assert!(
                    a.len() == m * k && b.len() == k * n && c.len() == m * n,
                    "gemm operand sizes"
                );
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                // SAFETY: operand lengths were checked against the logical
                // shapes that the strides describe; `c` is uniquely borrowed.
                unsafe {
                    $f(
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
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, 4, matrixmultiply::sgemm);
impl_real!(f64, 8, matrixmultiply::dgemm);

fn cast<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter()
        .map(|&x| T::from(x).expect("finite weight"))
        .collect()
}

enum Mixer<T> {
    Ssm {
        a: Vec<T>,
        d: Vec<T>,
        w_b: Vec<T>,
        w_c: Vec<T>,
        w_dt_down: Vec<T>,
        w_dt_up: Vec<T>,
        dt_bias: Vec<T>,
    },
    Attention {
        w: [Vec<T>; 4],
        b: [Vec<T>; 4],
    },
}

/// One gated block with weights converted to `T`.
pub struct InferenceBlock<T> {
    cfg: BlockConfig,
    norm_w: Vec<T>,
    norm_b: Vec<T>,
    in_proj: Vec<T>,
    conv_w: Vec<T>,
    conv_b: Vec<T>,
    mixer: Mixer<T>,
    out_proj: Vec<T>,
}

impl<T: Real> InferenceBlock<T> {
    /// Only `selective_ssm` and `masked_attention` blocks are supported.
    pub fn from_store(store: &ParamStore, prefix: &str, cfg: &BlockConfig) -> Result<Self> {
        let get =
            |s: &str| -> Result<Vec<T>> { Ok(cast(store.get(&format!("{prefix}{s}"))?.data())) };
        let mixer = match cfg.kind {
            BlockKind::SelectiveSsm => Mixer::Ssm {
                a: get("ssm.a_log")?.into_iter().map(|v: T| -v.exp()).collect(),
                d: get("ssm.d")?,
                w_b: get("ssm.b_proj.weight")?,
                w_c: get("ssm.c_proj.weight")?,
                w_dt_down: get("ssm.dt_down.weight")?,
                w_dt_up: get("ssm.dt_up.weight")?,
                dt_bias: get("ssm.dt_up.bias")?,
            },
            BlockKind::MaskedAttention => Mixer::Attention {
                w: [
                    get("attn.q.weight")?,
                    get("attn.k.weight")?,
                    get("attn.v.weight")?,
                    get("attn.o.weight")?,
                ],
                b: [
                    get("attn.q.bias")?,
                    get("attn.k.bias")?,
                    get("attn.v.bias")?,
                    get("attn.o.bias")?,
                ],
            },
            k => {
                return Err(Error::invalid(
                    "inference block",
                    format!("no inference kernel for `{k}`"),
                ))
            }
        };
        Ok(InferenceBlock {
            cfg: *cfg,
            norm_w: get("norm.weight")?,
            norm_b: get("norm.bias")?,
            in_proj: get("in_proj.weight")?,
            conv_w: get("conv.weight")?,
            conv_b: get("conv.bias")?,
            mixer,
            out_proj: get("out_proj.weight")?,
        })
    }

    /// `z: [len, C]` → `[len, C]`. Allocation failure for large
    /// intermediates is reported as [`Error::OutOfMemory`].
    pub fn forward(&self, z: &[T], len: usize) -> Result<Vec<T>> {
        let (c, i) = (self.cfg.d_model, self.cfg.inner());
        if z.len() != len * c || len == 0 {
            return Err(Error::shape(
                "inference block",
                format!("{} values for {len} x {c}", z.len()),
            ));
        }
        let zn = layer_norm(z, c, &self.norm_w, &self.norm_b);
        let mut proj = alloc_zeroed(len * 2 * i)?;
        T::gemm(
            len,
            c,
            2 * i,
            T::one(),
            &zn,
            false,
            &self.in_proj,
            false,
            T::zero(),
            &mut proj,
        );
        let mut main = alloc_zeroed(len * i)?;
        let mut gate = alloc_zeroed(len * i)?;
        for t in 0..len {
            main[t * i..(t + 1) * i].copy_from_slice(&proj[t * 2 * i..t * 2 * i + i]);
            gate[t * i..(t + 1) * i].copy_from_slice(&proj[t * 2 * i + i..(t + 1) * 2 * i]);
        }
        drop(proj);
        let main: Vec<T> = causal_conv(&main, i, &self.conv_w, &self.conv_b)
            .into_iter()
            .map(silu)
            .collect();
        let mixed = match &self.mixer {
            Mixer::Ssm {
                a,
                d,
                w_b,
                w_c,
                w_dt_down,
                w_dt_up,
                dt_bias,
            } => {
                let n = self.cfg.d_state;
                let r = self.cfg.dt_rank;
                let mut b = alloc_zeroed(len * n)?;
                let mut cc = alloc_zeroed(len * n)?;
                let mut low = alloc_zeroed(len * r)?;
                let mut delta = alloc_zeroed(len * i)?;
                T::gemm(
                    len,
                    i,
                    n,
                    T::one(),
                    &main,
                    false,
                    w_b,
                    false,
                    T::zero(),
                    &mut b,
                );
                T::gemm(
                    len,
                    i,
                    n,
                    T::one(),
                    &main,
                    false,
                    w_c,
                    false,
                    T::zero(),
                    &mut cc,
                );
                T::gemm(
                    len,
                    i,
                    r,
                    T::one(),
                    &main,
                    false,
                    w_dt_down,
                    false,
                    T::zero(),
                    &mut low,
                );
                T::gemm(
                    len,
                    r,
                    i,
                    T::one(),
                    &low,
                    false,
                    w_dt_up,
                    false,
                    T::zero(),
                    &mut delta,
                );
                for row in delta.chunks_mut(i) {
                    for (v, bias) in row.iter_mut().zip(dt_bias) {
                        *v = softplus(*v + *bias);
                    }
                }
                let inp = ScanInputs {
                    dims: ScanDims {
                        len,
                        inner: i,
                        state: n,
                    },
                    u: &main,
                    delta: &delta,
                    a,
                    b: &b,
                    c: &cc,
                    d,
                    simplified_b: self.cfg.simplified_b,
                };
                scan_forward(&inp)?
            }
            Mixer::Attention { w, b } => attention(&main, len, i, w, b)?,
        };
        let gated: Vec<T> = mixed
            .iter()
            .zip(&gate)
            .map(|(&m, &g)| m * silu(g))
            .collect();
        let mut out = z.to_vec();
        T::gemm(
            len,
            i,
            c,
            T::one(),
            &gated,
            false,
            &self.out_proj,
            false,
            T::one(),
            &mut out,
        );
        Ok(out)
    }
}

fn alloc_zeroed<T: Real>(n: usize) -> Result<Vec<T>> {
    let mut v = Vec::new();
    v.try_reserve_exact(n).map_err(|_| Error::OutOfMemory {
        bytes: n.saturating_mul(T::BYTES),
    })?;
    v.resize(n, T::zero());
    Ok(v)
}

fn attention<T: Real>(
    x: &[T],
    len: usize,
    i: usize,
    w: &[Vec<T>; 4],
    b: &[Vec<T>; 4],
) -> Result<Vec<T>> {
    let lin = |x: &[T], k: usize| -> Result<Vec<T>> {
        let mut out = alloc_zeroed(len * i)?;
        for row in out.chunks_mut(i) {
            row.copy_from_slice(&b[k]);
        }
        T::gemm(
            len,
            i,
            i,
            T::one(),
            x,
            false,
            &w[k],
            false,
            T::one(),
            &mut out,
        );
        Ok(out)
    };
    let (q, k, v) = (lin(x, 0)?, lin(x, 1)?, lin(x, 2)?);
    let mut scores = alloc_zeroed(
        len.checked_mul(len)
            .ok_or(Error::OutOfMemory { bytes: usize::MAX })?,
    )?;
    let scale = T::one() / T::from(i).expect("width").sqrt();
    T::gemm(
        len,
        i,
        len,
        scale,
        &q,
        false,
        &k,
        true,
        T::zero(),
        &mut scores,
    );
    for (r, row) in scores.chunks_mut(len).enumerate() {
        let mx = row[..=r].iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in &mut row[..=r] {
            *v = (*v - mx).exp();
            sum = sum + *v;
        }
        for v in &mut row[..=r] {
            *v = *v / sum;
        }
        row[r + 1..].fill(T::zero());
    }
    let mut ctx = alloc_zeroed(len * i)?;
    T::gemm(
        len,
        len,
        i,
        T::one(),
        &scores,
        false,
        &v,
        false,
        T::zero(),
        &mut ctx,
    );
    drop(scores);
    lin(&ctx, 3)
}

fn layer_norm<T: Real>(x: &[T], c: usize, g: &[T], b: &[T]) -> Vec<T> {
    let n = T::from(c).expect("width");
    let eps = T::from(super::super::numerics::kernels::LN_EPS).expect("eps");
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = row
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            / n;
        let rs = T::one() / (var + eps).sqrt();
        out.extend(
            row.iter()
                .zip(g.iter().zip(b))
                .map(|(&v, (&g, &b))| (v - mean) * rs * g + b),
        );
    }
    out
}

fn causal_conv<T: Real>(x: &[T], ch: usize, kernel: &[T], bias: &[T]) -> Vec<T> {
    let len = x.len() / ch;
    let taps = kernel.len() / ch;
    let mut out = vec![T::zero(); x.len()];
    for t in 0..len {
        let o = &mut out[t * ch..(t + 1) * ch];
        o.copy_from_slice(bias);
        for j in 0..taps {
            if t + j + 1 < taps {
                continue;
            }
            let s = t + j + 1 - taps;
            for c in 0..ch {
                o[c] = o[c] + kernel[j * ch + c] * x[s * ch + c];
            }
        }
    }
    out
}

fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

fn softplus<T: Real>(x: T) -> T {
    if x > T::from(30.0).expect("const") {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Closed-form operation counts. A multiply-accumulate counts as 2,
/// every other arithmetic or transcendental element operation as 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopEstimate {
    /// Terms proportional to `L`.
    pub linear: u64,
    /// Terms proportional to `L²` (attention scores, softmax, weighted sum).
    pub quadratic: u64,
}

impl FlopEstimate {
    pub fn total(&self) -> u64 {
        self.linear + self.quadratic
    }
}

/// Floating point operations of one block forward at sequence length `len`.
pub fn flops_estimate(cfg: &BlockConfig, len: usize) -> FlopEstimate {
    let (c, i, n, r, k) = (
        cfg.d_model as u64,
        cfg.inner() as u64,
        cfg.d_state as u64,
        cfg.dt_rank as u64,
        cfg.conv_kernel as u64,
    );
    let l = len as u64;
    // norm (7C), fused input projection, conv with bias, two SiLUs (3 each),
    // gating, output projection, residual
    let wrapper = 7 * c + 2 * c * 2 * i + (2 * k + 1) * i + 6 * i + i + 2 * i * c + c;
    let (per_token, quadratic) = match cfg.kind {
        // B, C projections; low-rank step with bias and softplus; per
        // (channel, state): z, exp, phi (4), B̄ (2), update (3), readout (2);
        // skip term
        BlockKind::SelectiveSsm => (
            2 * 2 * i * n + 2 * i * r + 2 * r * i + 2 * i + 13 * i * n + 2 * i,
            0,
        ),
        // q, k, v, o projections with bias; scores (QKᵀ, scaled),
        // softmax (3 per entry) and the weighted sum over the full matrix
        BlockKind::MaskedAttention => (4 * (2 * i * i + i), l * l * (2 * i + 1 + 3 + 2 * i)),
        BlockKind::Mlp => (2 * i * (i / 2) + i / 2 + i / 2 + 2 * (i / 2) * i + i, 0),
        BlockKind::Identity => (0, 0),
    };
    FlopEstimate {
        linear: l * (wrapper + per_token),
        quadratic,
    }
}

/// Rough high-water mark of live buffers (weights excluded) for one block
/// forward.
pub fn peak_bytes_estimate(cfg: &BlockConfig, len: usize, elem_bytes: usize) -> u64 {
    let (c, i, n, r) = (
        cfg.d_model as u64,
        cfg.inner() as u64,
        cfg.d_state as u64,
        cfg.dt_rank as u64,
    );
    let l = len as u64;
    let base = l * (2 * c + 2 * i + 2 * i);
    let extra = match cfg.kind {
        BlockKind::SelectiveSsm => l * (2 * n + r + 2 * i) + i * n,
        BlockKind::MaskedAttention => l * l + l * 4 * i,
        _ => l * i,
    };
    (base + extra) * elem_bytes as u64
}
