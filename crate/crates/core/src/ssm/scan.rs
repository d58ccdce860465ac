use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::discretize::{exp_phi_prime, zoh_pair};
use crate::numerics::{kernels, BackwardRule, Tensor};
use crate::{Error, GradTape, Result, Var};

/// Oracles that materialise `L × L` operators refuse longer inputs.
pub const MAX_ORACLE_LEN: usize = 256;

/// Diagonal state matrix, residual and input-dependent projections of one
/// selective SSM. `A = -exp(a_log)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveSsmParams {
    /// `[inner, N]`
    pub a_log: Tensor,
    /// `[inner]`
    pub d: Tensor,
    /// `[inner, N]`
    pub w_b: Tensor,
    /// `[inner, N]`
    pub w_c: Tensor,
    /// `[inner, dt_rank]`
    pub w_dt_down: Tensor,
    /// `[dt_rank, inner]`
    pub w_dt_up: Tensor,
    /// `[inner]`
    pub dt_bias: Tensor,
}

/// `softplus⁻¹(y) = y + log(-expm1(-y))`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + libm::log(-libm::expm1(-y))
}

impl SelectiveSsmParams {
    /// Standard initialisation: `A_n = -(n + 1)`, `D = 1`, projection
    /// weights uniform in `±1/√fan_in`, and a step bias giving initial
    /// `Δ` log-uniform in `[1e-3, 1e-1]`.
    pub fn init<R: Rng + ?Sized>(inner: usize, state: usize, dt_rank: usize, rng: &mut R) -> Self {
        let a_log = (0..inner * state)
            .map(|i| libm::log((i % state + 1) as f64))
            .collect();
        let bound = 1.0 / libm::sqrt(inner as f64);
        let dt_bound = 1.0 / libm::sqrt(dt_rank as f64);
        let (lo, hi) = (libm::log(1e-3), libm::log(1e-1));
        let dt_bias = (0..inner)
            .map(|_| inverse_softplus(libm::exp(lo + (hi - lo) * rng.random::<f64>()).max(1e-4)))
            .collect();
        SelectiveSsmParams {
            a_log: Tensor::new([inner, state], a_log).expect("shape"),
            d: Tensor::full([inner], 1.0),
            w_b: Tensor::uniform([inner, state], -bound, bound, rng),
            w_c: Tensor::uniform([inner, state], -bound, bound, rng),
            w_dt_down: Tensor::uniform([inner, dt_rank], -bound, bound, rng),
            w_dt_up: Tensor::uniform([dt_rank, inner], -dt_bound, dt_bound, rng),
            dt_bias: Tensor::new([inner], dt_bias).expect("shape"),
        }
    }

    /// Random parameters for oracle tests: `a_log ~ N(0, 0.5²)` and all
    /// projections Gaussian with the given scale.
    pub fn random<R: Rng + ?Sized>(
        inner: usize,
        state: usize,
        dt_rank: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::init(inner, state, dt_rank, rng);
        p.a_log = Tensor::randn([inner, state], 0.5, rng);
        p.d = Tensor::randn([inner], 1.0, rng);
        p.w_b = Tensor::randn([inner, state], scale, rng);
        p.w_c = Tensor::randn([inner, state], scale, rng);
        p.w_dt_down = Tensor::randn([inner, dt_rank], scale, rng);
        p.w_dt_up = Tensor::randn([dt_rank, inner], scale, rng);
        p.dt_bias = Tensor::randn([inner], 0.5, rng);
        p
    }

    pub fn inner(&self) -> usize {
        self.d.len()
    }

    pub fn state(&self) -> usize {
        self.a_log.cols()
    }

    pub fn dt_rank(&self) -> usize {
        self.w_dt_up.rows()
    }

    /// `A = -exp(a_log)`, `[inner, N]` row-major.
    pub fn a(&self) -> Vec<f64> {
        self.a_log.data().iter().map(|&v| -libm::exp(v)).collect()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let (inner, n, r) = (self.inner(), self.state(), self.dt_rank());
        let ok = self.a_log.shape() == [inner, n]
            && self.w_b.shape() == [inner, n]
            && self.w_c.shape() == [inner, n]
            && self.w_dt_down.shape() == [inner, r]
            && self.w_dt_up.shape() == [r, inner]
            && self.dt_bias.len() == inner;
        if !ok {
            return Err(Error::shape(
                "selective ssm",
                "inconsistent parameter shapes",
            ));
        }
        if x.shape().len() != 2 || x.cols() != inner {
            return Err(Error::shape(
                "selective ssm",
                format!("input {:?} for inner width {inner}", x.shape()),
            ));
        }
        Ok(())
    }

    /// Pre-activation of the step size, `L_Δ(x)`: `[L, inner]`.
    pub fn delta_preactivation(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let low = kernels::linear(x, &self.w_dt_down, None)?;
        kernels::linear(&low, &self.w_dt_up, Some(&self.dt_bias))
    }
}

/// Per-step `B: [L, N]`, `C: [L, N]` and `Δ = softplus(L_Δ(x)): [L, inner]`.
pub fn selective_parameters(
    x: &Tensor,
    p: &SelectiveSsmParams,
) -> Result<(Tensor, Tensor, Tensor)> {
    p.check(x)?;
    let b = kernels::linear(x, &p.w_b, None)?;
    let c = kernels::linear(x, &p.w_c, None)?;
    let delta = kernels::softplus_tensor(&p.delta_preactivation(x)?);
    Ok((b, c, delta))
}

/// Sizes of one scan: sequence length, channels, state size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub len: usize,
    pub inner: usize,
    pub state: usize,
}

/// Borrowed scan operands, row-major: `u, delta: [L, inner]`,
/// `a: [inner, N]` (already negative), `b, c: [L, N]`, `d: [inner]`.
#[derive(Clone, Copy)]
pub struct ScanInputs<'a, T> {
    pub dims: ScanDims,
    pub u: &'a [T],
    pub delta: &'a [T],
    pub a: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    pub d: &'a [T],
    pub simplified_b: bool,
}

impl<T: Float> ScanInputs<'_, T> {
    fn validate(&self) -> Result<()> {
        let ScanDims { len, inner, state } = self.dims;
        let ok = len > 0
            && self.u.len() == len * inner
            && self.delta.len() == len * inner
            && self.a.len() == inner * state
            && self.b.len() == len * state
            && self.c.len() == len * state
            && self.d.len() == inner;
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                "ssm_scan",
                format!("operands inconsistent with {:?}", self.dims),
            ))
        }
    }

    /// `h ← Ā_t h + B̄_t u_t`.
    #[inline]
    fn step(&self, t: usize, h: &mut [T]) {
        let ScanDims { inner, state, .. } = self.dims;
        let bt = &self.b[t * state..(t + 1) * state];
        for d in 0..inner {
            let dt = self.delta[t * inner + d];
            let ut = self.u[t * inner + d];
            let hd = &mut h[d * state..(d + 1) * state];
            let ad = &self.a[d * state..(d + 1) * state];
            for n in 0..state {
                let (abar, bbar) = zoh_pair(ad[n], dt, bt[n], self.simplified_b);
                hd[n] = abar * hd[n] + bbar * ut;
            }
        }
    }

    /// `y_t = C_t h_t + D ⊙ u_t`.
    #[inline]
    fn emit(&self, t: usize, h: &[T], y: &mut [T]) {
        let ScanDims { inner, state, .. } = self.dims;
        let ct = &self.c[t * state..(t + 1) * state];
        for d in 0..inner {
            let hd = &h[d * state..(d + 1) * state];
            let mut acc = self.d[d] * self.u[t * inner + d];
            for n in 0..state {
                acc = acc + ct[n] * hd[n];
            }
            y[d] = acc;
        }
    }
}

/// Sequential recurrence `h_t = Ā_t h_{t-1} + B̄_t u_t`, `y_t = C_t h_t + D u_t`
/// from `h_0 = 0`. Memory beyond the output is one `[inner, N]` state.
pub fn scan_forward<T: Float>(inp: &ScanInputs<'_, T>) -> Result<Vec<T>> {
    inp.validate()?;
    let ScanDims { len, inner, state } = inp.dims;
    let mut h = vec![T::zero(); inner * state];
    let mut y = vec![T::zero(); len * inner];
    for t in 0..len {
        inp.step(t, &mut h);
        inp.emit(t, &h, &mut y[t * inner..(t + 1) * inner]);
    }
    Ok(y)
}

/// Every hidden state, `[L, inner, N]`.
pub fn scan_states<T: Float>(inp: &ScanInputs<'_, T>) -> Result<Vec<T>> {
    inp.validate()?;
    let ScanDims { len, inner, state } = inp.dims;
    let w = inner * state;
    let mut h = vec![T::zero(); w];
    let mut all = Vec::with_capacity(len * w);
    for t in 0..len {
        inp.step(t, &mut h);
        all.extend_from_slice(&h);
    }
    Ok(all)
}

/// Gradients of a scan with respect to `u, delta, a, b, c, d`.
pub struct ScanGrads {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

fn checkpoint_stride(len: usize) -> usize {
    (libm::ceil(libm::sqrt(len as f64)) as usize).max(1)
}

/// [`scan_forward`] that also keeps the state entering every chunk of
/// `⌈√L⌉` steps.
fn scan_forward_checkpointed(inp: &ScanInputs<'_, f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    inp.validate()?;
    let ScanDims { len, inner, state } = inp.dims;
    let w = inner * state;
    let chunk = checkpoint_stride(len);
    let mut checkpoints = Vec::with_capacity(len.div_ceil(chunk) * w);
    let mut h = vec![0.0; w];
    let mut y = vec![0.0; len * inner];
    for t in 0..len {
        if t % chunk == 0 {
            checkpoints.extend_from_slice(&h);
        }
        inp.step(t, &mut h);
        inp.emit(t, &h, &mut y[t * inner..(t + 1) * inner]);
    }
    Ok((y, checkpoints))
}

/// Reverse sweep for [`scan_forward`]. Hidden states are recomputed chunk
/// by chunk from checkpoints taken every `⌈√L⌉` steps.
pub fn scan_backward(inp: &ScanInputs<'_, f64>, gy: &[f64]) -> Result<ScanGrads> {
    let (_, checkpoints) = scan_forward_checkpointed(inp)?;
    scan_backward_from(inp, gy, &checkpoints)
}

fn scan_backward_from(
    inp: &ScanInputs<'_, f64>,
    gy: &[f64],
    checkpoints: &[f64],
) -> Result<ScanGrads> {
    inp.validate()?;
    let ScanDims { len, inner, state } = inp.dims;
    if gy.len() != len * inner {
        return Err(Error::shape(
            "ssm_scan backward",
            "output gradient has the wrong size",
        ));
    }
    let w = inner * state;
    let chunk = checkpoint_stride(len);
    if checkpoints.len() != len.div_ceil(chunk) * w {
        return Err(Error::shape(
            "ssm_scan backward",
            "checkpoint buffer has the wrong size",
        ));
    }

    let mut g = ScanGrads {
        u: vec![0.0; len * inner],
        delta: vec![0.0; len * inner],
        a: vec![0.0; w],
        b: vec![0.0; len * state],
        c: vec![0.0; len * state],
        d: vec![0.0; inner],
    };
    let mut gh = vec![0.0; w];
    let mut states = vec![0.0; (chunk + 1) * w];
    // per step of the chunk: exp(z), phi(z), phi'(z)
    let mut coef = vec![[0.0; 3]; chunk * w];
    for ci in (0..len.div_ceil(chunk)).rev() {
        let start = ci * chunk;
        let end = (start + chunk).min(len);
        states[..w].copy_from_slice(&checkpoints[ci * w..(ci + 1) * w]);
        for t in start..end {
            let r = t - start;
            let (prev, next) = states.split_at_mut((r + 1) * w);
            let (prev, next) = (&prev[r * w..], &mut next[..w]);
            let bt = &inp.b[t * state..(t + 1) * state];
            for d in 0..inner {
                let (dt, ut) = (inp.delta[t * inner + d], inp.u[t * inner + d]);
                for n in 0..state {
                    let k = d * state + n;
                    let z = inp.a[k] * dt;
                    let cf = if inp.simplified_b {
                        [libm::exp(z), 1.0, 0.0]
                    } else {
                        let (e, p, dp) = exp_phi_prime(z);
                        [e, p, dp]
                    };
                    next[k] = cf[0] * prev[k] + cf[1] * dt * bt[n] * ut;
                    coef[r * w + k] = cf;
                }
            }
        }
        for t in (start..end).rev() {
            let r = t - start;
            let h_prev = &states[r * w..(r + 1) * w];
            let h_t = &states[(r + 1) * w..(r + 2) * w];
            let bt = &inp.b[t * state..(t + 1) * state];
            let ct = &inp.c[t * state..(t + 1) * state];
            for d in 0..inner {
                let ti = t * inner + d;
                let gyd = gy[ti];
                let ut = inp.u[ti];
                let dt = inp.delta[ti];
                g.u[ti] += inp.d[d] * gyd;
                g.d[d] += gyd * ut;
                for n in 0..state {
                    let k = d * state + n;
                    g.c[t * state + n] += gyd * h_t[k];
                    gh[k] += gyd * ct[n];

                    let a = inp.a[k];
                    let z = a * dt;
                    let [abar, ph, dph] = coef[r * w + k];
                    let g_abar = gh[k] * h_prev[k];
                    let g_bbar = gh[k] * ut;
                    g.u[ti] += gh[k] * ph * dt * bt[n];
                    g.delta[ti] += g_abar * a * abar + g_bbar * bt[n] * (ph + z * dph);
                    g.a[k] += g_abar * dt * abar + g_bbar * dt * dt * bt[n] * dph;
                    g.b[t * state + n] += g_bbar * dt * ph;
                    gh[k] *= abar;
                }
            }
        }
    }
    Ok(g)
}

fn dims_of(u: &Tensor, a_log: &Tensor) -> ScanDims {
    ScanDims {
        len: u.rows(),
        inner: u.cols(),
        state: a_log.cols(),
    }
}

struct ScanRule {
    simplified_b: bool,
    checkpoints: Vec<f64>,
}

impl BackwardRule for ScanRule {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        gy: &[f64],
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<f64>>>> {
        let [u, delta, a_log, b, c, d] = inputs else {
            return Err(Error::shape("selective_scan", "expected six inputs"));
        };
        let a: Vec<f64> = a_log.data().iter().map(|&v| -libm::exp(v)).collect();
        let inp = ScanInputs {
            dims: dims_of(u, a_log),
            u: u.data(),
            delta: delta.data(),
            a: &a,
            b: b.data(),
            c: c.data(),
            d: d.data(),
            simplified_b: self.simplified_b,
        };
        let g = scan_backward_from(&inp, gy, &self.checkpoints)?;
        let g_alog: Vec<f64> = g.a.iter().zip(&a).map(|(ga, a)| ga * a).collect();
        let all = [g.u, g.delta, g_alog, g.b, g.c, g.d];
        Ok(all
            .into_iter()
            .zip(needs)
            .map(|(v, &n)| n.then_some(v))
            .collect())
    }
}

/// Records a scan on the tape: `u, delta: [L, inner]`, `a_log: [inner, N]`,
/// `b, c: [L, N]`, `d: [inner]`.
pub fn scan_on_tape(
    tape: &mut GradTape,
    [u, delta, a_log, b, c, d]: [Var; 6],
    simplified_b: bool,
) -> Result<Var> {
    let (tu, ta) = (tape.value(u), tape.value(a_log));
    let dims = dims_of(tu, ta);
    let a: Vec<f64> = ta.data().iter().map(|&v| -libm::exp(v)).collect();
    let inp = ScanInputs {
        dims,
        u: tu.data(),
        delta: tape.value(delta).data(),
        a: &a,
        b: tape.value(b).data(),
        c: tape.value(c).data(),
        d: tape.value(d).data(),
        simplified_b,
    };
    let (y, checkpoints) = scan_forward_checkpointed(&inp)?;
    let y = Tensor::new([dims.len, dims.inner], y)?;
    tape.custom(
        &[u, delta, a_log, b, c, d],
        y,
        Box::new(ScanRule {
            simplified_b,
            checkpoints,
        }),
    )
}

/// Tape handles of a [`SelectiveSsmParams`].
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub a_log: Var,
    pub d: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub w_dt_down: Var,
    pub w_dt_up: Var,
    pub dt_bias: Var,
}

impl SsmVars {
    pub fn bind(tape: &mut GradTape, p: &SelectiveSsmParams) -> Self {
        SsmVars {
            a_log: tape.param(p.a_log.clone()),
            d: tape.param(p.d.clone()),
            w_b: tape.param(p.w_b.clone()),
            w_c: tape.param(p.w_c.clone()),
            w_dt_down: tape.param(p.w_dt_down.clone()),
            w_dt_up: tape.param(p.w_dt_up.clone()),
            dt_bias: tape.param(p.dt_bias.clone()),
        }
    }
}

/// The full selective SSM on the tape: input-dependent `B, C, Δ` followed
/// by the scan.
pub fn selective_ssm_on_tape(
    tape: &mut GradTape,
    x: Var,
    p: &SsmVars,
    simplified_b: bool,
) -> Result<Var> {
    let b = tape.matmul(x, p.w_b)?;
    let c = tape.matmul(x, p.w_c)?;
    let low = tape.matmul(x, p.w_dt_down)?;
    let pre = tape.linear(low, p.w_dt_up, Some(p.dt_bias))?;
    let delta = tape.softplus(pre)?;
    scan_on_tape(tape, [x, delta, p.a_log, b, c, p.d], simplified_b)
}

struct Prepared {
    dims: ScanDims,
    a: Vec<f64>,
    b: Tensor,
    c: Tensor,
    delta: Tensor,
}

impl Prepared {
    fn new(x: &Tensor, p: &SelectiveSsmParams) -> Result<Self> {
        let (b, c, delta) = selective_parameters(x, p)?;
        Ok(Prepared {
            dims: ScanDims {
                len: x.rows(),
                inner: p.inner(),
                state: p.state(),
            },
            a: p.a(),
            b,
            c,
            delta,
        })
    }

    fn inputs<'a>(
        &'a self,
        x: &'a Tensor,
        p: &'a SelectiveSsmParams,
        simplified_b: bool,
    ) -> ScanInputs<'a, f64> {
        ScanInputs {
            dims: self.dims,
            u: x.data(),
            delta: self.delta.data(),
            a: &self.a,
            b: self.b.data(),
            c: self.c.data(),
            d: p.d.data(),
            simplified_b,
        }
    }
}

/// Selective SSM applied to `x: [L, inner]` by the sequential scan.
pub fn ssm_scan(x: &Tensor, p: &SelectiveSsmParams, simplified_b: bool) -> Result<Tensor> {
    let prep = Prepared::new(x, p)?;
    Tensor::new(x.shape(), scan_forward(&prep.inputs(x, p, simplified_b))?)
}

/// Hidden states `h_1..h_L` of [`ssm_scan`], `[L, inner, N]`.
pub fn ssm_hidden_states(x: &Tensor, p: &SelectiveSsmParams, simplified_b: bool) -> Result<Tensor> {
    let prep = Prepared::new(x, p)?;
    Tensor::new(
        [x.rows(), p.inner(), p.state()],
        scan_states(&prep.inputs(x, p, simplified_b))?,
    )
}

fn check_oracle_len(op: &'static str, len: usize) -> Result<()> {
    if len > MAX_ORACLE_LEN {
        return Err(Error::TooLong {
            op,
            len,
            max: MAX_ORACLE_LEN,
        });
    }
    Ok(())
}

/// Per-step `(Ā, B̄)`, each `[L, inner, N]`.
fn discretized(prep: &Prepared, simplified_b: bool) -> (Vec<f64>, Vec<f64>) {
    let ScanDims { len, inner, state } = prep.dims;
    let mut abar = Vec::with_capacity(len * inner * state);
    let mut bbar = Vec::with_capacity(len * inner * state);
    for t in 0..len {
        for d in 0..inner {
            let (ab, bb) = super::zoh_discretize(
                &prep.a[d * state..(d + 1) * state],
                &prep.b.data()[t * state..(t + 1) * state],
                prep.delta.data()[t * inner + d],
                simplified_b,
            )
            .expect("softplus step is positive");
            abar.extend(ab);
            bbar.extend(bb);
        }
    }
    (abar, bbar)
}

/// The same map as [`ssm_scan`], computed by materialising the
/// lower-triangular operator `M[t][i] = (∏_{j=i+1}^{t} Ā_j) B̄_i` and
/// applying it. `O(L²)`; test oracle only.
pub fn ssm_matrix_form(x: &Tensor, p: &SelectiveSsmParams, simplified_b: bool) -> Result<Tensor> {
    check_oracle_len("ssm_matrix_form", x.rows())?;
    let prep = Prepared::new(x, p)?;
    let ScanDims { len, inner, state } = prep.dims;
    let (abar, bbar) = discretized(&prep, simplified_b);
    let at = |t: usize, d: usize, n: usize| (t * inner + d) * state + n;
    // op[t][i] for one (d, n) channel
    let mut op = vec![0.0; len * len];
    let mut y = vec![0.0; len * inner];
    for d in 0..inner {
        for n in 0..state {
            for i in 0..len {
                let mut prod = bbar[at(i, d, n)];
                op[i * len + i] = prod;
                for t in i + 1..len {
                    prod *= abar[at(t, d, n)];
                    op[t * len + i] = prod;
                }
            }
            for t in 0..len {
                let mut h = 0.0;
                for i in 0..=t {
                    h += op[t * len + i] * x.at(i, d);
                }
                y[t * inner + d] += prep.c.at(t, n) * h;
            }
        }
        for t in 0..len {
            y[t * inner + d] += p.d.data()[d] * x.at(t, d);
        }
    }
    Tensor::new(x.shape(), y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransferMode {
    /// `T_{i,j} = exp(Σ_{k=j+1}^{i} Δ_k A)` with `Δ = softplus(L_Δ)`.
    Exact,
    /// The exponent sums `L_Δ(x_k) A` over steps with `L_Δ(x_k) > 0` only,
    /// i.e. softplus replaced by ReLU.
    ReluApprox,
}

/// Per-channel transfer matrix `W[i][j] = C_i T_{i,j} B̄_jᵀ` (residual
/// excluded) with its factors.
#[derive(Clone, Debug)]
pub struct TransferMatrixView {
    pub dims: ScanDims,
    /// `[L, L, inner]`
    pub w: Vec<f64>,
    /// `Q_i = C_i`, `[L, N]`
    pub q: Vec<f64>,
    /// `[L, L, inner, N]`, zero above the diagonal
    pub t: Vec<f64>,
    /// `K_j = B̄_jᵀ`, `[L, inner, N]`
    pub k: Vec<f64>,
}

impl TransferMatrixView {
    pub fn at(&self, i: usize, j: usize, d: usize) -> f64 {
        let ScanDims { len, inner, .. } = self.dims;
        self.w[(i * len + j) * inner + d]
    }

    /// `(W x)_{i,d} = Σ_j W[i][j][d] x_{j,d}`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let ScanDims { len, inner, .. } = self.dims;
        if x.shape() != [len, inner] {
            return Err(Error::shape(
                "transfer apply",
                format!("{:?} vs [{len}, {inner}]", x.shape()),
            ));
        }
        let mut y = vec![0.0; len * inner];
        for i in 0..len {
            for j in 0..=i {
                for d in 0..inner {
                    y[i * inner + d] += self.at(i, j, d) * x.at(j, d);
                }
            }
        }
        Tensor::new([len, inner], y)
    }
}

pub fn transfer_matrix(
    x: &Tensor,
    p: &SelectiveSsmParams,
    mode: TransferMode,
    simplified_b: bool,
) -> Result<TransferMatrixView> {
    check_oracle_len("transfer_matrix", x.rows())?;
    let prep = Prepared::new(x, p)?;
    let dims = prep.dims;
    let ScanDims { len, inner, state } = dims;
    let (_, k) = discretized(&prep, simplified_b);
    let rate = match mode {
        TransferMode::Exact => prep.delta.data().to_vec(),
        TransferMode::ReluApprox => p
            .delta_preactivation(x)?
            .data()
            .iter()
            .map(|&v| v.max(0.0))
            .collect(),
    };
    let mut t = vec![0.0; len * len * inner * state];
    let mut w = vec![0.0; len * len * inner];
    for d in 0..inner {
        for n in 0..state {
            let a = prep.a[d * state + n];
            for j in 0..len {
                let mut expo = 0.0;
                for i in j..len {
                    if i > j {
                        expo += rate[i * inner + d] * a;
                    }
                    let tij = libm::exp(expo);
                    t[((i * len + j) * inner + d) * state + n] = tij;
                    w[(i * len + j) * inner + d] +=
                        prep.c.at(i, n) * tij * k[(j * inner + d) * state + n];
                }
            }
        }
    }
    Ok(TransferMatrixView {
        dims,
        w,
        q: prep.c.data().to_vec(),
        t,
        k,
    })
}

/// Outcome of [`block_partition_probe`].
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionReport {
    /// Max `|Δh_t|`, `t ≤ L/2`, after perturbing the second half.
    pub first_half_change_from_second: f64,
    /// Max `|Δh_t|`, `t > L/2`, after perturbing the second half.
    pub second_half_change_from_second: f64,
    /// Max `|Δh_t|`, `t > L/2`, after perturbing the first half.
    pub second_half_change_from_first: f64,
    /// Max `|h_t - h'_t|`, `t ≤ L/2`, where `h'` is the scan of the first
    /// half alone.
    pub first_half_self_contained: f64,
}

/// Probes the block structure of the hidden-state operator: with the
/// sequence split into halves `[l₁; l₂]`, the first-half states depend on
/// `l₁` only while the second-half states depend on both.
pub fn block_partition_probe<R: Rng + ?Sized>(
    x: &Tensor,
    p: &SelectiveSsmParams,
    simplified_b: bool,
    rng: &mut R,
) -> Result<PartitionReport> {
    let len = x.rows();
    if len % 2 != 0 || len == 0 {
        return Err(Error::invalid(
            "block_partition_probe",
            format!("length {len} is not even"),
        ));
    }
    let half = len / 2;
    let inner = x.cols();
    let w = inner * p.state();
    let base = ssm_hidden_states(x, p, simplified_b)?;
    let perturbed = |rows: core::ops::Range<usize>, rng: &mut R| -> Result<Tensor> {
        let mut data = x.data().to_vec();
        for v in &mut data[rows.start * inner..rows.end * inner] {
            let z: f64 = StandardNormal.sample(rng);
            *v += z;
        }
        ssm_hidden_states(&Tensor::new(x.shape(), data)?, p, simplified_b)
    };
    let max_diff = |a: &Tensor, b: &Tensor, rows: core::ops::Range<usize>| -> f64 {
        a.data()[rows.start * w..rows.end * w]
            .iter()
            .zip(&b.data()[rows.start * w..rows.end * w])
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max)
    };
    let from_second = perturbed(half..len, rng)?;
    let from_first = perturbed(0..half, rng)?;
    let first = Tensor::new([half, inner], x.data()[..half * inner].to_vec())?;
    let alone = ssm_hidden_states(&first, p, simplified_b)?;
    Ok(PartitionReport {
        first_half_change_from_second: max_diff(&base, &from_second, 0..half),
        second_half_change_from_second: max_diff(&base, &from_second, half..len),
        second_half_change_from_first: max_diff(&base, &from_first, half..len),
        first_half_self_contained: max_diff(&base, &alone, 0..half),
    })
}
