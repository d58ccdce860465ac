//! Eager reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation computes its value immediately and appends a record to
//! the tape. [`GradTape::backward`] then walks the records in exact reverse
//! order, accumulating gradients into every node that needs one. A tape
//! holds one forward pass; build a fresh tape per training step (or per
//! sample, and sum the resulting gradients in a fixed order).

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, gemm};
use super::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Softplus,
    Relu,
    Gelu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => kernels::silu(x),
            Activation::Softplus => kernels::softplus(x),
            Activation::Relu => x.max(0.0),
            Activation::Gelu => kernels::gelu(x),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => kernels::silu_grad(x),
            Activation::Softplus => kernels::sigmoid(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => kernels::gelu_grad(x),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Softplus => "softplus",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        }
    }
}

/// Backward rule for an operation implemented outside the tape (the
/// selective scan, Chamfer loss, ...).
pub trait BackwardRule {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product: one entry per input, `None` where
    /// `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<f64>>>>;
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    MatMulNt {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        row: Var,
    },
    MulRow {
        x: Var,
        row: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    Map {
        x: Var,
        f: Activation,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        beta: Var,
    },
    CausalConv {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    GroupMax {
        x: Var,
        argmax: Vec<usize>,
    },
    GroupRepeat {
        x: Var,
        group: usize,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    MeanRows {
        x: Var,
    },
    Sum {
        x: Var,
    },
    CausalSoftmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn BackwardRule>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward pass.
pub struct GradTape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`GradTape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn row_col(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl GradTape {
    /// Non-finite results are reported as errors when debug assertions are
    /// on; see [`GradTape::with_finite_checks`].
    pub fn new() -> Self {
        GradTape {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`GradTape::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, deps: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = deps.iter().any(|d| self.nodes[d.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// `a[m,k] · b[k,n]`; leading axes of `a` are flattened into `m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = row_col(self.value(a));
        let bs = self.value(b).shape();
        let n = match bs {
            [bk, n] if *bk == k => *n,
            _ => return Err(Error::shape("matmul", format!("[{m}, {k}] x {bs:?}"))),
        };
        let mut out = vec![0.0; m * n];
        kernels::matmul(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.push(
            "matmul",
            Tensor::new([m, n], out)?,
            Op::MatMul { a, b, m, k, n },
            &[a, b],
        )
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = row_col(self.value(a));
        let (n, kb) = row_col(self.value(b));
        if k != kb {
            return Err(Error::shape("matmul_nt", format!("inner dims {k} vs {kb}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            0.0,
            &mut out,
            m,
            k,
            n,
        );
        self.push(
            "matmul_nt",
            Tensor::new([m, n], out)?,
            Op::MatMulNt { a, b, m, k, n },
            &[a, b],
        )
    }

    /// `x · w + b` along the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub { a, b }, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul { a, b }, &[a, b])
    }

    fn row_broadcast(
        &self,
        name: &'static str,
        x: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let tx = self.value(x);
        let tr = self.value(row);
        let c = tx.cols();
        if tr.len() != c {
            return Err(Error::shape(
                name,
                format!("row of {} for width {c}", tr.len()),
            ));
        }
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (v, r) in chunk.iter_mut().zip(tr.data()) {
                *v = f(*v, *r);
            }
        }
        Tensor::new(tx.shape(), data)
    }

    /// Adds a `[C]` vector to every row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let v = self.row_broadcast("add_row", x, row, |a, b| a + b)?;
        self.push("add_row", v, Op::AddRow { x, row }, &[x, row])
    }

    /// Multiplies every row elementwise by a `[C]` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let v = self.row_broadcast("mul_row", x, row, |a, b| a * b)?;
        self.push("mul_row", v, Op::MulRow { x, row }, &[x, row])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let v = self.value(x).map(|a| a * s);
        self.push("scale", v, Op::Scale { x, s }, &[x])
    }

    pub fn activation(&mut self, x: Var, f: Activation) -> Result<Var> {
        let v = self.value(x).map(|a| f.apply(a));
        self.push(f.name(), v, Op::Map { x, f }, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Silu)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Softplus)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(
                "layer_norm",
                format!("affine params must have {c} entries"),
            ));
        }
        let mut out = vec![0.0; tx.len()];
        let (xhat, rstd) = kernels::layer_norm_rows(
            tx.data(),
            c,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            &mut out,
        );
        let v = Tensor::new(tx.shape(), out)?;
        self.push(
            "layer_norm",
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Causal depthwise convolution, `x: [L, C]`, `kernel: [K, C]`.
    pub fn causal_conv(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let v =
            kernels::causal_depthwise_conv1d(self.value(x), self.value(kernel), self.value(bias))?;
        self.push(
            "causal_conv",
            v,
            Op::CausalConv { x, kernel, bias },
            &[x, kernel, bias],
        )
    }

    /// Channel-wise max over consecutive groups of `group` rows:
    /// `[G·group, C] → [G, C]`. Ties pick the first row.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, c) = row_col(self.value(x));
        if group == 0 || r % group != 0 {
            return Err(Error::shape(
                "group_max",
                format!("{r} rows in groups of {group}"),
            ));
        }
        let data = self.value(x).data();
        let g = r / group;
        let mut out = vec![f64::NEG_INFINITY; g * c];
        let mut argmax = vec![0usize; g * c];
        for gi in 0..g {
            for ri in gi * group..(gi + 1) * group {
                for ci in 0..c {
                    let v = data[ri * c + ci];
                    if v > out[gi * c + ci] {
                        out[gi * c + ci] = v;
                        argmax[gi * c + ci] = ri;
                    }
                }
            }
        }
        let v = Tensor::new([g, c], out)?;
        self.push("group_max", v, Op::GroupMax { x, argmax }, &[x])
    }

    /// Repeats each row `group` times: `[G, C] → [G·group, C]`.
    pub fn group_repeat(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, c) = row_col(self.value(x));
        if group == 0 {
            return Err(Error::shape("group_repeat", "group must be positive"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * group * c);
        for row in src.chunks(c) {
            for _ in 0..group {
                out.extend_from_slice(row);
            }
        }
        let v = Tensor::new([r * group, c], out)?;
        self.push("group_repeat", v, Op::GroupRepeat { x, group }, &[x])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = row_col(self.value(a));
        let (rb, cb) = row_col(self.value(b));
        if ra != rb {
            return Err(Error::shape("concat_cols", format!("{ra} vs {rb} rows")));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let v = Tensor::new([ra, ca + cb], out)?;
        self.push("concat_cols", v, Op::ConcatCols { a, b }, &[a, b])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = row_col(self.value(x));
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{} of {c}", start + len),
            ));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for row in d.chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let v = Tensor::new([r, len], out)?;
        self.push("slice_cols", v, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat_rows input"))?;
        let c = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(Error::shape(
                    "concat_rows",
                    format!("width {} vs {c}", t.cols()),
                ));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let v = Tensor::new([rows, c], out)?;
        self.push(
            "concat_rows",
            v,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    /// `out[i] = x[index[i]]` (rows); indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = row_col(self.value(x));
        if index.is_empty() {
            return Err(Error::Empty("gather_rows index"));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {r}")));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        let v = Tensor::new([index.len(), c], out)?;
        self.push(
            "gather_rows",
            v,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        )
    }

    /// Mean over rows: `[R, C] → [1, C]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = row_col(self.value(x));
        let mut out = vec![0.0; c];
        for row in self.value(x).data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let v = Tensor::new([1, c], out)?;
        self.push("mean_rows", v, Op::MeanRows { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Row-wise softmax of a square score matrix restricted to `j <= i`;
    /// entries above the diagonal are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = row_col(self.value(x));
        if r != c {
            return Err(Error::shape(
                "causal_softmax",
                format!("scores must be square, got {r}x{c}"),
            ));
        }
        let d = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..i * c + i + 1];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..=i {
                let e = libm::exp(row[j] - mx);
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..=i {
                out[i * c + j] /= z;
            }
        }
        let v = Tensor::new([r, c], out)?;
        self.push("causal_softmax", v, Op::CausalSoftmax { x }, &[x])
    }

    /// Mean softmax cross-entropy of `logits: [R, K]` against one label per row.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, k) = row_col(self.value(logits));
        if labels.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {r} rows", labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("label {bad} with {k} classes"),
            ));
        }
        let d = self.value(logits).data();
        let mut probs = vec![0.0; r * k];
        let mut loss = 0.0;
        for i in 0..r {
            let row = &d[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| libm::exp(v - mx)).sum();
            let lz = libm::log(z) + mx;
            for j in 0..k {
                probs[i * k + j] = libm::exp(row[j] - lz);
            }
            loss += lz - row[labels[i]];
        }
        let v = Tensor::scalar(loss / r as f64);
        self.push(
            "cross_entropy",
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Records an externally computed operation with its own backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor,
        rule: Box<dyn BackwardRule>,
    ) -> Result<Var> {
        let name = rule.name();
        self.push(
            name,
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            inputs,
        )
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// depends on a [`GradTape::param`] leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = self.slot(grads, a) {
                    gemm(1.0, g, false, val(b).data(), true, 1.0, ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, b) {
                    gemm(1.0, val(a).data(), true, g, false, 1.0, gb, k, m, n);
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if let Some(ga) = self.slot(grads, a) {
                    gemm(1.0, g, false, val(b).data(), false, 1.0, ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, b) {
                    gemm(1.0, g, true, val(a).data(), false, 1.0, gb, n, m, k);
                }
            }
            &Op::Add { a, b } => {
                for (v, sign) in [(a, 1.0), (b, 1.0)] {
                    if let Some(gv) = self.slot(grads, v) {
                        axpy(sign, g, gv);
                    }
                }
            }
            &Op::Sub { a, b } => {
                for (v, sign) in [(a, 1.0), (b, -1.0)] {
                    if let Some(gv) = self.slot(grads, v) {
                        axpy(sign, g, gv);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if let Some(ga) = self.slot(grads, a) {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(val(b).data()) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(val(a).data()) {
                        *o += gi * ai;
                    }
                }
            }
            &Op::AddRow { x, row } => {
                if let Some(gx) = self.slot(grads, x) {
                    axpy(1.0, g, gx);
                }
                if let Some(gr) = self.slot(grads, row) {
                    let c = gr.len();
                    for chunk in g.chunks(c) {
                        axpy(1.0, chunk, gr);
                    }
                }
            }
            &Op::MulRow { x, row } => {
                let r = val(row).data();
                let c = r.len();
                if let Some(gx) = self.slot(grads, x) {
                    for (gx_row, g_row) in gx.chunks_mut(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            gx_row[j] += g_row[j] * r[j];
                        }
                    }
                }
                if let Some(gr) = self.slot(grads, row) {
                    for (x_row, g_row) in val(x).data().chunks(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            gr[j] += g_row[j] * x_row[j];
                        }
                    }
                }
            }
            &Op::Scale { x, s } => {
                if let Some(gx) = self.slot(grads, x) {
                    axpy(s, g, gx);
                }
            }
            &Op::Map { x, f } => {
                if let Some(gx) = self.slot(grads, x) {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(val(x).data()) {
                        *o += gi * f.derivative(*xi);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = val(*gamma).data();
                let c = gm.len();
                if let Some(gb) = self.slot(grads, *beta) {
                    for chunk in g.chunks(c) {
                        axpy(1.0, chunk, gb);
                    }
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dh = vec![0.0; c];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..c {
                            dh[j] = gr[j] * gm[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hr[j];
                        }
                        mean_dh /= c as f64;
                        mean_dh_h /= c as f64;
                        let out = &mut gx[r * c..(r + 1) * c];
                        for j in 0..c {
                            out[j] += rs * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            &Op::CausalConv { x, kernel, bias } => {
                let c = val(x).cols();
                let len = val(x).rows();
                let kd = val(kernel).data();
                let taps = kd.len() / c;
                if let Some(gb) = self.slot(grads, bias) {
                    for chunk in g.chunks(c) {
                        axpy(1.0, chunk, gb);
                    }
                }
                if let Some(gk) = self.slot(grads, kernel) {
                    let xd = val(x).data();
                    for t in 0..len {
                        for j in 0..taps {
                            if t + j + 1 < taps {
                                continue;
                            }
                            let s = t + j + 1 - taps;
                            for ch in 0..c {
                                gk[j * c + ch] += g[t * c + ch] * xd[s * c + ch];
                            }
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, x) {
                    for t in 0..len {
                        for j in 0..taps {
                            if t + j + 1 < taps {
                                continue;
                            }
                            let s = t + j + 1 - taps;
                            for ch in 0..c {
                                gx[s * c + ch] += g[t * c + ch] * kd[j * c + ch];
                            }
                        }
                    }
                }
            }
            Op::GroupMax { x, argmax } => {
                let c = node.value.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, &src) in argmax.iter().enumerate() {
                        gx[src * c + i % c] += g[i];
                    }
                }
            }
            &Op::GroupRepeat { x, group } => {
                let c = node.value.cols();
                if let Some(gx) = self.slot(grads, x) {
                    for (r, chunk) in g.chunks(c).enumerate() {
                        let dst = r / group;
                        axpy(1.0, chunk, &mut gx[dst * c..(dst + 1) * c]);
                    }
                }
            }
            &Op::ConcatCols { a, b } => {
                let ca = val(a).cols();
                let cb = val(b).cols();
                let w = ca + cb;
                if let Some(ga) = self.slot(grads, a) {
                    for (r, chunk) in g.chunks(w).enumerate() {
                        axpy(1.0, &chunk[..ca], &mut ga[r * ca..(r + 1) * ca]);
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for (r, chunk) in g.chunks(w).enumerate() {
                        axpy(1.0, &chunk[ca..], &mut gb[r * cb..(r + 1) * cb]);
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                let c = val(x).cols();
                let len = node.value.cols();
                if let Some(gx) = self.slot(grads, x) {
                    for (r, chunk) in g.chunks(len).enumerate() {
                        axpy(1.0, chunk, &mut gx[r * c + start..r * c + start + len]);
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if let Some(gp) = self.slot(grads, p) {
                        axpy(1.0, &g[offset..offset + n], gp);
                    }
                    offset += n;
                }
            }
            Op::GatherRows { x, index } => {
                let c = node.value.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, &src) in index.iter().enumerate() {
                        axpy(1.0, &g[i * c..(i + 1) * c], &mut gx[src * c..(src + 1) * c]);
                    }
                }
            }
            &Op::MeanRows { x } => {
                let r = val(x).rows() as f64;
                let c = node.value.cols();
                if let Some(gx) = self.slot(grads, x) {
                    for chunk in gx.chunks_mut(c) {
                        axpy(1.0 / r, g, chunk);
                    }
                }
            }
            &Op::Sum { x } => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            &Op::CausalSoftmax { x } => {
                let c = node.value.cols();
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, x) {
                    for i in 0..c {
                        let yr = &y[i * c..i * c + i + 1];
                        let gr = &g[i * c..i * c + i + 1];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..=i {
                            gx[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = val(*logits).cols();
                let r = labels.len() as f64;
                if let Some(gl) = self.slot(grads, *logits) {
                    for (i, &lab) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == lab { 1.0 } else { 0.0 };
                            gl[i * k + j] += g[0] * (probs[i * k + j] - onehot) / r;
                        }
                    }
                }
            }
            Op::Custom { inputs, rule } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let needs: Vec<bool> = inputs
                    .iter()
                    .map(|&v| self.nodes[v.0].requires_grad)
                    .collect();
                let partials = rule.backward(&values, &node.value, g, &needs)?;
                for (&v, part) in inputs.iter().zip(partials) {
                    if let (Some(part), Some(gv)) = (part, self.slot(grads, v)) {
                        if part.len() != gv.len() {
                            return Err(Error::shape(
                                rule.name(),
                                "backward produced a gradient of the wrong size",
                            ));
                        }
                        axpy(1.0, &part, gv);
                    }
                }
            }
        }
        Ok(())
    }
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
