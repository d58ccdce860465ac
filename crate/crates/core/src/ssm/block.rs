use alloc::format;
use alloc::string::String;
use core::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scan::{selective_ssm_on_tape, SelectiveSsmParams, SsmVars};
use crate::numerics::{kernels::LN_EPS, Binder, ParamStore, Tensor};
use crate::{Error, GradTape, Result, Var};

/// Token mixer inside the gated block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    #[default]
    SelectiveSsm,
    Identity,
    MaskedAttention,
    Mlp,
}

impl BlockKind {
    pub const ALL: [BlockKind; 4] = [
        BlockKind::SelectiveSsm,
        BlockKind::Identity,
        BlockKind::MaskedAttention,
        BlockKind::Mlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::SelectiveSsm => "selective_ssm",
            BlockKind::Identity => "identity",
            BlockKind::MaskedAttention => "masked_attention",
            BlockKind::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        BlockKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::invalid("block kind", format!("unknown block kind `{s}`")))
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Shape of one gated block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub d_model: usize,
    pub expand: usize,
    pub d_state: usize,
    pub dt_rank: usize,
    pub conv_kernel: usize,
    pub kind: BlockKind,
    pub simplified_b: bool,
}

impl BlockConfig {
    /// `expand = 2`, `N = 16`, `dt_rank = ⌈C/16⌉`, `K = 4`.
    pub fn new(d_model: usize, kind: BlockKind) -> Self {
        BlockConfig {
            d_model,
            expand: 2,
            d_state: 16,
            dt_rank: d_model.div_ceil(16),
            conv_kernel: 4,
            kind,
            simplified_b: false,
        }
    }

    pub fn inner(&self) -> usize {
        self.expand * self.d_model
    }

    /// Learnable scalars in one block.
    pub fn parameter_count(&self) -> usize {
        let (c, i, n, r, k) = (
            self.d_model,
            self.inner(),
            self.d_state,
            self.dt_rank,
            self.conv_kernel,
        );
        let wrapper = 2 * c + c * 2 * i + k * i + i + i * c;
        let mixer = match self.kind {
            BlockKind::SelectiveSsm => i * n + i + 2 * i * n + i * r + r * i + i,
            BlockKind::Identity => 0,
            BlockKind::MaskedAttention => 4 * (i * i + i),
            BlockKind::Mlp => i * (i / 2) + i / 2 + (i / 2) * i + i,
        };
        wrapper + mixer
    }
}

fn uniform_linear<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let b = 1.0 / libm::sqrt(fan_in as f64);
    Tensor::uniform([fan_in, fan_out], -b, b, rng)
}

fn uniform_bias<R: Rng + ?Sized>(fan_in: usize, n: usize, rng: &mut R) -> Tensor {
    let b = 1.0 / libm::sqrt(fan_in as f64);
    Tensor::uniform([n], -b, b, rng)
}

/// Inserts one block's parameters under `prefix` (e.g. `encoder.blocks.0.`).
pub fn init_block<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &BlockConfig,
    rng: &mut R,
) -> Result<()> {
    let (c, i, k) = (cfg.d_model, cfg.inner(), cfg.conv_kernel);
    if c == 0 || cfg.expand == 0 || cfg.d_state == 0 || cfg.dt_rank == 0 || k == 0 {
        return Err(Error::invalid("block config", format!("{cfg:?}")));
    }
    let name = |s: &str| -> String { format!("{prefix}{s}") };
    store.insert(name("norm.weight"), Tensor::full([c], 1.0))?;
    store.insert(name("norm.bias"), Tensor::zeros([c]))?;
    store.insert(name("in_proj.weight"), uniform_linear(c, 2 * i, rng))?;
    let kb = 1.0 / libm::sqrt(k as f64);
    store.insert(name("conv.weight"), Tensor::uniform([k, i], -kb, kb, rng))?;
    store.insert(name("conv.bias"), Tensor::uniform([i], -kb, kb, rng))?;
    match cfg.kind {
        BlockKind::SelectiveSsm => {
            let p = SelectiveSsmParams::init(i, cfg.d_state, cfg.dt_rank, rng);
            store.insert(name("ssm.a_log"), p.a_log)?;
            store.insert(name("ssm.d"), p.d)?;
            store.insert(name("ssm.b_proj.weight"), p.w_b)?;
            store.insert(name("ssm.c_proj.weight"), p.w_c)?;
            store.insert(name("ssm.dt_down.weight"), p.w_dt_down)?;
            store.insert(name("ssm.dt_up.weight"), p.w_dt_up)?;
            store.insert(name("ssm.dt_up.bias"), p.dt_bias)?;
        }
        BlockKind::Identity => {}
        BlockKind::MaskedAttention => {
            for proj in ["q", "k", "v", "o"] {
                store.insert(
                    name(&format!("attn.{proj}.weight")),
                    uniform_linear(i, i, rng),
                )?;
                store.insert(name(&format!("attn.{proj}.bias")), uniform_bias(i, i, rng))?;
            }
        }
        BlockKind::Mlp => {
            let h = (i / 2).max(1);
            store.insert(name("mlp.fc1.weight"), uniform_linear(i, h, rng))?;
            store.insert(name("mlp.fc1.bias"), uniform_bias(i, h, rng))?;
            store.insert(name("mlp.fc2.weight"), uniform_linear(h, i, rng))?;
            store.insert(name("mlp.fc2.bias"), uniform_bias(h, i, rng))?;
        }
    }
    store.insert(name("out_proj.weight"), uniform_linear(i, c, rng))?;
    Ok(())
}

/// Reads a block's selective SSM parameters back out of a store.
pub fn ssm_params(store: &ParamStore, prefix: &str) -> Result<SelectiveSsmParams> {
    let get = |s: &str| store.get(&format!("{prefix}ssm.{s}")).cloned();
    Ok(SelectiveSsmParams {
        a_log: get("a_log")?,
        d: get("d")?,
        w_b: get("b_proj.weight")?,
        w_c: get("c_proj.weight")?,
        w_dt_down: get("dt_down.weight")?,
        w_dt_up: get("dt_up.weight")?,
        dt_bias: get("dt_up.bias")?,
    })
}

/// Intermediate values of one block, for probes.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    pub output: Var,
    /// Token-mixer input (after conv and SiLU).
    pub mixer_input: Var,
    /// Token-mixer output, before gating.
    pub mixer_output: Var,
}

/// `out = Linear(Mixer(SiLU(DWConv(Linear(LN z)))) ⊙ SiLU(Linear(LN z))) + z`,
/// with the two input projections fused into one `C → 2·inner` map.
pub fn block_forward(
    tape: &mut GradTape,
    bind: &mut Binder<'_>,
    prefix: &str,
    z: Var,
    cfg: &BlockConfig,
) -> Result<BlockTrace> {
    let i = cfg.inner();
    let mut p = |tape: &mut GradTape, s: &str| bind.var(tape, &format!("{prefix}{s}"));
    let (g, b) = (p(tape, "norm.weight")?, p(tape, "norm.bias")?);
    let zn = tape.layer_norm(z, g, b, LN_EPS)?;
    let in_proj = p(tape, "in_proj.weight")?;
    let proj = tape.matmul(zn, in_proj)?;
    let main = tape.slice_cols(proj, 0, i)?;
    let gate = tape.slice_cols(proj, i, i)?;
    let (cw, cb) = (p(tape, "conv.weight")?, p(tape, "conv.bias")?);
    let main = tape.causal_conv(main, cw, cb)?;
    let main = tape.silu(main)?;
    let gate = tape.silu(gate)?;
    let mixed = match cfg.kind {
        BlockKind::SelectiveSsm => {
            let vars = SsmVars {
                a_log: p(tape, "ssm.a_log")?,
                d: p(tape, "ssm.d")?,
                w_b: p(tape, "ssm.b_proj.weight")?,
                w_c: p(tape, "ssm.c_proj.weight")?,
                w_dt_down: p(tape, "ssm.dt_down.weight")?,
                w_dt_up: p(tape, "ssm.dt_up.weight")?,
                dt_bias: p(tape, "ssm.dt_up.bias")?,
            };
            selective_ssm_on_tape(tape, main, &vars, cfg.simplified_b)?
        }
        BlockKind::Identity => main,
        BlockKind::MaskedAttention => {
            let mut lin = |tape: &mut GradTape, x: Var, n: &str| -> Result<Var> {
                let w = p(tape, &format!("attn.{n}.weight"))?;
                let b = p(tape, &format!("attn.{n}.bias"))?;
                tape.linear(x, w, Some(b))
            };
            let q = lin(tape, main, "q")?;
            let k = lin(tape, main, "k")?;
            let v = lin(tape, main, "v")?;
            let s = tape.matmul_nt(q, k)?;
            let s = tape.scale(s, 1.0 / libm::sqrt(i as f64))?;
            let att = tape.causal_softmax(s)?;
            let ctx = tape.matmul(att, v)?;
            lin(tape, ctx, "o")?
        }
        BlockKind::Mlp => {
            let (w1, b1) = (p(tape, "mlp.fc1.weight")?, p(tape, "mlp.fc1.bias")?);
            let (w2, b2) = (p(tape, "mlp.fc2.weight")?, p(tape, "mlp.fc2.bias")?);
            let h = tape.linear(main, w1, Some(b1))?;
            let h = tape.gelu(h)?;
            tape.linear(h, w2, Some(b2))?
        }
    };
    let gated = tape.mul(mixed, gate)?;
    let out_proj = p(tape, "out_proj.weight")?;
    let out = tape.matmul(gated, out_proj)?;
    let output = tape.add(out, z)?;
    Ok(BlockTrace {
        output,
        mixer_input: main,
        mixer_output: mixed,
    })
}

/// Stand-alone block evaluation on plain tensors.
pub fn mamba_block(
    z: &Tensor,
    store: &ParamStore,
    prefix: &str,
    cfg: &BlockConfig,
) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let mut bind = Binder::new(store);
    let zv = tape.constant(z.clone());
    let out = block_forward(&mut tape, &mut bind, prefix, zv, cfg)?.output;
    Ok(tape.value(out).clone())
}
