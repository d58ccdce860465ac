use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use super::config::{ModelConfig, Stage};
use crate::geometry::{farthest_point_sampling, knn, Point, PointCloud, PointPatch};
use crate::numerics::{kernels::LN_EPS, Binder, ParamStore};
use crate::serialization::{serialize, CurveKind};
use crate::ssm::{block_forward, init_block};
use crate::{Error, GradTape, Result, Tensor, Var};

pub const TOKENIZER: &str = "tokenizer.";
pub const POS_EMBED: &str = "pos_embed.";
pub const INDICATOR: &str = "indicator.";
pub const ENCODER: &str = "encoder.";
pub const CLS_TOKEN: &str = "cls_token";
pub const HEAD: &str = "head.";
pub const DECODER: &str = "decoder.";

/// A cloud after key-point sampling, grouping and serialization.
#[derive(Clone, Debug)]
pub struct PreparedCloud {
    pub points: Vec<Point>,
    /// One patch per key point, in sampling order. Indices into this list
    /// are called slots.
    pub patches: Vec<PointPatch>,
    /// Curves with any random seeds resolved.
    pub curves: Vec<CurveKind>,
    /// Per curve, the slots in serialized order.
    pub orders: Vec<Vec<usize>>,
}

impl PreparedCloud {
    pub fn num_patches(&self) -> usize {
        self.patches.len()
    }

    pub fn patch_size(&self) -> usize {
        self.patches.first().map_or(0, |p| p.relative_points.len())
    }

    pub fn centers(&self, slots: &[usize]) -> Vec<Point> {
        slots.iter().map(|&s| self.patches[s].key_point).collect()
    }

    /// Relative patch points stacked as `[slots · k, 3]`.
    pub fn patch_points(&self, slots: &[usize]) -> Result<Tensor> {
        let k = self.patch_size();
        let mut data = Vec::with_capacity(slots.len() * k * 3);
        for &s in slots {
            data.extend(self.patches[s].relative_points.iter().flatten());
        }
        Tensor::new([slots.len() * k, 3], data)
    }

    /// Relative patch points packed one patch per row, `[slots, 3k]`.
    pub fn patch_rows(&self, slots: &[usize]) -> Result<Tensor> {
        let k = self.patch_size();
        Tensor::new([slots.len(), 3 * k], self.patch_points(slots)?.into_vec())
    }
}

/// Samples key points, groups neighbourhoods and orders them along every
/// configured curve. Without `rng` the first key point is index 0 and random
/// curves keep their configured seeds; with it both are drawn.
pub fn prepare(
    cloud: &PointCloud,
    cfg: &ModelConfig,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<PreparedCloud> {
    cfg.check()?;
    let points = cloud.points();
    if points.len() < cfg.num_patches.max(cfg.patch_size) {
        return Err(Error::invalid(
            "prepare",
            format!(
                "{} points for {} patches of {}",
                points.len(),
                cfg.num_patches,
                cfg.patch_size
            ),
        ));
    }
    let start = match rng.as_deref_mut() {
        Some(r) => r.random_range(0..points.len()),
        None => 0,
    };
    let keys = farthest_point_sampling(points, cfg.num_patches, start)?;
    let mut patches = Vec::with_capacity(keys.len());
    for &ki in &keys {
        let key = points[ki];
        let members = knn(points, &key, cfg.patch_size)?;
        let relative_points = members
            .iter()
            .map(|&j| {
                [
                    points[j][0] - key[0],
                    points[j][1] - key[1],
                    points[j][2] - key[2],
                ]
            })
            .collect();
        patches.push(PointPatch {
            key_point: key,
            relative_points,
            key_index: ki,
            member_indices: members,
        });
    }
    let key_points: Vec<Point> = patches.iter().map(|p| p.key_point).collect();
    let mut curves = Vec::with_capacity(cfg.curves.len());
    let mut orders = Vec::with_capacity(cfg.curves.len());
    for &c in &cfg.curves {
        let c = match (c, rng.as_deref_mut()) {
            (CurveKind::Random(_), Some(r)) => CurveKind::Random(r.next_u64()),
            _ => c,
        };
        orders.push(serialize(&key_points, c, cfg.grid_bits)?.order);
        curves.push(c);
    }
    Ok(PreparedCloud {
        points: points.to_vec(),
        patches,
        curves,
        orders,
    })
}

fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    i: usize,
    o: usize,
    rng: &mut R,
) -> Result<()> {
    let b = 1.0 / libm::sqrt(i as f64);
    store.insert(
        format!("{prefix}weight"),
        Tensor::uniform([i, o], -b, b, rng),
    )?;
    store.insert(format!("{prefix}bias"), Tensor::uniform([o], -b, b, rng))
}

fn init_norm(store: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
    store.insert(format!("{prefix}weight"), Tensor::full([c], 1.0))?;
    store.insert(format!("{prefix}bias"), Tensor::zeros([c]))
}

/// Indicator parameter prefix for curve `slot`, if the mode has one.
pub fn indicator_prefix(cfg: &ModelConfig, slot: usize) -> Option<String> {
    use super::config::IndicatorMode;
    match cfg.indicator {
        IndicatorMode::None => None,
        IndicatorMode::Shared => Some(format!("{INDICATOR}shared.")),
        IndicatorMode::Distinct => Some(format!("{INDICATOR}{slot}.")),
    }
}

/// Fresh parameters for `stage`. Names shared between stages (tokenizer,
/// positional embedding, indicators, encoder) are drawn identically, so a
/// pretraining store can seed a classification store.
pub fn init_model<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    stage: Stage,
    rng: &mut R,
) -> Result<ParamStore> {
    cfg.check()?;
    let c = cfg.embed_dim;
    let [h1, h2, h3] = cfg.tokenizer_widths;
    let mut s = ParamStore::new();
    init_linear(&mut s, "tokenizer.fc1.", 3, h1, rng)?;
    init_linear(&mut s, "tokenizer.fc2.", h1, h2, rng)?;
    init_linear(&mut s, "tokenizer.fc3.", 2 * h2, h3, rng)?;
    init_linear(&mut s, "tokenizer.fc4.", h3, c, rng)?;
    init_linear(&mut s, "pos_embed.fc1.", 3, cfg.pos_hidden, rng)?;
    init_linear(&mut s, "pos_embed.fc2.", cfg.pos_hidden, c, rng)?;
    let mut seen = Vec::new();
    for slot in 0..cfg.curves.len() {
        if let Some(p) = indicator_prefix(cfg, slot) {
            if !seen.contains(&p) {
                s.insert(format!("{p}gamma"), Tensor::full([c], 1.0))?;
                s.insert(format!("{p}beta"), Tensor::zeros([c]))?;
                seen.push(p);
            }
        }
    }
    let enc = cfg.encoder_block();
    for l in 0..cfg.encoder_layers {
        init_block(&mut s, &format!("{ENCODER}blocks.{l}."), &enc, rng)?;
    }
    init_norm(&mut s, "encoder.norm.", c)?;
    match stage {
        Stage::Classify => {
            if cfg.pooling.uses_cls() {
                s.insert(CLS_TOKEN, Tensor::randn([1, c], 0.02, rng))?;
            }
            init_linear(&mut s, "head.fc1.", c, cfg.head_hidden, rng)?;
            init_linear(&mut s, "head.fc2.", cfg.head_hidden, cfg.num_classes, rng)?;
        }
        Stage::Pretrain => {
            s.insert("decoder.mask_token", Tensor::randn([1, c], 0.02, rng))?;
            init_linear(&mut s, "decoder.pos_embed.fc1.", 3, cfg.pos_hidden, rng)?;
            init_linear(&mut s, "decoder.pos_embed.fc2.", cfg.pos_hidden, c, rng)?;
            let dec = cfg.decoder_block();
            for l in 0..cfg.decoder_layers {
                init_block(&mut s, &format!("{DECODER}blocks.{l}."), &dec, rng)?;
            }
            init_norm(&mut s, "decoder.norm.", c)?;
            init_linear(&mut s, "decoder.head.", c, 3 * cfg.patch_size, rng)?;
        }
    }
    Ok(s)
}

pub(crate) fn linear_on_tape(
    tape: &mut GradTape,
    bind: &mut Binder<'_>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w = bind.var(tape, &format!("{prefix}weight"))?;
    let b = bind.var(tape, &format!("{prefix}bias"))?;
    tape.linear(x, w, Some(b))
}

pub(crate) fn norm_on_tape(
    tape: &mut GradTape,
    bind: &mut Binder<'_>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let g = bind.var(tape, &format!("{prefix}weight"))?;
    let b = bind.var(tape, &format!("{prefix}bias"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

/// Mini-PointNet over `[p · k, 3]` relative points, one `C`-token per patch.
pub fn tokenize_on_tape(
    tape: &mut GradTape,
    bind: &mut Binder<'_>,
    points: Var,
    k: usize,
) -> Result<Var> {
    let h = linear_on_tape(tape, bind, "tokenizer.fc1.", points)?;
    let h = tape.relu(h)?;
    let local = linear_on_tape(tape, bind, "tokenizer.fc2.", h)?;
    let global = tape.group_max(local, k)?;
    let global = tape.group_repeat(global, k)?;
    let h = tape.concat_cols(global, local)?;
    let h = linear_on_tape(tape, bind, "tokenizer.fc3.", h)?;
    let h = tape.relu(h)?;
    let h = linear_on_tape(tape, bind, "tokenizer.fc4.", h)?;
    tape.group_max(h, k)
}

/// `3 → hidden → C` MLP with GELU, applied to patch centers.
pub fn pos_embed_on_tape(
    tape: &mut GradTape,
    bind: &mut Binder<'_>,
    prefix: &str,
    centers: &[Point],
) -> Result<Var> {
    let x = tape.constant(Tensor::new(
        [centers.len(), 3],
        centers.iter().flatten().copied().collect(),
    )?);
    let h = linear_on_tape(tape, bind, &format!("{prefix}fc1."), x)?;
    let h = tape.gelu(h)?;
    linear_on_tape(tape, bind, &format!("{prefix}fc2."), h)
}

/// `x ⊙ γ + β` with the parameters of curve `slot`.
pub fn indicator_on_tape(
    tape: &mut GradTape,
    bind: &mut Binder<'_>,
    cfg: &ModelConfig,
    x: Var,
    slot: usize,
) -> Result<Var> {
    if slot >= cfg.curves.len() {
        return Err(Error::invalid(
            "order indicator",
            format!("curve tag {slot} of {}", cfg.curves.len()),
        ));
    }
    match indicator_prefix(cfg, slot) {
        None => Ok(x),
        Some(p) => {
            let g = bind.var(tape, &format!("{p}gamma"))?;
            let b = bind.var(tape, &format!("{p}beta"))?;
            let y = tape.mul_row(x, g)?;
            tape.add_row(y, b)
        }
    }
}

/// Token plus positional embedding for `slots`, in the given order.
pub fn embed_patches_on_tape(
    tape: &mut GradTape,
    bind: &mut Binder<'_>,
    prep: &PreparedCloud,
    slots: &[usize],
) -> Result<Var> {
    let pts = tape.constant(prep.patch_points(slots)?);
    let tok = tokenize_on_tape(tape, bind, pts, prep.patch_size())?;
    let pos = pos_embed_on_tape(tape, bind, POS_EMBED, &prep.centers(slots))?;
    tape.add(tok, pos)
}

/// Encoder input: every curve's serialized, indicator-tagged tokens, in
/// configured curve order, without a class token.
pub fn encoder_input_on_tape(
    tape: &mut GradTape,
    bind: &mut Binder<'_>,
    cfg: &ModelConfig,
    prep: &PreparedCloud,
) -> Result<Var> {
    let all: Vec<usize> = (0..prep.num_patches()).collect();
    let tokens = embed_patches_on_tape(tape, bind, prep, &all)?;
    let mut parts = Vec::with_capacity(prep.orders.len());
    for (slot, order) in prep.orders.iter().enumerate() {
        let seq = tape.gather_rows(tokens, order)?;
        parts.push(indicator_on_tape(tape, bind, cfg, seq, slot)?);
    }
    tape.concat_rows(&parts)
}

/// The block stack under `prefix` followed by its final norm.
pub fn stack_on_tape(
    tape: &mut GradTape,
    bind: &mut Binder<'_>,
    prefix: &str,
    layers: usize,
    block: &crate::ssm::BlockConfig,
    mut x: Var,
) -> Result<Var> {
    for l in 0..layers {
        x = block_forward(tape, bind, &format!("{prefix}blocks.{l}."), x, block)?.output;
    }
    norm_on_tape(tape, bind, &format!("{prefix}norm."), x)
}

pub fn encoder_on_tape(
    tape: &mut GradTape,
    bind: &mut Binder<'_>,
    cfg: &ModelConfig,
    x: Var,
) -> Result<Var> {
    stack_on_tape(
        tape,
        bind,
        ENCODER,
        cfg.encoder_layers,
        &cfg.encoder_block(),
        x,
    )
}

/// Inserts the class token where the pooling mode wants it.
pub fn insert_cls_on_tape(
    tape: &mut GradTape,
    bind: &mut Binder<'_>,
    cfg: &ModelConfig,
    x: Var,
) -> Result<Var> {
    let len = tape.value(x).rows();
    let Some(at) = cfg.pooling.cls_position(len) else {
        return Ok(x);
    };
    let cls = bind.var(tape, CLS_TOKEN)?;
    let mut index: Vec<usize> = (0..len).collect();
    index.insert(at, len);
    let joined = tape.concat_rows(&[x, cls])?;
    tape.gather_rows(joined, &index)
}

/// Reduces `[L, C]` encoder features to `[1, C]`.
pub fn pool_on_tape(tape: &mut GradTape, cfg: &ModelConfig, features: Var) -> Result<Var> {
    use super::config::Pooling;
    let len = tape.value(features).rows();
    if len == 0 {
        return Err(Error::Empty("token sequence"));
    }
    match cfg.pooling {
        Pooling::Avg => tape.mean_rows(features),
        Pooling::Max => tape.group_max(features, len),
        p => {
            let at = p.cls_position(len - 1).unwrap_or(0);
            tape.gather_rows(features, &[at])
        }
    }
}

/// `C → hidden → classes` with GELU; dropout is applied when `rng` is given.
pub fn head_on_tape(
    tape: &mut GradTape,
    bind: &mut Binder<'_>,
    cfg: &ModelConfig,
    pooled: Var,
    rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let h = linear_on_tape(tape, bind, "head.fc1.", pooled)?;
    let mut h = tape.gelu(h)?;
    if let (Some(rng), true) = (rng, cfg.dropout > 0.0) {
        let keep = 1.0 - cfg.dropout;
        let n = tape.value(h).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let m = tape.constant(Tensor::new(tape.value(h).shape().to_vec(), mask)?);
        h = tape.mul(h, m)?;
    }
    linear_on_tape(tape, bind, "head.fc2.", h)
}

/// Full classification forward pass: `[1, classes]` logits.
pub fn classify_on_tape(
    tape: &mut GradTape,
    bind: &mut Binder<'_>,
    cfg: &ModelConfig,
    prep: &PreparedCloud,
    dropout: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let x = encoder_input_on_tape(tape, bind, cfg, prep)?;
    let x = insert_cls_on_tape(tape, bind, cfg, x)?;
    let f = encoder_on_tape(tape, bind, cfg, x)?;
    let pooled = pool_on_tape(tape, cfg, f)?;
    head_on_tape(tape, bind, cfg, pooled, dropout)
}

/// What produced a token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenTag {
    /// Index into the configured curve list.
    Curve(usize),
    Cls,
}

/// A token sequence with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub features: Tensor,
    pub tags: Vec<TokenTag>,
    /// Key point of each token's patch; the origin for a class token.
    pub centers: Vec<Point>,
    /// Patch slot of each token; `usize::MAX` for a class token.
    pub slots: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

/// Mini-PointNet tokens for `patches`, `[patches, C]`.
pub fn tokenize(patches: &[PointPatch], store: &ParamStore) -> Result<Tensor> {
    let k = patches
        .first()
        .ok_or(Error::Empty("patch list"))?
        .relative_points
        .len();
    if k == 0 || patches.iter().any(|p| p.relative_points.len() != k) {
        return Err(Error::invalid(
            "tokenize",
            "patches have inconsistent sizes",
        ));
    }
    let mut tape = GradTape::new();
    let mut bind = Binder::new(store);
    let data: Vec<f64> = patches
        .iter()
        .flat_map(|p| p.relative_points.iter().flatten().copied())
        .collect();
    let x = tape.constant(Tensor::new([patches.len() * k, 3], data)?);
    let t = tokenize_on_tape(&mut tape, &mut bind, x, k)?;
    Ok(tape.value(t).clone())
}

/// Scales and shifts every curve-tagged token by its curve's indicator.
pub fn apply_order_indicator(
    tokens: &TokenSequence,
    store: &ParamStore,
    cfg: &ModelConfig,
) -> Result<TokenSequence> {
    let c = tokens.features.cols();
    let mut out = tokens.clone();
    let data = out.features.data_mut();
    for (i, tag) in tokens.tags.iter().enumerate() {
        let TokenTag::Curve(slot) = *tag else {
            continue;
        };
        if slot >= cfg.curves.len() {
            return Err(Error::invalid(
                "order indicator",
                format!("curve tag {slot} of {}", cfg.curves.len()),
            ));
        }
        if let Some(p) = indicator_prefix(cfg, slot) {
            let g = store.get(&format!("{p}gamma"))?.data();
            let b = store.get(&format!("{p}beta"))?.data();
            for j in 0..c {
                data[i * c + j] = data[i * c + j] * g[j] + b[j];
            }
        }
    }
    Ok(out)
}

fn sequence_layout(
    cfg: &ModelConfig,
    prep: &PreparedCloud,
) -> (Vec<TokenTag>, Vec<Point>, Vec<usize>) {
    let mut tags = Vec::new();
    let mut slots = Vec::new();
    for (c, order) in prep.orders.iter().enumerate() {
        tags.extend(core::iter::repeat(TokenTag::Curve(c)).take(order.len()));
        slots.extend(order.iter().copied());
    }
    if let Some(at) = cfg.pooling.cls_position(tags.len()) {
        tags.insert(at, TokenTag::Cls);
        slots.insert(at, usize::MAX);
    }
    let centers = slots
        .iter()
        .map(|&s| {
            if s == usize::MAX {
                [0.0; 3]
            } else {
                prep.patches[s].key_point
            }
        })
        .collect();
    (tags, centers, slots)
}

/// Final encoder features of a prepared cloud.
pub fn encode_prepared(
    prep: &PreparedCloud,
    cfg: &ModelConfig,
    store: &ParamStore,
) -> Result<TokenSequence> {
    let mut tape = GradTape::new();
    let mut bind = Binder::new(store);
    let x = encoder_input_on_tape(&mut tape, &mut bind, cfg, prep)?;
    let x = insert_cls_on_tape(&mut tape, &mut bind, cfg, x)?;
    let f = encoder_on_tape(&mut tape, &mut bind, cfg, x)?;
    let (tags, centers, slots) = sequence_layout(cfg, prep);
    Ok(TokenSequence {
        features: tape.value(f).clone(),
        tags,
        centers,
        slots,
    })
}

/// Deterministic preparation followed by the encoder.
pub fn encode(cloud: &PointCloud, cfg: &ModelConfig, store: &ParamStore) -> Result<TokenSequence> {
    encode_prepared(&prepare(cloud, cfg, None)?, cfg, store)
}

/// Pooled head logits for encoded features, without dropout.
pub fn classify(
    features: &TokenSequence,
    store: &ParamStore,
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    if features.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    let mut tape = GradTape::new();
    let mut bind = Binder::new(store);
    let f = tape.constant(features.features.clone());
    let pooled = pool_on_tape(&mut tape, cfg, f)?;
    let logits = head_on_tape(&mut tape, &mut bind, cfg, pooled, None)?;
    Ok(tape.value(logits).data().to_vec())
}

/// Logits for a cloud, evaluation mode.
pub fn predict(cloud: &PointCloud, cfg: &ModelConfig, store: &ParamStore) -> Result<Vec<f64>> {
    classify(&encode(cloud, cfg, store)?, store, cfg)
}

/// Runs just the block stack and final norm on a given encoder input.
pub fn run_encoder(x: &Tensor, cfg: &ModelConfig, store: &ParamStore) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let mut bind = Binder::new(store);
    let xv = tape.constant(x.clone());
    let f = encoder_on_tape(&mut tape, &mut bind, cfg, xv)?;
    Ok(tape.value(f).clone())
}

/// The encoder input of a prepared cloud as a plain tensor.
pub fn encoder_input(
    prep: &PreparedCloud,
    cfg: &ModelConfig,
    store: &ParamStore,
) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let mut bind = Binder::new(store);
    let x = encoder_input_on_tape(&mut tape, &mut bind, cfg, prep)?;
    Ok(tape.value(x).clone())
}
