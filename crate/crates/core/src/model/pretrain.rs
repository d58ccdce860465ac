use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{masked_count, ModelConfig};
use super::network::{
    embed_patches_on_tape, encoder_on_tape, indicator_on_tape, linear_on_tape, pos_embed_on_tape,
    stack_on_tape, PreparedCloud, TokenSequence, DECODER,
};
use crate::geometry::{patch_chamfer_on_tape, Point, PointPatch};
use crate::numerics::{Binder, ParamStore};
use crate::{Error, GradTape, Result, Tensor, Var};

/// Visible and masked sequence positions, each ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSplit {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

/// Masks `⌊ratio · n⌋` of `n` positions uniformly without replacement.
pub fn mask_positions(n: usize, ratio: f64, seed: u64) -> Result<MaskSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(
            "mask",
            format!("ratio {ratio} outside (0, 1)"),
        ));
    }
    let m = masked_count(n, ratio);
    if m == 0 || m >= n {
        return Err(Error::invalid(
            "mask",
            format!("ratio {ratio} masks {m} of {n} tokens"),
        ));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_masked = alloc::vec![false; n];
    for &p in &perm[..m] {
        is_masked[p] = true;
    }
    let (masked, visible): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| is_masked[i]);
    Ok(MaskSplit { visible, masked })
}

/// Result of [`mask_tokens`].
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedTokens {
    pub visible: TokenSequence,
    pub masked_positions: Vec<usize>,
    /// Relative `k × 3` coordinates of each masked patch.
    pub masked_ground_truth: Vec<Vec<Point>>,
}

/// Drops a seeded random `⌊ratio · n⌋` of the tokens, keeping survivors in
/// sequence order. `patches` is indexed by the tokens' slots.
pub fn mask_tokens(
    tokens: &TokenSequence,
    patches: &[PointPatch],
    ratio: f64,
    seed: u64,
) -> Result<MaskedTokens> {
    let split = mask_positions(tokens.len(), ratio, seed)?;
    let c = tokens.features.cols();
    let mut data = Vec::with_capacity(split.visible.len() * c);
    for &p in &split.visible {
        data.extend_from_slice(tokens.features.row(p));
    }
    let pick = |v: &[usize]| -> (Vec<_>, Vec<_>, Vec<_>) {
        (
            v.iter().map(|&p| tokens.tags[p]).collect(),
            v.iter().map(|&p| tokens.centers[p]).collect(),
            v.iter().map(|&p| tokens.slots[p]).collect(),
        )
    };
    let (tags, centers, slots) = pick(&split.visible);
    let mut truth = Vec::with_capacity(split.masked.len());
    for &p in &split.masked {
        let patch = patches
            .get(tokens.slots[p])
            .ok_or_else(|| Error::invalid("mask_tokens", format!("token {p} has no patch")))?;
        truth.push(patch.relative_points.clone());
    }
    Ok(MaskedTokens {
        visible: TokenSequence {
            features: Tensor::new([split.visible.len(), c], data)?,
            tags,
            centers,
            slots,
        },
        masked_positions: split.masked,
        masked_ground_truth: truth,
    })
}

/// Tape values of one pretraining forward pass.
#[derive(Clone, Debug)]
pub struct PretrainForward {
    /// Mean Chamfer distance over masked patches.
    pub loss: Var,
    /// `[masked, 3k]` predicted relative patches.
    pub predicted: Var,
    /// `[masked, 3k]` ground truth.
    pub target: Tensor,
    /// Encoder output for the visible tokens, `[visible, C]`.
    pub encoded: Var,
}

/// Encodes the visible tokens of curve `slot`, decodes the full sequence
/// with mask tokens in place and scores the masked patches.
pub fn pretrain_on_tape(
    tape: &mut GradTape,
    bind: &mut Binder<'_>,
    cfg: &ModelConfig,
    prep: &PreparedCloud,
    slot: usize,
    split: &MaskSplit,
) -> Result<PretrainForward> {
    let order = prep
        .orders
        .get(slot)
        .ok_or_else(|| Error::invalid("pretrain", format!("curve slot {slot}")))?;
    let n = order.len();
    if split.masked.is_empty() {
        return Err(Error::Empty("masked positions"));
    }
    if split.visible.len() + split.masked.len() != n
        || split.visible.iter().chain(&split.masked).any(|&p| p >= n)
    {
        return Err(Error::invalid(
            "pretrain",
            "mask split does not cover the sequence",
        ));
    }
    let vis_slots: Vec<usize> = split.visible.iter().map(|&p| order[p]).collect();
    let masked_slots: Vec<usize> = split.masked.iter().map(|&p| order[p]).collect();

    // masking commutes with the per-token embedding, so only visible patches are embedded
    let x = embed_patches_on_tape(tape, bind, prep, &vis_slots)?;
    let x = indicator_on_tape(tape, bind, cfg, x, slot)?;
    let encoded = encoder_on_tape(tape, bind, cfg, x)?;

    let mask_token = bind.var(tape, "decoder.mask_token")?;
    let masks = tape.gather_rows(mask_token, &alloc::vec![0; split.masked.len()])?;
    let joined = tape.concat_rows(&[encoded, masks])?;
    let mut index = alloc::vec![0; n];
    for (i, &p) in split.visible.iter().enumerate() {
        index[p] = i;
    }
    for (j, &p) in split.masked.iter().enumerate() {
        index[p] = split.visible.len() + j;
    }
    let full = tape.gather_rows(joined, &index)?;
    let pos = pos_embed_on_tape(tape, bind, "decoder.pos_embed.", &prep.centers(order))?;
    let full = tape.add(full, pos)?;
    let decoded = stack_on_tape(
        tape,
        bind,
        DECODER,
        cfg.decoder_layers,
        &cfg.decoder_block(),
        full,
    )?;
    let at_masks = tape.gather_rows(decoded, &split.masked)?;
    let predicted = linear_on_tape(tape, bind, "decoder.head.", at_masks)?;
    let target = prep.patch_rows(&masked_slots)?;
    let loss = patch_chamfer_on_tape(tape, predicted, &target, prep.patch_size())?;
    Ok(PretrainForward {
        loss,
        predicted,
        target,
        encoded,
    })
}

/// A masked reconstruction in absolute coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub slot: usize,
    pub split: MaskSplit,
    pub loss: f64,
    /// Predicted relative patches, one per masked position.
    pub predicted: Vec<Vec<Point>>,
    pub ground_truth: Vec<Vec<Point>>,
    /// Points of the visible patches.
    pub visible_points: Vec<Point>,
    /// Visible patches plus predicted patches moved to their centers.
    pub reconstructed_points: Vec<Point>,
}

/// Masks curve `slot` with `seed` and reconstructs it, evaluation mode.
pub fn reconstruct(
    prep: &PreparedCloud,
    cfg: &ModelConfig,
    store: &ParamStore,
    slot: usize,
    seed: u64,
) -> Result<Reconstruction> {
    let split = mask_positions(prep.num_patches(), cfg.mask_ratio, seed)?;
    let mut tape = GradTape::new();
    let mut bind = Binder::new(store);
    let fwd = pretrain_on_tape(&mut tape, &mut bind, cfg, prep, slot, &split)?;
    let rows = |t: &Tensor| -> Vec<Vec<Point>> {
        (0..t.rows())
            .map(|r| t.row(r).chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
            .collect()
    };
    let predicted = rows(tape.value(fwd.predicted));
    let ground_truth = rows(&fwd.target);
    let order = &prep.orders[slot];
    let absolute = |p: usize, rel: &[Point]| -> Vec<Point> {
        let c = prep.patches[order[p]].key_point;
        rel.iter()
            .map(|q| [q[0] + c[0], q[1] + c[1], q[2] + c[2]])
            .collect()
    };
    let mut visible_points = Vec::new();
    for &p in &split.visible {
        visible_points.extend(absolute(p, &prep.patches[order[p]].relative_points));
    }
    let mut reconstructed_points = visible_points.clone();
    for (j, &p) in split.masked.iter().enumerate() {
        reconstructed_points.extend(absolute(p, &predicted[j]));
    }
    Ok(Reconstruction {
        slot,
        loss: tape.value(fwd.loss).data()[0],
        split,
        predicted,
        ground_truth,
        visible_points,
        reconstructed_points,
    })
}
