use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::serialization::{CurveKind, DEFAULT_GRID_BITS};
use crate::ssm::{BlockConfig, BlockKind};
use crate::{Error, Result};

/// How the classification head reads the encoder output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Avg,
    Max,
    /// A learnable class token placed before the sequence.
    ClsBefore,
    /// A class token appended after the sequence.
    ClsAfter,
    /// A class token inserted at position `L / 2`.
    ClsMiddle,
}

impl Pooling {
    pub const ALL: [Pooling; 5] = [
        Pooling::Avg,
        Pooling::Max,
        Pooling::ClsBefore,
        Pooling::ClsAfter,
        Pooling::ClsMiddle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pooling::Avg => "avg",
            Pooling::Max => "max",
            Pooling::ClsBefore => "cls_before",
            Pooling::ClsAfter => "cls_after",
            Pooling::ClsMiddle => "cls_middle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Pooling::ALL
            .into_iter()
            .find(|p| p.name() == s.trim())
            .ok_or_else(|| Error::invalid("pooling", format!("unknown pooling `{s}`")))
    }

    pub fn uses_cls(self) -> bool {
        matches!(
            self,
            Pooling::ClsBefore | Pooling::ClsAfter | Pooling::ClsMiddle
        )
    }

    /// Where the class token sits in a sequence of `len` tokens.
    pub fn cls_position(self, len: usize) -> Option<usize> {
        match self {
            Pooling::ClsBefore => Some(0),
            Pooling::ClsAfter => Some(len),
            Pooling::ClsMiddle => Some(len / 2),
            _ => None,
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Order-indicator variants: none, one scale/shift shared by every curve,
/// or one per curve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorMode {
    None,
    Shared,
    #[default]
    Distinct,
}

impl IndicatorMode {
    pub const ALL: [IndicatorMode; 3] = [
        IndicatorMode::None,
        IndicatorMode::Shared,
        IndicatorMode::Distinct,
    ];

    pub fn name(self) -> &'static str {
        match self {
            IndicatorMode::None => "none",
            IndicatorMode::Shared => "shared",
            IndicatorMode::Distinct => "distinct",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        IndicatorMode::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::invalid("indicator", format!("unknown indicator mode `{s}`")))
    }
}

impl fmt::Display for IndicatorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which parameter groups a store holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Encoder plus masked decoder.
    Pretrain,
    /// Encoder plus classification head.
    Classify,
}

/// Network and tokenization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Points per cloud, `M`.
    pub num_points: usize,
    /// Key points, `n`.
    pub num_patches: usize,
    /// Neighbours per patch, `k`.
    pub patch_size: usize,
    /// Token width, `C`.
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub mask_ratio: f64,
    pub curves: Vec<CurveKind>,
    pub grid_bits: u32,
    pub num_classes: usize,
    pub block_kind: BlockKind,
    pub pooling: Pooling,
    pub indicator: IndicatorMode,
    pub d_state: usize,
    pub expand: usize,
    pub conv_kernel: usize,
    pub simplified_b: bool,
    /// Tokenizer widths `[h1, h2, h3]`: per point `3 → h1 → h2`, then
    /// `2·h2 → h3 → C` after concatenating the pooled patch feature.
    pub tokenizer_widths: [usize; 3],
    pub pos_hidden: usize,
    pub head_hidden: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::full()
    }
}

impl ModelConfig {
    /// Full-size configuration, 15 classes.
    pub fn full() -> Self {
        ModelConfig {
            num_points: 1024,
            num_patches: 64,
            patch_size: 32,
            embed_dim: 384,
            encoder_layers: 12,
            decoder_layers: 4,
            mask_ratio: 0.6,
            curves: vec![CurveKind::Hilbert, CurveKind::TransHilbert],
            grid_bits: DEFAULT_GRID_BITS,
            num_classes: 15,
            block_kind: BlockKind::SelectiveSsm,
            pooling: Pooling::Avg,
            indicator: IndicatorMode::Distinct,
            d_state: 16,
            expand: 2,
            conv_kernel: 4,
            simplified_b: false,
            tokenizer_widths: [128, 256, 512],
            pos_hidden: 128,
            head_hidden: 256,
            dropout: 0.5,
        }
    }

    /// Laptop-scale configuration used by the toy experiments.
    pub fn desk() -> Self {
        ModelConfig {
            num_points: 256,
            num_patches: 32,
            patch_size: 16,
            embed_dim: 64,
            encoder_layers: 4,
            decoder_layers: 2,
            num_classes: 4,
            tokenizer_widths: [32, 64, 128],
            ..ModelConfig::full()
        }
    }

    pub fn block(&self, kind: BlockKind) -> BlockConfig {
        BlockConfig {
            d_model: self.embed_dim,
            expand: self.expand,
            d_state: self.d_state,
            dt_rank: self.embed_dim.div_ceil(16),
            conv_kernel: self.conv_kernel,
            kind,
            simplified_b: self.simplified_b,
        }
    }

    pub fn encoder_block(&self) -> BlockConfig {
        self.block(self.block_kind)
    }

    /// Decoder blocks always use the selective SSM.
    pub fn decoder_block(&self) -> BlockConfig {
        self.block(BlockKind::SelectiveSsm)
    }

    /// Tokens entering the encoder at classification time (class token excluded).
    pub fn sequence_len(&self) -> usize {
        self.num_patches * self.curves.len()
    }

    /// Number of positions masked during pretraining.
    pub fn masked_count(&self) -> usize {
        masked_count(self.num_patches, self.mask_ratio)
    }

    /// Every problem with the configuration, or `Ok` if there are none.
    pub fn validate(&self) -> core::result::Result<(), Vec<alloc::string::String>> {
        let mut errs = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                errs.push(alloc::string::String::from(msg));
            }
        };
        need(self.num_patches >= 2, "num_patches must be at least 2");
        need(self.patch_size >= 1, "patch_size must be positive");
        need(
            self.num_points >= self.num_patches,
            "num_points must be at least num_patches",
        );
        need(
            self.num_points >= self.patch_size,
            "num_points must be at least patch_size",
        );
        need(self.embed_dim >= 1, "embed_dim must be positive");
        need(!self.curves.is_empty(), "curves must not be empty");
        need(
            (1..=crate::serialization::MAX_GRID_BITS).contains(&self.grid_bits),
            "grid_bits out of range",
        );
        need(self.num_classes >= 2, "num_classes must be at least 2");
        need(
            self.mask_ratio > 0.0 && self.mask_ratio < 1.0,
            "mask_ratio must lie in (0, 1)",
        );
        let m = self.masked_count();
        need(
            m >= 1 && m < self.num_patches,
            "mask_ratio leaves no masked or no visible patch",
        );
        need(
            self.d_state >= 1 && self.expand >= 1 && self.conv_kernel >= 1,
            "block sizes must be positive",
        );
        need(
            self.tokenizer_widths.iter().all(|&w| w >= 1),
            "tokenizer widths must be positive",
        );
        need(
            self.pos_hidden >= 1 && self.head_hidden >= 1,
            "hidden widths must be positive",
        );
        need(
            (0.0..1.0).contains(&self.dropout),
            "dropout must lie in [0, 1)",
        );
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    pub(crate) fn check(&self) -> Result<()> {
        self.validate()
            .map_err(|e| Error::invalid("model config", e.join("; ")))
    }
}

/// `⌊ratio · n⌋`, guarded against products like `0.29 · 100` landing just
/// below an integer.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    libm::floor(ratio * n as f64 + 1e-9) as usize
}

/// Learnable scalars per group, in the layout [`super::init_model`] builds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParameterBreakdown {
    pub tokenizer: usize,
    pub pos_embed: usize,
    pub indicator: usize,
    pub encoder: usize,
    pub cls_token: usize,
    pub head: usize,
    pub decoder: usize,
}

impl ParameterBreakdown {
    pub fn total(&self) -> usize {
        self.tokenizer
            + self.pos_embed
            + self.indicator
            + self.encoder
            + self.cls_token
            + self.head
            + self.decoder
    }
}

fn linear_count(i: usize, o: usize) -> usize {
    i * o + o
}

/// Closed-form parameter counts.
pub fn parameter_breakdown(cfg: &ModelConfig, stage: Stage) -> ParameterBreakdown {
    let c = cfg.embed_dim;
    let [h1, h2, h3] = cfg.tokenizer_widths;
    let pos = linear_count(3, cfg.pos_hidden) + linear_count(cfg.pos_hidden, c);
    let mut b = ParameterBreakdown {
        tokenizer: linear_count(3, h1)
            + linear_count(h1, h2)
            + linear_count(2 * h2, h3)
            + linear_count(h3, c),
        pos_embed: pos,
        indicator: order_indicator_count(cfg),
        encoder: cfg.encoder_layers * cfg.encoder_block().parameter_count() + 2 * c,
        ..ParameterBreakdown::default()
    };
    match stage {
        Stage::Classify => {
            b.cls_token = if cfg.pooling.uses_cls() { c } else { 0 };
            b.head =
                linear_count(c, cfg.head_hidden) + linear_count(cfg.head_hidden, cfg.num_classes);
        }
        Stage::Pretrain => {
            b.decoder = c
                + pos
                + cfg.decoder_layers * cfg.decoder_block().parameter_count()
                + 2 * c
                + linear_count(c, 3 * cfg.patch_size);
        }
    }
    b
}

/// Learnable scalars of the classification model.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    parameter_breakdown(cfg, Stage::Classify).total()
}

/// `2·C` per indicator: one per curve, one shared, or none.
pub fn order_indicator_count(cfg: &ModelConfig) -> usize {
    let sets = match cfg.indicator {
        IndicatorMode::None => 0,
        IndicatorMode::Shared => 1,
        IndicatorMode::Distinct => cfg.curves.len(),
    };
    2 * cfg.embed_dim * sets
}
