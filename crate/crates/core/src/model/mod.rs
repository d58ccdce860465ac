//! The point-cloud network: patch tokenizer, positional embedding, order
//! indicators, encoder stack, classification head and masked decoder.

mod config;
mod network;
mod pretrain;

pub use config::{
    count_parameters, masked_count, order_indicator_count, parameter_breakdown, IndicatorMode,
    ModelConfig, ParameterBreakdown, Pooling, Stage,
};
pub use network::{
    apply_order_indicator, classify, classify_on_tape, embed_patches_on_tape, encode,
    encode_prepared, encoder_input, encoder_input_on_tape, encoder_on_tape, head_on_tape,
    indicator_on_tape, indicator_prefix, init_model, insert_cls_on_tape, pool_on_tape,
    pos_embed_on_tape, predict, prepare, run_encoder, stack_on_tape, tokenize, tokenize_on_tape,
    PreparedCloud, TokenSequence, TokenTag, CLS_TOKEN, DECODER, ENCODER, HEAD, INDICATOR,
    POS_EMBED, TOKENIZER,
};
pub use pretrain::{
    mask_positions, mask_tokens, pretrain_on_tape, reconstruct, MaskSplit, MaskedTokens,
    PretrainForward, Reconstruction,
};
