//! Vision-guided prompt pipeline: learnable context, cross-modal attention
//! over projected visual tokens, FiLM and gated residual modulation, FFN
//! refinement, and classification against frozen stand-in encoders.

mod encoders;
mod model;
mod ops;
mod params;

pub use encoders::{FrozenEncoders, DEFAULT_TAU};
pub use model::{argmax, base_text_features, modulate, BranchOutput, PipelineOutput};
pub use ops::{
    attention_scores, class_logits, class_probabilities, compute_gate, cross_modal_attend,
    encode_image_standin, encode_text_standin, ffn_refine, film_modulate, gated_residual_update,
    project_visual_tokens,
};
pub use params::{
    AttentionParams, ContextBank, ContextMode, FfnParams, FilmParams, ModelDims, PipelineParams,
    Trainable, Variant, CONTEXT_INIT_STD, GATE_BIAS_INIT, TRAINABLE_GROUPS,
};
