mod checkpoint;
mod config;
mod conv;
mod mask;
mod params;
mod transformer;

pub use checkpoint::{Checkpoint, ProvenanceEntry, Stage, CHECKPOINT_FORMAT_VERSION};
pub use config::ModelConfig;
pub use conv::conv3x3_s2;
pub use mask::{build_attention_mask, AttentionMask, MaskKind};
pub use params::{init_values, Init, ParamStore};
pub use transformer::{
    decays, is_backbone, is_momentum, split_positions, ControlTransformer, ForwardCtx, PolicyHead,
    ACT_TOK, HEAD_BC, HEAD_FWD, HEAD_INV, HEAD_MASK_INV, HEAD_MASK_STATE, HEAD_RTG, MOMENTUM,
    OBS_TOK, RTG_TOK,
};
