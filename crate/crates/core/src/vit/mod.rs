//! Minimal pre-norm vision transformer with explicit backward passes.

mod attention;
mod block;
mod checkpoint;
mod config;
mod model;
mod params;
mod patch;

pub use attention::{attention, attention_backward_batch, attention_batch, AttentionCache};
pub use block::{encoder_block, encoder_block_backward, encoder_block_batch, BlockCache};
pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, model_from_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{ModelConfig, Pooling};
pub use model::{accuracy, cross_entropy, ForwardCache, Model};
pub use params::{
    AttentionParams, EncoderBlockParams, LayerNormParams, MlpParams, ModelParams, ParamVisitor,
};
pub use patch::{patchify, posemb_sincos_2d, resize_posemb, resize_posemb_grid, unpatchify};
