//! Hybrid Mamba-2 / attention / FFN decoder.

mod checkpoint;
mod config;
mod forward;

pub use checkpoint::{AttnLayerParams, Checkpoint, FfnLayerParams, MambaLayerParams};
pub use config::{count_params, HybridDims, LayerKind, LayerPattern, ModelConfig};
pub use forward::{
    attention_block, build_forward, ffn_block, ffn_forward, gqa_attention_forward, mamba2_forward,
    mamba2_forward_with, mamba_block, model_forward, model_forward_with, ForwardGraph, ForwardOptions,
    MambaVars, ParamVars, TokenBatch, DEFAULT_SCAN_CHUNK,
};
