//! Two-classification-token vision transformer with a domain-wise token
//! mask and two domain-specific classifier heads.

pub mod checkpoint;
mod config;
mod model;
mod params;

pub use config::ModelConfig;
pub use model::{
    build_token_mask, forward, masked_attention, patchify, token_cosine_similarity,
    ForwardOptions, ForwardOutput, ForwardValues, WinTrModel,
};
pub use params::{is_classifier_param, Attention, Block, Linear, Norm, Params};
