//! The Vision Transformer: patch embedding, class token, positional
//! embedding, pre-norm MSA and MLP blocks, with context operators injected at
//! configurable sites and attention maps recorded on every pass.

pub mod checkpoint;
mod config;
pub mod gradcheck;
mod params;
mod vit;

pub use config::{CbPlacement, ExtraBlock, Init, LayerMask, ModelConfig, Site, UniformHead};
pub use params::{decays, Params};
pub use vit::{AttentionRecord, Forward, Vit};
