//! A small Vision Transformer laboratory for studying dense (uniform)
//! attention: context-broadcasting token operators, the ViT that hosts them,
//! attention-density diagnostics, and a deterministic desk-scale trainer.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below pin the
//! two precisions the crate is used with. Training defaults to `f32`, oracle
//! tests and gradient checks run in `f64`.

pub mod analysis;
pub mod config;
pub mod context;
pub mod error;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Graph32 = numerics::Graph<f32>;
pub type Graph64 = numerics::Graph<f64>;


pub type Vit32 = model::Vit<f32>;
pub type Vit64 = model::Vit<f64>;
