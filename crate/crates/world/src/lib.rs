//! Synthetic sprite-video world: deterministic scene generation and
//! rendering with ground-truth semantics, backward flow, and novelty masks,
//! plus the single-frame segmentation model whose encoder features the
//! forecaster operates on.

pub mod data;
pub mod error;
pub mod flow;
pub mod render;
pub mod scene;
pub mod seg;

pub use error::{Result, WorldError};
pub use render::{RenderedFrame, Renderer};
pub use scene::{SceneParams, Sprite, SpriteShape, WorldConfig};
pub use seg::TinySegModel;
