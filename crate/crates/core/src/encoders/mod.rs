//! Frozen multi-level vision backbone, text encoder and their weight files.

pub mod backbone;
pub mod config;
pub mod layers;
pub mod text;
pub mod weights;

pub use backbone::{
    backbone_forward_all, backbone_forward_multilevel, backbone_layer_forward, init_backbone,
    patchify, LevelFeatures,
};
pub use config::{select_levels, CrossFrameVariant, ModelConfig, Switches};
pub use text::{init_text, text_encode};
