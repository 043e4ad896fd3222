//! Contrastive visual-tactile representation learning on a small
//! reverse-mode tensor engine.
//!
//! A shared contrastive encoder is pretrained on paired visual and tactile
//! images, frozen, and its patch-level projections are then used as
//! cross-attention queries over the fused output of two supervised
//! encoders.

pub mod analysis;
pub mod cec;
pub mod contrastive;
pub mod error;
pub mod fusion;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
