//! One-shot fine-grained style customization on a deterministic toy
//! diffusion backbone: pair construction, block-similarity analysis,
//! two-stage contrastive LoRA training, styled inference, and metrics.
//!
//! Everything runs at desk scale with no external model weights. Real
//! backbones plug in behind [`backbone::BlockedDenoiser`].

pub mod backbone;
pub mod error;
pub mod graph;
pub mod imagebuf;
pub mod lora;
pub mod seed;

pub use error::{Error, Result};
pub use imagebuf::ImageBuf;
