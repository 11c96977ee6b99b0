//! A shared encoder for multimodal biosignals (EEG, ECG, PPG).
//!
//! Channels of any modality are cut into 32-sample patches, embedded with
//! sensor-type and positional codes, fused per patch by a fixed set of learned
//! latent queries, and passed through a rotary-position temporal Transformer.
//! The same encoder is pretrained with masked patch reconstruction, adapted by
//! full, frozen-encoder or LoRA fine-tuning, and compressed with fake
//! quantization.
//!
//! All arithmetic is `f64` on a small tape-based autodiff engine
//! ([`numerics::Graph`]), so every gradient can be checked against finite
//! differences.

pub mod error;
pub mod heads;
pub mod model;
pub mod numerics;
pub mod patch_embed;
pub mod quant;
pub mod sigproc;
pub mod temporal;
pub mod trainer;
pub mod unifier;
pub mod workbench;

pub use error::{Error, Result};
pub use model::{EncoderConfig, Model, Session};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/signals.md")]
    mod signals {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/quantization.md")]
    mod quantization {}
    #[doc = include_str!("../../../book/src/deployment.md")]
    mod deployment {}
}
