//! Deepfake video detection: blend-based fake synthesis with patch-level supervision, a
//! ViT video encoder with spatio-temporal adapters, and feature-space augmentation of
//! fake samples.

pub mod backbone;
pub mod config;
pub mod data;
pub mod dfa;
pub mod error;
pub mod eval;
pub mod losses;
pub mod patch;
pub mod sam;
pub mod synth;
pub mod trainer;

pub use backbone::{DeepShieldModel, EncoderConfig};
pub use config::Config;
pub use error::{Error, Result};
