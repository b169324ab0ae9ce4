//! Prompt-guided patch UNet-VAE with adversarial supervision.
//!
//! The crate covers the full desk-scale pipeline: phantom CT volume
//! generation, prompt-driven patch localization, a UNet-style VAE with dual
//! reconstruction/segmentation heads, a PatchGAN discriminator, the weighted
//! multi-loss training loop with synthetic patch injection at a configurable
//! ratio, the evaluation metric suite, and the ratio-sweep experiment
//! harness with report rendering.

pub mod error;
pub mod experiments;
pub mod localizer;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod phantom;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use localizer::PatchPair;
pub use losses::LossRecord;
pub use models::{ModelConfig, ModelOutput};
pub use phantom::{MaskVolume, PhantomSpec, Volume};
pub use training::RunConfig;
