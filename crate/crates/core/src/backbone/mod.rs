//! Shared transformer encoder with per-user residual adapters, trained
//! on masked single-hour reconstruction.

pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod train;

pub use checkpoint::{load_adapters, load_backbone, save_adapters, save_backbone};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use model::{loss_and_grad, MaskedBatch};
pub use params::{Adam, AdapterParams, BackboneParams, ModelConfig, Scalar};
pub use train::{
    adapt, adapter_delta_cosines, encode, evaluate_adapters, extract_latents, param_checksum, train_phase1,
    train_phase2, Corpus, TrainConfig, UserLatents,
};

#[cfg(test)]
mod tests;
