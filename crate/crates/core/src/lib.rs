//! Behavioral representation learning from per-user network-flow records.
//!
//! Stages: [`ingest`] flows into hourly traffic, [`featurize`] into 8-dim
//! hourly vectors and 48-hour windows, learn latents with the
//! [`backbone`] transformer, decompose them with the [`sae`], label
//! features with [`interpret`], and relate learned and [`classical`]
//! features to weekly outcomes with [`stats`]. [`probe`] checks what the
//! latents encode and [`synth`] generates a cohort with planted effects.

pub mod backbone;
pub mod classical;
pub mod config;
pub mod error;
pub mod featurize;
pub mod ingest;
pub mod interpret;
pub mod linalg;
pub mod pipeline;
pub mod probe;
pub mod sae;
pub mod stats;
pub mod synth;
pub mod time;

pub use error::{Error, Result};
