//! Future-KL influenced policy optimization at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`policy`]: a tiny autoregressive softmax policy with exact reverse-mode
//!   gradients and an AdamW optimizer.
//! - [`env`]: synthetic verifiable-reward sequence tasks and length shaping.
//! - [`rollout`]: group sampling under the frozen rollout policy and dynamic
//!   sampling.
//! - [`advantage`]: group-relative advantages and the length-weighted mean
//!   advantage diagnostic.
//! - [`future_kl`]: probability shift, stability mask, discounted Future-KL
//!   (reference and chunked kernels) and the clipped influence weight.
//! - [`objective`]: GRPO, DAPO and FIPO surrogate losses with their clip
//!   diagnostics.
//! - [`trainer`]: the rollout / mini-batch update loop, evaluation, metrics
//!   and checkpoints.

pub mod advantage;
pub mod checkpoint;
pub mod config;
pub mod env;
mod error;
pub mod future_kl;
pub mod gradcheck;
pub mod objective;
pub mod oracle;
pub mod plot;
pub mod policy;
pub mod rollout;
pub mod stats;
pub mod trainer;

pub use error::{FipoError, Result};

/// Version tag written into every persisted artifact (metrics, summaries,
/// checkpoints, configs).
pub const SCHEMA_VERSION: u32 = 1;
