//! CROSSAN: cross-modal side adapter networks over frozen per-modality
//! encoders, mixture-of-modality-expert fusion, and a causal sequential
//! recommender trained with an in-batch popularity-debiased cross-entropy.
//!
//! The crate is organized bottom-up:
//!
//! - [`diffcore`]: dense tensors with reverse-mode gradients.
//! - [`backbones`]: frozen, seed-determined transformer encoders per modality.
//! - [`hscache`]: on-disk cache of the backbones' pooled hidden states.
//! - [`sidenet`]: cross-modal (and independent) gated side adapter towers.
//! - [`fusion`]: MOMEF top-k fusion plus concat / gated / attention baselines.
//! - [`seqrec`]: causal sequence encoder, debiased loss and the trainer.
//! - [`datakit`]: synthetic multimodal data, file formats and splits.
//! - [`evalkit`]: ranking metrics, KSG mutual information, paired t-test,
//!   parameter accounting.
//! - [`cli`]: the `crossan` command-line driver and ablation harness.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod backbones;
pub mod cli;
pub mod datakit;
pub mod diffcore;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod hscache;
pub mod modality;
pub mod model;
pub mod rng;
pub mod seqrec;
pub mod sidenet;

pub use error::{Error, Result};
pub use modality::Modality;
