//! Test-time adaptation of zero-shot image classifiers against sensor degradation.
//!
//! The crate bundles everything needed to run and evaluate the adaptation loop at
//! desk scale: hypersphere embedding arithmetic and the zero-shot head
//! ([`sphere`]), the balanced entropy/uniformity/distillation objective
//! ([`objectives`]), a small vision transformer with low-rank adapters and an EMA
//! teacher ([`encoder`]), the streaming adaptation engine ([`tta`]), synthetic
//! corruptions ([`corrupt`]), diagnostics ([`diagnostics`]), prototype banks
//! ([`prompt_bank`]) and the experiment harness used by the `uninfo` binary
//! ([`experiment`]).
//!
//! Batch-level work (per-image encoder passes, pairwise kernels) runs on rayon when
//! the `parallel` feature is enabled; see [`par`].

pub mod archive;
pub mod corrupt;
pub mod dataset;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod objectives;
pub mod optim;
pub mod par;
pub mod plot;
pub mod pretrain;
pub mod prompt_bank;
pub mod scalar;
pub mod seeds;
pub mod sphere;
pub mod tta;

pub use error::{Error, Result};
pub use scalar::Real;
