//! Distilled Matryoshka sparse autoencoders.
//!
//! A Matryoshka SAE reserves a *core* of latents that joins every nested
//! reconstruction and whose encoder rows stay frozen. Training alternates
//! with attribution-guided reselection of that core: latents in the smallest
//! prefix are scored by gradient × activation against a next-token loss, the
//! smallest set covering a fixed fraction of total attribution becomes the
//! next core, and only its encoder directions are carried into a fresh
//! model. The latents that survive the last two cycles form a distilled core
//! that can seed new models at any sparsity target.
//!
//! Modules:
//! - [`sae`]: forward pass, two-group BatchTopK, prefix losses, gradients,
//!   Adam with frozen rows, checkpoints.
//! - [`attribution`]: GxA scoring, quantile aggregation, coverage selection.
//! - [`distill`]: multi-cycle train-and-select driver with lineage tracking.
//! - [`transfer`]: training from a fixed core, evaluation, sweeps.
//! - [`data`]: shard files, the synthetic world, the toy next-token head.
//! - [`report`]: run-directory layout and CSV emission.

pub mod attribution;
pub mod data;
pub mod distill;
pub mod error;
mod io;
pub mod report;
pub mod sae;
pub mod transfer;

pub use error::{Error, Result};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent sub-seed for one purpose (`stream`) of a base seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}
