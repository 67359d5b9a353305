//! Sparse autoencoder with a frozen core and nested Matryoshka prefixes.

mod checkpoint;
mod masking;
mod matryoshka;
mod objective;
mod params;
mod train;

pub use checkpoint::{
    read_core_rows, write_core_rows, Checkpoint, OptimizerSnapshot, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use masking::{
    apply_threshold_mask, apply_two_group_mask, batch_top_k, l0_counts, l0_stats,
    smallest_selected, MaskedLatentBatch, Regime, SparsityPolicy, SparsityStats, THRESHOLD_DECAY,
};
pub use matryoshka::MatryoshkaConfig;
pub use objective::{
    aux_mask, backward, forward, matryoshka_loss, reconstruct_prefixes, AuxTerm, Forward,
    Gradients, LossBreakdown, LossConfig,
};
pub use params::{encode, InitScheme, LatentBatch, SaeParams};
pub use train::{AdamConfig, Moments, StepReport, TrainConfig, TrainState, TrainingLog};

impl TrainState {
    /// Snapshot suitable for [`Checkpoint::write`].
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            noncore_prefixes: self.config.matryoshka.noncore_prefixes.clone(),
            optimizer: Some(OptimizerSnapshot {
                step: self.step,
                adam: self.config.adam,
                moments: self.moments.clone(),
                dead_tokens: self.dead_tokens.clone(),
            }),
            policy: self.policy,
        }
    }
}
