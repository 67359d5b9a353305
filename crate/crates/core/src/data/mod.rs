//! Shard files, batch streams, and the synthetic world.

mod batches;
mod shard;
mod split;
mod synthetic;

pub use batches::{gather, stream_batches, BatchIndices, BatchOrder, Epochs};
pub use shard::{shard_path, Dataset, Shard, ShardKind, TargetShard, HEADER_LEN, SHARD_VERSION};
pub use split::PreparedData;
pub use synthetic::{
    firing_rates, gen_synthetic_world, toy_lm_grad, toy_lm_loss, PlantedDictionary, SyntheticWorld,
    SyntheticWorldConfig,
};
