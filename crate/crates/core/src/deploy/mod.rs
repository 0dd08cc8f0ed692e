//! Post-training steps: BN recalibration, pruning to compact models,
//! FLOPs accounting and checkpoint files.

mod checkpoint;
mod flops;
mod prune;
mod recalibrate;

pub use checkpoint::{
    decode, encode, load_checkpoint, save_checkpoint, to_json, Checkpoint, CheckpointError, CompactInfo, FORMAT_VERSION, MAGIC,
};
pub use flops::{compact_flops_report, flops_report, original_size, FlopsReport, LayerCost};
pub use prune::{
    gate_keep_sets, prunable_layers, prune_to_compact, slice_units, CompactModel, OriginalSize, Provenance,
    DEFAULT_KEEP_QUANTILE,
};
pub use recalibrate::{recalibrate_bn, ChannelMoments};
