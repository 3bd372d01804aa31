//! Synthetic paired datasets: a smooth inverse-square transfer operator,
//! template-plus-delay paced beats, and SNR-controlled torso observations.

pub mod beat;
pub mod dataset;
pub mod format;
pub mod geometry;

pub use beat::{
    activation_times, apply_forward, empirical_snr_db, synth_epicardial_beat, BeatParams, BodySurfaceRecord,
    EpicardialBeat,
};
pub use dataset::{audit_split, make_dataset, DatasetConfig, DatasetSplit, Pair, SplitAudit};
pub use format::{load_dataset, save_dataset, split_checksum};
pub use geometry::{synth_transfer_matrix, TransferOperator};
