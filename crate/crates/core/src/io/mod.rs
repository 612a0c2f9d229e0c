//! Binary formats for checkpoints and datasets, and the experiment config.

pub mod checkpoint;
pub mod config;
pub mod dataset_file;
pub mod epsnet_file;
pub(crate) mod wire;

pub use checkpoint::{
    checkpoint_size, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint,
    CheckpointMeta,
};
pub use config::ExperimentConfig;
pub use dataset_file::{
    decode_synthetic, encode_synthetic, load_dataset, load_synthetic, save_dataset, save_synthetic,
};
pub use epsnet_file::{load_epsnet, save_epsnet};
