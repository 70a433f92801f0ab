//! Adam, the training loop, checkpoints and the seeded data pipeline.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod trainer;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{decode_records, encode_records, Checkpoint, CheckpointError, Payload, Record};
pub use config::TrainConfig;
pub use data::{derive_seed, Batch, Dataset, Stream};
pub use trainer::{decoder_hole_psnr, EvalSnapshot, StepReport, TrainSummary, Trainer};
