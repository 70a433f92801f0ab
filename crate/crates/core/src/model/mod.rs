//! Encoder, recovery decoder and refinement decoders assembled into one
//! network, with presets and multiply accounting.

pub mod config;
pub mod flops;
pub mod kernels;
pub mod network;
pub mod params;

pub use config::{ModelConfig, DEFAULT_INIT_STD, IMAGE_CHANNELS};
pub use flops::{count_flops, FlopsReport};
pub use kernels::{dump_first_layer_kernels, KernelDump, KernelRow};
pub use network::{
    recovery_block, refine_block, BnUpdate, DecoderOutputs, EncoderLevel, EncoderState, ForwardPass, Mode, Model,
    RecoveryBlockParams, RefineNorm,
};
pub use params::{BoundParams, Param, ParamStore};
