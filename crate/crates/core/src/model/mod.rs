//! The segmentation network, its training loop and checkpoint format.

pub mod checkpoint;
pub mod config;
pub mod network;
pub mod train;

pub use checkpoint::{load_checkpoint, Checkpoint, CheckpointError};
pub use config::{make_divisible, BlockLayout, Expansion, Layout, ModelConfig, StageSpec};
pub use network::{count_parameters, Conv, ConvSpec, Ctx, InvertedResidual, Model, Param, ParamStore, SeparableConv};
pub use train::{
    drive, fit, train_epoch, validate, EarlyStopper, EpochLog, EpochStats, FitOptions, FitOutcome, Observation,
    RunOutcome, Sample, StopReason, Trainer,
};
