//! Autoregressive rectified-flow video generation with packed long/short-term
//! memory and single-step train/inference alignment.

pub mod autodiff;
pub mod bench;
mod binio;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod memorypack;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod runconfig;
pub mod tensor;
pub mod trainer;

pub use autodiff::{ParamId, ParamStore, Tape, Var};
pub use config::ModelConfig;
pub use error::{Error, Result};
pub use flow::VelocityField;
pub use memorypack::{FramePackSchedule, MemoryState, SqueezeVariant};
pub use model::{ConditioningBundle, Model, Segment, TokenSequence};
pub use tensor::Tensor;
pub use trainer::{ForcingMode, TrainConfig, Trainer};
