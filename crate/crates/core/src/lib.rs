//! Recursive decoder-decoder language modelling at desk scale.
//!
//! The lower half of the network (the self-decoder) uses sliding-window
//! attention and may be looped `T` times with shared weights; its output is
//! projected once into a single global key/value cache that every layer of
//! the upper half (the cross-decoder) attends. The crate contains the model
//! and its baselines, an incremental inference runtime, an analytic serving
//! cost model, a toy training harness and a layer-wise representation
//! profiler.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod error;
pub mod model;
pub mod nn;
pub mod runtime;
pub mod tensor;
pub mod train;

pub use autodiff::{grad_check_fd, Tape, Var};
pub use config::{Block, Family, LoopPosition, ModelConfig, Stage};
pub use error::{Error, Result};
pub use model::{build_model, model_forward, param_count, ModelParams};
pub use tensor::Tensor;
