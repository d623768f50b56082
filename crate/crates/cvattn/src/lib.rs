//! Complex-valued transformer toolkit: split-storage complex tensors with
//! reverse-mode autodiff, complex attention variants, whitening layer
//! normalization, an encoder-decoder model, synthetic spectrogram tasks and a
//! deterministic training harness.

pub mod attention;
pub mod autodiff;
pub mod config;
pub mod ctensor;
pub mod error;
pub mod model;
pub mod norm;
pub mod rngs;
pub mod scalar;
pub mod tasks;
pub mod train;
pub mod verify;

pub use attention::{Kernel, Variant};
pub use config::RunConfig;
pub use ctensor::{CTensor, Spd2};
pub use error::{CvError, Result};
pub use model::{Model, ModelConfig};
pub use scalar::{Dtype, Scalar};
pub use tasks::{Sample, Splits, SyntheticSpec, TaskKind};
pub use train::{EvalKind, TrainConfig, TrainOutcome};
pub use verify::CheckRow;

/// Single precision complex tensor.
pub type CTensor32 = CTensor<f32>;
/// Double precision complex tensor.
pub type CTensor64 = CTensor<f64>;
