//! Attention-gated U-net segmentation with a residual encoder and an
//! active-contour training loss, for small grayscale microscopy datasets.
//!
//! Numerical code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for the common cases.

pub mod archive;
pub mod config;
pub mod data;
pub mod grid;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use grid::{BinaryMask, Grid, ProbabilityMap};
pub use loss::LossConfig;
pub use model::{EncoderKind, ModelConfig};
pub use scalar::Scalar;
pub use training::TrainConfig;

pub type ProbabilityMap32 = grid::ProbabilityMap<f32>;
pub type ProbabilityMap64 = grid::ProbabilityMap<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Sample32 = data::Sample<f32>;
pub type Sample64 = data::Sample<f64>;
pub type Archive32 = archive::TensorArchive<f32>;
pub type Archive64 = archive::TensorArchive<f64>;
