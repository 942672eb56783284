//! Dual-decoder U-net segmentation with uncertainty-driven bottleneck
//! attention (UDBA) and CT-intensity-integrated regularisation (CTR/CTRM).
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the concrete instantiations.

pub mod attention;
pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{LabelMap, Mask, Tensor};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Network32 = model::Network<f32>;
pub type Network64 = model::Network<f64>;
pub type ModelOutput32 = model::ModelOutput<f32>;
pub type ModelOutput64 = model::ModelOutput<f64>;
pub type SliceSample32 = data::SliceSample<f32>;
pub type SliceSample64 = data::SliceSample<f64>;
