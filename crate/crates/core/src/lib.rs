//! Low-rank plus PTC-structured sparse compression of Transformer weights and
//! an analytical cost model of a photonic accelerator with dense and sparse
//! engines.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the working precision used by the pipeline.

pub mod alloc;
pub mod decompose;
pub mod linalg;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod quant;
pub mod scalar;
pub mod sim;
pub mod store;

pub use scalar::Scalar;

/// Working-precision matrix.
pub type Mat = linalg::Matrix<f64>;
/// Storage-precision matrix.
pub type Mat32 = linalg::Matrix<f32>;
pub type Decomposition = decompose::Decomposition<f64>;
pub type ScalingDiag = decompose::ScalingDiag<f64>;
pub type StructuredSparse = decompose::StructuredSparse<f64>;
pub type Model = model::Model<f64>;
