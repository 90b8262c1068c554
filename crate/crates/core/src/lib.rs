//! Scene-conditioned human pose affordance generation.
//!
//! The crate contains a small reverse-mode autodiff engine generic over
//! [`Scalar`] (`f32`/`f64`), a frozen feature backbone, the mutual
//! cross-modal attention context encoder, the four generative heads
//! (location, template class, scale, deformation), the template-to-scene
//! transform, pose metrics, and a synthetic dataset generator.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod heads;
pub mod kernels;
pub mod mcma;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod pose;
pub mod raster;
pub mod render;
pub mod scalar;
pub mod templates;
pub mod tensor;
pub mod transform;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use pose::{NormalizedPose, Pose};
pub use raster::Raster;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
