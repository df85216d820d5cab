//! Small dense tensor engine for volumetric networks.
//!
//! Provides eager, tape-recorded ops with hand-written backward rules, the
//! 3D convolution kernels (a direct reference and fast paths built on
//! register-tiled direct loops and `im2col` + GEMM), and the layers used to assemble residual U-Nets.

pub mod conv;
mod direct;
pub mod error;
pub mod float;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod unet;

pub use conv::{conv3d_backward, conv3d_fast, conv3d_reference, ConvGeometry};
pub use error::{Result, TensorError};
pub use float::Float;
pub use graph::{Gradients, Graph, NodeId};
pub use params::ParamStore;
pub use tensor::Tensor;
pub use unet::{sinusoidal_embedding, UNet, UNetSpec};
