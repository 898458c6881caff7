//! Multi-view transformer segmentation, from tensors to training loop.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`kernels`], [`graph`]: dense row-major tensors, numeric
//!   kernels, and a tape-based reverse-mode autodiff engine, generic over
//!   [`scalar::Scalar`] so the same code runs in `f32` (training) and `f64`
//!   (gradient checking).
//! - [`attention`], [`fusion`]: transformer blocks, cross-view fusion
//!   attention, and multi-scale attention over folded/unfolded feature maps.
//! - [`params`], [`network`]: name-keyed parameter store and the two-view
//!   U-shaped segmentation network.
//! - [`synthdata`], [`objectives`], [`trainer`]: synthetic cardiac phantom
//!   generation, losses/metrics, and the Adam training loop.
//! - [`tft`], [`checkpoint`], [`verify`]: tensor file I/O, checkpointing, and
//!   the self-verification suites.

pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod fault;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod network;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod tft;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use rng::Rng;
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;

/// Training precision.
pub type Tensor32 = Tensor<f32>;
/// Gradient-checking precision.
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
