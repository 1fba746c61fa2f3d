//! Cross-modality attention (CMA) for two-stream video classification,
//! implemented from scratch on a minimal reverse-mode autodiff engine.
//!
//! The crate is organized around the pieces of the model:
//!
//! - [`tensor`] / [`graph`]: dense `f64` tensors and the autodiff tape.
//! - [`attention`]: the CMA operation, the residual CMA block, and the
//!   non-local block as its same-modality special case.
//! - [`model`]: the two-branch classifier with cross-wired CMA blocks,
//!   TSN consensus and score fusion.
//! - [`data`]: the synthetic motion-texture binding dataset with analytic
//!   optical flow.
//! - [`train`]: SGD, the iterative freeze-train protocol, evaluation and
//!   the fusion-weight sweep.
//! - [`verify`]: independent oracles (finite differences, double-loop
//!   attention reference) that gate everything else.

pub mod attention;
pub mod config;
pub mod data;
pub mod graph;
pub mod model;
pub mod param;
pub mod pgm;
pub mod tensor;
pub mod train;
pub mod verify;

mod error;

pub use error::{CmaError, Result};
pub use tensor::Tensor;
