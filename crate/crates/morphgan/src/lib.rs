//! Multi-domain generative model built around learned 2D morph maps: a
//! shared synthesis core produces features, a morph network predicts
//! per-domain displacement fields that warp those features, and shallow
//! per-domain render heads turn the warped features into images. Includes
//! the full training stack (adversarial losses, R1, freezing, weighting),
//! a tape-based reverse-mode autodiff engine, a procedural multi-domain
//! shape dataset with ground-truth warps, and evaluation harnesses.

pub mod error;
pub mod tensor;
pub mod rng;
pub mod kernels;
pub mod tape;
pub mod morphfield;
pub mod io;

pub use error::{Error, Result};
pub use tensor::Tensor;
