//! Highlight detection and removal for single images.
//!
//! The pipeline predicts per-pixel highlight coefficients with a pyramid
//! extractor, removes highlights with a coarse gated-convolution generator,
//! and refines the result with a second generator that borrows context from
//! highlight-free patches through contextual highlight attention.

pub mod autodiff;
pub mod cha;
pub mod checkpoint;
mod conv;
pub mod error;
pub mod hfe;
pub mod image;
pub mod losses;
pub mod nets;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::{Image, Mask};
pub use tensor::Tensor;
