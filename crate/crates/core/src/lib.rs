//! Conditional diffusion decipherment of ancient glyphs.
//!
//! The pipeline maps a condition glyph to a modern-character rendering with a
//! patch-wise diffusion sampler, polishes the result with a font-to-font
//! refiner, and scores decipherments with a glyph classifier.

pub mod archive;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluator;
pub mod glyph_data;
pub mod graph;
pub mod image;
pub mod kernels;
pub mod lss;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod refiner;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
