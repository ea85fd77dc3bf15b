//! Unsupervised page segmentation for handwritten document images.
//!
//! The pipeline self-labels patch pairs from unannotated scans (spatial
//! proximity for similar pairs; component-size, ink-count, and background
//! contrasts for different pairs), trains a weight-tied siamese CNN on them,
//! then segments pages by thresholding the first two principal components of
//! a dense per-pixel feature map. Foreground pixels inside the resulting
//! main-text mask are labeled main text; the rest of the ink is side text.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod featmap;
pub mod imaging;
pub mod model;
pub mod nn;
pub mod pairgen;
pub mod segment;
pub mod synthdoc;

pub use error::{Error, Result};

/// Deterministic RNG used for every stochastic step; seeds are plain `u64`s.
pub type Prng = rand_chacha::ChaCha8Rng;
