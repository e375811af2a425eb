//! Few-shot glyph generation: a vector-quantized glyph autoencoder whose
//! codebook constrains a second-stage generator that aggregates reference
//! styles with patch- and structure-level cross-attention.

pub mod config;
pub mod error;
pub mod metrics;
pub mod ssem;
pub mod structure;
pub mod vq;

#[cfg(feature = "backend")]
pub mod attention;
#[cfg(feature = "backend")]
pub mod checkpoint;
#[cfg(feature = "backend")]
pub mod dataset;
#[cfg(feature = "backend")]
pub mod evaluation;
#[cfg(feature = "backend")]
pub mod glyph;
#[cfg(feature = "backend")]
pub mod kernels;
#[cfg(feature = "backend")]
pub mod nn;
#[cfg(feature = "backend")]
pub mod perceptual;
#[cfg(feature = "backend")]
pub mod pipeline;
#[cfg(feature = "backend")]
pub mod refine;
#[cfg(feature = "backend")]
pub mod training;

pub use error::{Error, Result};
