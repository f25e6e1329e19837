//! Data-driven convolutional feature extraction for image
//! classification: a whitened dictionary of random image patches, a
//! Q-nearest-neighbor binary encoding of every patch against it, spatial
//! average pooling, and a shallow convolutional classifier trained with
//! momentum SGD. Also ships the patch-geometry diagnostics (covariance
//! spectrum, covariance dimension, intrinsic dimension) used to study
//! the dictionary.

pub mod analysis;
pub mod cache;
pub mod classifier;
pub mod dataset;
pub mod dictionary;
pub mod encoder;
pub mod error;
pub mod io;
pub mod linalg;
pub mod pipeline;
pub mod whitening;

pub use error::{Error, Result};
