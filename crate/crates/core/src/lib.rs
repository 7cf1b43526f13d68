//! Multi-domain object count regression.
//!
//! A frozen convolutional feature extractor feeds a shared fully connected
//! counting head. Each visual domain owns a small set of residual adapter
//! modules (domain-wise normalisation and scaling) that are swapped in and out
//! around the shared layers, so a new domain can be learned with the shared
//! weights frozen and every earlier domain keeps its exact counting function.
//!
//! On top of the head sit a fully convolutional refiner that smooths a grid of
//! per-patch estimates using neighbouring context, and a domain classifier that
//! reuses the frozen shared layers with a fresh adapter set and a K-way softmax.

pub mod adapters;
pub mod classifier;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod nn;
pub mod persistence;
pub mod refiner;
pub mod regressor;
pub mod seed;

pub use error::{Error, Result};
