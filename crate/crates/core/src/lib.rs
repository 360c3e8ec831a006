//! Synthetic voice detection with disentangled artifact features.
//!
//! Two raw-waveform encoders split each clip into a content embedding and an
//! artifact embedding. The artifact side is further projected into a
//! domain-specific part, trained to recognise the generator, and a
//! domain-agnostic part, trained to separate real from fake and used alone at
//! inference. A decoder, contrastive terms and a mutual-information bound
//! shape the split, and sharpness-aware minimization flattens the loss
//! surface.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod sam;
pub mod seed;

pub use error::{Error, Result};
