//! Multi-domain unpaired weather translation.
//!
//! A generator combines a global initial translation with an attention map
//! and a weather-cue segmentation to decide where the translation applies;
//! patch discriminators with an auxiliary weather classifier drive training;
//! FID and KID compare generated and real image sets.

pub mod checkpoint;
pub mod dataset;
pub mod discriminator;
pub mod error;
pub mod features;
pub mod generator;
mod im2col;
pub mod image_tensor;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
