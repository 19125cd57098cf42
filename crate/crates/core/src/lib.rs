//! Self-supervised 2D pose estimation from unlabelled video and an unpaired
//! synthetic pose prior.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod prior;
pub mod raster;
pub mod skeleton;
pub mod train;
pub mod video;

pub use error::{Error, Result};
