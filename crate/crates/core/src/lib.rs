//! Point re-projection (PrP) supervision and evaluation for keypoint
//! detectors and descriptors trained on multi-view RGB-D renderings.

pub mod adaptation;
pub mod correspondence;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod frontend;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod scene;

pub use error::{Error, Result};
