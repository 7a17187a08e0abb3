//! Pixel-wise crack and delamination segmentation with a U-Net.

pub mod adam;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
