//! Deforming autoencoders: appearance synthesised in a canonical template
//! frame, warped into the image by a constrained, fold-free deformation.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod losses;
pub mod networks;
pub mod training;
pub mod warp;

pub use error::{DaeError, Result};
