//! Two-branch, multi-depth, boundary-aware segmentation of the left atrium
//! and atrial scar in 3D LGE MRI, with its training loop, evaluation metrics,
//! scar-size statistics and a synthetic phantom generator.

pub mod autograd;
pub mod cli;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod phantom;
pub mod sobel;
pub mod tensor;
pub mod train;
pub mod volume_io;

pub use error::{Error, Result};
