//! Infrared/visible image fusion with a residual dense encoder, addition
//! fusion, and a feedback decoder, built on a small reverse-mode autodiff
//! tape.
//!
//! Training reconstructs pre-fused images (no fusion layer involved);
//! inference encodes both sources with the shared encoder, adds the
//! feature maps, and decodes.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod pnm;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use image::{ImageGray, Provenance};
pub use network::{
    fuse_images, init_params, FeedbackConfig, FusionOptions, ModelParams, PreFusionConfig,
};
pub use tensor::{Real, Tensor};
