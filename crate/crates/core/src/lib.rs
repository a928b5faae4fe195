//! Image inpainting with a Wasserstein generative adversarial imputation
//! network: mask scenarios, generator/critic networks, adversarial
//! training, a biharmonic baseline and PSNR/SSIM evaluation.

pub mod biharmonic;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod image;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use image::ImageTensor;
pub use mask::MaskMatrix;
