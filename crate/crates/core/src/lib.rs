//! All-in-one underwater image restoration.
//!
//! A U-shaped restorer built from state-space (selective scan) token mixers
//! and low-rank water mixture-of-experts feed-forward layers, conditioned on
//! a depth map and on a compact degradation prior. The prior comes from a
//! spatial-frequency prior generator during the first training stage and from
//! a small latent conditional diffusion model afterwards.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the element type for common uses.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod depth;
pub mod error;
pub mod image;
pub mod io;
pub mod lcdm;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod padding;
pub mod rng;
pub mod scalar;
pub mod sfpg;
pub mod spectral;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod vssm;
pub mod wmoe;

pub use crate::config::RunConfig;
pub use crate::error::{Error, Result};
pub use crate::image::{DepthRaster, ImagePlane, PriorKind, PriorVector, ValueDomain};
pub use crate::scalar::Scalar;
pub use crate::tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ImagePlane32 = ImagePlane<f32>;
pub type ImagePlane64 = ImagePlane<f64>;
pub type DepthRaster32 = DepthRaster<f32>;
pub type DepthRaster64 = DepthRaster<f64>;
pub type PriorVector32 = PriorVector<f32>;
pub type PriorVector64 = PriorVector<f64>;
pub type Models32 = trainer::Models<f32>;
pub type Models64 = trainer::Models<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
