//! Framework-free inference kernels for Clifford pyramid low-light enhancement.
//!
//! The pipeline runs in three phases:
//!
//! 1. the native RGB image is area-downsampled to a small square latent base;
//! 2. an inverse pyramid (64 → 128 → 256 by default) splits each level into a
//!    Gaussian low band and a residual high band, runs each through a
//!    depthwise-separable U-Net, and fuses the two with a Cl(2,0) scalar inner
//!    product mask;
//! 3. the per-level features are bicubically upsampled to native resolution,
//!    mapped to bounded Gamma/Gain maps and applied to the max-channel
//!    illumination while holding channel ratios fixed.
//!
//! Only phase 3 touches native resolution, and it is streamed in row stripes
//! so the 48-channel feature block is never materialized at full size.
//!
//! The crate is `no_std` and needs only `alloc`. All kernels are generic over
//! [`Real`] so the gradient checks can run the same forward code in `f64`.

#![no_std]
#![deny(rust_2018_idioms)]

extern crate alloc;

pub mod clifford;
pub mod conv;
pub mod counter;
mod error;
pub mod filter;
pub mod frequency;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pyramid;
pub mod reconstruct;
pub mod resize;
pub mod rng;
mod scalar;
pub mod tensor;

pub use self::{
    clifford::{FusionParams, Multivector},
    conv::ConvSpec,
    counter::{OpCounter, StageCounters},
    error::{Error, Result},
    model::{Model, ModelConfig},
    params::{NamedTensor, ParamStore},
    reconstruct::{enhance_full, EnhanceParams},
    resize::ResizeMode,
    scalar::Real,
    tensor::{Shape, Tensor},
};
