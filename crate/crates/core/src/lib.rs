//! Speech-conditioned latent diffusion for face generation on a small
//! synthetic paired testbed.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pin the common choices.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod denoiser;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod faceprior;
pub mod gradcheck;
pub mod io;
pub mod manifest;
pub mod nn;
pub mod pipeline;
pub mod sampler;
pub mod scalar;
pub mod seed;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = autograd::Graph<f32>;
pub type ParamStore32 = nn::ParamStore<f32>;
