//! Skin-lesion classifier built around two feature-attention ideas:
//!
//! * boundary features taken from a single-level Haar decomposition of the
//!   backbone encoding, fused with soft-attention features using weights
//!   derived from normalized backpropagation gradients ([`fusion`]);
//! * a symmetry-aware attention map computed from row and column LSTMs over
//!   the spatial grid ([`attention`]).
//!
//! Everything runs on a small dense-tensor reverse-mode autodiff core
//! ([`tape`]). Scalars are generic over [`Real`]; `f32` is the working
//! precision and `f64` exists for gradient verification.

pub mod attention;
pub mod checkpoint;
pub mod data;
mod error;
pub mod exec;
pub mod fusion;
pub mod layers;
pub mod model;
pub mod nn;
pub mod optim;
mod real;
mod rng;
pub mod tape;
mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{Error, ErrorKind, Result};
pub use real::Real;
pub use rng::{derive_seed, seeded_rng};
pub use tensor::Tensor;

/// Environment variable that switches the command-line tools to 64-bit
/// verification mode when set to `1`.
pub const F64_ENV_VAR: &str = "WAGF_F64";
