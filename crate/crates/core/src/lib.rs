//! Spectral normalization for GAN discriminators: the normalization
//! variants, the gradient, Hessian and parameter-variance bounds they imply,
//! executable checks for each bound, and a small adversarial trainer that
//! logs the same quantities during training.
//!
//! Module map:
//!
//! - [`tensor`], [`conv`], [`init`], [`power`], [`rng`]: dense tensors,
//!   convolution and its adjoint, initializers, power iteration.
//! - [`specnorm`]: `SN_w`, the transposed reshape, `BSN`, strict `SN_Conv`
//!   and their scaled forms.
//! - [`nn`]: the bias-free discriminator with manual backprop, gradient
//!   bounds and finite-difference Hessian-vector products.
//! - [`theorems`]: one check per bound, each returning a machine-readable
//!   report.
//! - [`gan`]: losses, Adam, the alternating trainer and its metrics.
//! - [`data`]: ring-of-Gaussians and MNIST IDX inputs, PGM/CSV output.
//! - [`cli`]: the `snlab` binary's subcommands.

pub mod cli;
pub mod conv;
pub mod data;
pub mod error;
pub mod gan;
pub mod init;
pub mod linalg;
pub mod nn;
pub mod power;
pub mod rng;
pub mod specnorm;
pub mod tensor;
pub mod theorems;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
