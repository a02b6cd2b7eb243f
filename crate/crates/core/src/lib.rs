//! Cascaded part-level latent diffusion.
//!
//! Shapes are sets of parts. Each part carries a 16-float extrinsic vector (a 3-D
//! Gaussian: center, eigenvalues, eigenvectors, mixture weight) and an intrinsic
//! latent code. Generation runs two denoising diffusion models in cascade: the
//! first samples the extrinsics, the second samples the intrinsics conditioned on
//! them. The same models support masked part completion, part mixing with
//! refinement, and classifier-free text guidance.
//!
//! Everything here is self-contained: the tensor/autodiff kernels, the set
//! transformer denoisers, training, sampling, the procedural toy world that
//! supplies data and an analytic occupancy decoder, the evaluation metrics, and
//! the on-disk formats.

pub mod error;
pub mod denoiser;
pub mod format;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod parts;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod service;
pub mod tensor;
pub mod toyworld;
pub mod train;

pub use error::{Error, Result, TensorError};
pub use graph::{Graph, Var};
pub use rng::NoiseRng;
pub use tensor::{Scalar, Tensor};
