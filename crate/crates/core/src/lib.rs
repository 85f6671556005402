//! Deep Gaussian processes at finite width, their infinite-width Gaussian-process
//! limits, and exact Bayesian inference over the whitened latent variables.
//!
//! The crate is organized around the pipeline used by the experiment runner:
//!
//! * [`kernels`] — covariance functions: per-layer priors, closed-form limiting
//!   kernels, quadrature-based finite-width covariances, and moment-matched
//!   constructions, plus Gram-matrix assembly.
//! * [`deepgp`] — architectures, prior sampling, the whitened parameterization,
//!   the joint log density and its gradient, and predictive sampling.
//! * [`gp`] — exact single-layer GP regression: marginal likelihood, predictive
//!   distribution, and hyperparameter optimization.
//! * [`inference`] — Hamiltonian Monte Carlo with dual-averaging step-size
//!   adaptation and MAP initialization.
//! * [`analysis`] — marginal density grids, moment and tail estimators,
//!   concentration diagnostics, kernel-fit and predictive-likelihood metrics.
//! * [`data`] — dataset ingestion, normalization, splits, and synthetic
//!   generators.
//!
//! All randomized operations take explicit seeds and are deterministic given
//! them; values are immutable after construction and safe to share across
//! threads.

pub mod adam;
pub mod analysis;
pub mod data;
pub mod deepgp;
pub mod error;
pub mod gp;
pub mod inference;
pub mod kernels;
pub mod linalg;
pub mod quadrature;
pub mod seed;

pub use analysis::{DensityGrid, MomentReport};
pub use data::Dataset;
pub use deepgp::{DeepGpArchitecture, LayerOutputs, LayerSpec, WhitenedState};
pub use error::{Error, Result};
pub use gp::GpFit;
pub use inference::{ChainResult, HmcConfig};
pub use kernels::{GramMatrix, KernelSpec};
