//! Bayesian discovery of nonlinear spatio-temporal dynamic equations.
//!
//! The crate fits a hierarchical model to noisy, possibly incomplete gridded
//! observations of a dynamic field: the latent process is expanded in tensor
//! B-spline bases, candidate equation terms are collected in a feature
//! library, and a Gibbs sampler with a spike-and-slab prior selects the
//! active terms while a constant-rate stochastic gradient step tracks the
//! basis coefficients. Posterior output includes per-term inclusion
//! probabilities and HPD intervals.
//!
//! Modules:
//! - [`tensor`]: order-3 tensors, matricization, n-mode products, Kronecker.
//! - [`basis`]: B-spline bases, derivative evaluation, LHS operators.
//! - [`library`]: candidate term library, evaluation and analytic gradients.
//! - [`sampler`]: the Gibbs/SGD chain.
//! - [`simulate`]: reference data generators (Burgers', heat, reaction-diffusion).
//! - [`diagnostics`]: posterior summaries and subsampling calculus.
//! - [`gridtensor`], [`config`], [`cli`]: on-disk formats and the CLI commands.

pub mod basis;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod gridtensor;
pub mod library;
pub mod parallel;
pub mod sampler;
pub mod simulate;
pub mod tensor;
