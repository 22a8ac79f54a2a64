//! A nonparametric, nonstationary spatio-temporal process built from modified
//! Hamiltonian leap-frog dynamics, with full Bayesian inference by
//! Metropolis-within-Gibbs MCMC.
//!
//! The observed field `Y(s,t)` plays the role of a position coordinate and an
//! unobserved latent field `X(s,t)` plays the role of momentum. A Gaussian
//! random potential couples the two through its derivative process, and a
//! location-dependent mass term `M_s` scales the latent contribution so that
//! lagged correlations decay with spatial and temporal separation.
//!
//! Module map:
//! - [`geometry`]: coordinate projection, distances, the mass term `M_s`
//! - [`kernels`]: squared-exponential, derivative-process and Matérn kernels
//! - [`model`]: covariance assembly and the three log-densities
//! - [`simulate`]: forward simulation and benchmark data generators
//! - [`inference`]: the Gibbs/Metropolis sampler, annealed MLE, CV search
//! - [`predict`]: temporal prediction and spatial reconstruction
//! - [`diagnostics`]: correlation experiments, stationarity detection, chain summaries
//! - [`io`]: CSV/JSON/binary persistence shared with the CLI

pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod predict;
pub mod rng;
pub mod simulate;

pub use error::{Error, Result};
pub use geometry::{Location, LocationSet};
pub use model::{ParamVector, StDataset};
