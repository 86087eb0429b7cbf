//! Diffusive ultrasound-modulated bioluminescence tomography on staggered
//! finite-difference grids.
//!
//! The crate discretizes the diffusion approximation of light transport with
//! Robin boundary conditions, synthesizes interior modulation data from
//! forward and adjoint solves, reconstructs the source by one sparse solve
//! per measurement grid, and quantifies how coefficient uncertainty
//! propagates to the reconstruction with a polynomial chaos ensemble.
//!
//! Modules mirror the pipeline stages:
//! - [`mesh`]: grids, node and edge fields, discrete norms, restriction.
//! - [`coefficients`]: optical coefficient models, phantoms, modulation.
//! - [`assembly`]: sparse operators (forward, internal-data, mixed adjoint,
//!   tensor diffusion).
//! - [`solver`]: banded LU and BiCGSTAB with diagonal dominance
//!   certificates and operator norm probes.
//! - [`pipeline`]: forward/adjoint solves, data synthesis, reconstruction.
//! - [`uq`]: polynomial chaos perturbations and ensemble statistics.
//! - [`cli`]: experiment presets, configuration, and report files.

pub mod assembly;
pub mod cli;
pub mod coefficients;
pub mod error;
pub mod mesh;
pub mod pipeline;
pub mod solver;
pub mod uq;

pub use error::{Error, Result};
