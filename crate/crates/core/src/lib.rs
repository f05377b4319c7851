//! Pseudo-spectral simulator for infinite-Prandtl Rayleigh-Benard convection
//! driven by bounded random forcing localised in a bottom boundary layer.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod banded;
pub mod checkpoint;
pub mod config;
pub mod control;
pub mod error;
pub mod experiment;
pub mod field;
pub mod grid;
pub mod markov;
pub mod noise;
pub mod stokes;
pub mod tangent;
pub mod thermal;

pub use error::{Error, Result};
pub use field::{Dirichlet, ScalarField, SpectralField, VectorField};
pub use grid::Grid;
