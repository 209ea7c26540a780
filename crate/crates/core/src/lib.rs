//! Bond-based peridynamics on uniform point lattices, integrated with explicit
//! Runge-Kutta methods either at one rate everywhere or at two rates: a coarse step
//! on most of the body and `K` substeps inside a fine region.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod app;
pub mod error;
pub mod forces;
pub mod geometry;
pub mod integrator;
pub mod mts;

pub use error::{ConfigError, PdError, Result};
