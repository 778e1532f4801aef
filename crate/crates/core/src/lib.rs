//! Steady subsonic Euler-Poisson potential flow in a nozzle.
//!
//! The pipeline: [`ode1d`] builds a one-dimensional background flow, [`grid`]
//! discretizes the nozzle, [`elliptic`] assembles and solves the linearized
//! mixed boundary-value problem, and [`driver`] iterates it to the nonlinear
//! fixed point. [`domainmap`] recasts flows in deformed nozzles onto the
//! reference grid.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Stencil loops index several arrays at once.
#![allow(clippy::needless_range_loop)]

pub mod coeffs;
pub mod domainmap;
pub mod driver;
pub mod elliptic;
pub mod error;
pub mod gas;
pub mod grid;
pub mod io;
pub mod ode1d;
pub mod verify;

pub use coeffs::{Deltas, LinPoint};
pub use driver::{FieldPair, IterationConfig, SolveReport};
pub use elliptic::WeakSystem;
pub use error::{Error, Result};
pub use gas::{FlowState, GasLaw};
pub use grid::{build_grid, BoundaryTag, Nozzle, NozzleSpec, ScalarField, VectorField};
pub use ode1d::{BackgroundSolution, BoundaryTriple, ChargeProfile, OneDParams};
