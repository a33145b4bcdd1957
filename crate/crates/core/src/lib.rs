//! Simulation and verification toolkit for the parabolic Anderson model
//! `∂u = Δu + ξu` on `Z^d` with localized initial datum and i.i.d.
//! double-exponential potentials.
//!
//! Modules, bottom-up:
//!
//! - [`lattice`]: boxes, site sets, norms, cube neighborhoods, clustering.
//! - [`randfield`]: tail models, reproducible fields, heights.
//! - [`spectral`]: principal Dirichlet eigenpairs, semigroup, resolvent.
//! - [`shape`]: optimal potential shape, the constant `χ(ρ)`, duality.
//! - [`pamsolve`]: Cauchy problem, total mass, path-class split, Monte Carlo.
//! - [`islands`]: exceedance set, capitals, spectral gap, `Γ` and `Γ*`.
//! - [`verify`]: finite-time checks of concentration and shape statements.
//! - [`harness`]: configuration, sweeps, CSV reports.

pub mod error;
pub mod lattice;
pub mod randfield;
pub mod spectral;
pub mod shape;
pub mod pamsolve;
pub mod islands;
pub mod verify;
pub mod harness;

pub use error::{Error, Result};
pub use lattice::{BoxDomain, Site, SiteSet};
pub use randfield::{PotentialField, Rho, TailModel};
