//! Desk-scale numerics for large deviations of permanental point processes on
//! the torus and the second boundary value problem of the real Monge-Ampere
//! equation.
//!
//! The crate is organised bottom-up:
//!
//! * [`measures`]: discrete and grid measures, relative entropy, log-MGF.
//! * [`legendre`]: grid Legendre transforms and entropy duality.
//! * [`transport`]: assignments, Kantorovich plans, W2 and cyclical monotonicity.
//! * [`torus`]: the lattice and the theta-like functions on the flat torus.
//! * [`gibbs`]: permanents, Hamiltonians, Gibbs ensembles and rate estimates.
//! * [`monge_ampere`]: the Monge-Ampere operator, the master equation and the
//!   rate function.
//! * [`experiments`]: the reproducible experiment runners used by the CLI.

pub mod error;
pub mod experiments;
pub mod gibbs;
pub mod grid;
pub mod legendre;
pub mod measures;
pub mod monge_ampere;
pub mod torus;
pub mod transport;

pub use error::{Error, Result};
pub use grid::{Grid, GridFunction, Layout};
