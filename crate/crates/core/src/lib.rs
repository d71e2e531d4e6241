//! Steady states, dynamics and linear stability of hierarchical
//! size-structured populations with distributed states at birth.
//!
//! The model is
//!
//! ```text
//! p_t + (gamma(s, P) p)_s = -mu(s, E(s, p)) p + int_0^m beta(s, y, E(y, p)) p(y) dy
//! gamma(0, P) p(0, t) = 0
//! E(s, p) = alpha int_0^s w p + int_s^m w p,    P = int_0^m kappa p
//! ```
//!
//! on a size interval `[0, m]`.
//!
//! * [`gridfn`]: uniform grids, trapezoid quadrature, interpolation
//! * [`model`]: rate catalog, environment and weighted population
//! * [`steady`]: finite-rank fixed-point construction of equilibria
//! * [`dynamics`]: upwind finite-volume time integration and time rescaling
//! * [`stability`]: characteristic functions, root finding, matrix oracle

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod gridfn;
pub mod model;
pub mod stability;
pub mod steady;
pub mod survival;

pub use error::{DynamicsError, GridError, ModelError, StabilityError, SteadyError};
pub use gridfn::{Grid, GridFunction};
pub use model::{
    environment, Args, EnvironmentState, ModelIngredients, RateExpr, SeparableFertility, Var,
};
