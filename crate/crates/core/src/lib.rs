//! Learning continuous-time dynamics from discrete trajectory data, and
//! checking whether what was learned is actually continuous.
//!
//! A model `dx/dt = N(x; θ)` is trained by pushing it through one step of an
//! explicit Runge-Kutta scheme per data pair. Such a model can fit the data at
//! the training spacing `Δt` without approximating the underlying vector
//! field. The convergence test in [`convergence`] integrates the trained
//! model at a sweep of step sizes `h` around `Δt` and reports whether the
//! error settles to a plateau as `h → 0` (a continuous model) or blows up
//! away from `h = Δt` (a model overfit to the sampling interval).
//!
//! Modules:
//!
//! - [`diffengine`]: shallow tanh networks and exact gradients through
//!   unrolled integrator stages.
//! - [`integrators`]: Euler, explicit midpoint and RK4 steps and rollouts.
//! - [`systems`]: benchmark vector fields and reference data generation.
//! - [`odenet`]: training with Adam and decoupled weight decay.
//! - [`convergence`]: the convergence test and the order-escalating
//!   discovery loop.
//! - [`sindy`]: sparse polynomial regression on finite-difference
//!   derivatives.
//! - [`theory`]: closed-form results for the scalar linear ODE.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod convergence;
pub mod diffengine;
pub mod error;
pub mod field;
pub mod integrators;
pub mod io;
pub mod odenet;
pub mod sindy;
pub mod systems;
pub mod theory;

mod serde_util;

pub use error::{Error, Result};
pub use field::{FnField, VectorField};
pub use integrators::{SchemeKind, Trajectory};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
