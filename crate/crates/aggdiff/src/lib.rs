//! Steady states and functional-parameter recovery for 1-D nonlocal
//! aggregation-diffusion equations on a periodic domain.
//!
//! The model is
//!
//! ```text
//! du/dt = sigma * u_xx + kappa * (u * (W*u)_x)_x + (u * V_x)_x
//! ```
//!
//! on the torus `(-L/2, L/2]`, where `W` is an even interaction kernel acting
//! through periodic convolution and `V` is an external potential. Stationary
//! profiles of unit mass are exactly the fixed points of the map
//! `T(u) = exp(-(kappa W*u + V)/sigma) / Z(u)`, which this crate exploits both
//! to enumerate steady states (Picard warm-up plus matrix-free Newton-Krylov)
//! and to recover unknown `W`, `V`, and `kappa` from observed profiles by
//! minimizing equation-consistent residuals with reverse-mode gradients.
//!
//! Module map:
//!
//! - [`grid`]: periodic grid, quadrature, spectral convolution/differentiation.
//! - [`model`]: built-in kernel/potential families and PDE instances.
//! - [`steady`]: the fixed-point map, solvers, enumeration, free energy,
//!   time relaxation, and bifurcation analysis.
//! - [`tape`]: reverse-mode automatic differentiation over grid quantities.
//! - [`approx`]: Fourier and feedforward-network function approximators with
//!   the kernel/potential constraint transforms.
//! - [`inference`]: loss functionals, Adam/L-BFGS, multi-start ensembles, and
//!   identifiability diagnostics.
//! - [`data`]: synthetic observation generation, interpolation, CSV I/O.
//! - [`commands`]: configuration schemas and the operations behind the
//!   `aggdiff` command-line tool.
//!
//! The `examples/` directory contains one runnable program per major
//! capability; start with `solve_states` and `recover_kernel`.

pub mod approx;
pub mod commands;
pub mod data;
pub mod error;
pub mod grid;
pub mod inference;
pub mod model;
pub mod steady;
pub mod tape;

pub use error::{Error, Result};
pub use grid::{GridFunction, PeriodicGrid};
pub use model::{KernelSpec, ModelInstance, PotentialSpec};
pub use steady::{SteadyState, SteadyStateSet};
