//! Learning viscosity-free solutions of Hamilton–Jacobi equations from
//! characteristic particle trajectories.

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod field_net;
pub mod hamiltonians;
pub mod integrators;
pub mod linalg;
pub mod pipeline;
pub mod reference;
pub mod sampling;
pub mod training;
pub mod trajectory;

pub use error::{HjError, Result};
