//! Measurement-feedback thermodynamics on the quantum Fokker-Planck master equation.
//!
//! The crate covers two steady-state solvers (Hermite spectral and finite volume),
//! three trajectory samplers (classical jump process, diffusive Belavkin filter,
//! Kraus/quantum-jump unraveling), first-law bookkeeping and fluctuation-theorem
//! estimators.

pub mod entropy_ft;
pub mod error;
pub mod grid_solver;
pub mod linalg;
pub mod models;
pub mod operators;
pub mod rng;
pub mod spectral;
pub mod stats;
pub mod thermo;
pub mod trajectory;

pub use error::{Error, Result};
pub use models::{BangBang, Engine};
pub use num_complex::Complex64;
pub use operators::{DensityMatrix, FeedbackProtocol, LindbladChannel, Operator, QfpmeModel};
pub use rng::RngStream;
pub use spectral::{SpectralModel, SpectralState, Truncation};
pub use trajectory::TrajectoryRecord;

/// Bose-Einstein occupation 1/(e^{ω/T} − 1).
pub fn bose_einstein(omega: f64, temperature: f64) -> f64 {
    1.0 / (omega / temperature).exp_m1()
}

/// Inverse of [`bose_einstein`]: ω/T from n_B.
pub fn beta_omega(n_b: f64) -> f64 {
    (1.0 + 1.0 / n_b).ln()
}
