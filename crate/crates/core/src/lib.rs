//! Numerical laboratory for wild weak solutions of the compressible Euler–Fourier
//! system on the periodic torus.
//!
//! The crate is organised bottom-up:
//!
//! * [`torus`]: periodic grids, sampled fields and spectral calculus.
//! * [`ansatz`]: the prescribed density `ρ̃ = ρ₀ − h(t) div(ρ₀u₀)` and its potential `Ψ`.
//! * [`heat`]: the linear temperature equation `θ[v]` and its comparison bounds.
//! * [`subsolution`]: `λ_max`, the energy function `ē[v]`, gaps and the functionals `I_ε`.
//! * [`convint`]: localized oscillatory perturbations and the energy-gain iteration.
//! * [`dissipdata`]: the energy-profile `χ`, the kinetic-energy staircase and admissibility.
//! * [`relent`]: constitutive laws, weak residuals, relative entropy and a classical solver.
//! * [`config`] / [`runner`]: the experiment runner behind the `wildgas` binary.

pub mod ansatz;
pub mod config;
pub mod convint;
pub mod dissipdata;
pub mod error;
pub mod heat;
pub mod presets;
pub mod quadrature;
pub mod relent;
pub mod runner;
pub mod subsolution;
pub mod torus;

pub use error::{Error, Result};
pub use torus::{GridSpec, ScalarField, TensorField, Torus, VectorField};

/// Heat capacity `c_v` of a monoatomic gas with `dim` translational degrees of freedom.
///
/// Equal to `3/2` on the three-torus; the two-dimensional runs use `1`.
pub fn heat_capacity(dim: usize) -> f64 {
    dim as f64 / 2.0
}
