//! Built-in initial data.

use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::torus::{ScalarField, VectorField};

pub const PRESET_NAMES: &[&str] = &["analytic", "equilibrium", "smooth", "mild"];

#[derive(Clone, Debug)]
pub struct InitialData {
    pub rho0: ScalarField,
    pub u0: VectorField,
    pub theta0: ScalarField,
}

/// `analytic`: `ρ₀ = 2 + cos 2πx₁`, `u₀ = (sin 2πx₁, 0)`, `θ₀ = 1 + 0.2 sin 2πx₂`.
/// `equilibrium`: `ρ₀ = θ₀ = 1`, `u₀ = 0`.
/// `smooth`: a compressible state with variation along every axis.
/// `mild`: `ρ₀ = 1 + 0.05 cos 2πx₁`, `u₀ = 0.2 (sin 2πx₂, sin 2πx₁)`,
/// `θ₀ = 1 + 0.1 sin 2πx₂`; small density gradients keep the comparison bounds
/// tight.
pub fn preset(name: &str, dim: usize, n: usize) -> Result<InitialData> {
    match name {
        "analytic" => Ok(InitialData {
            rho0: ScalarField::from_fn(dim, n, |x| 2.0 + (TAU * x[0]).cos()),
            u0: VectorField::from_fn(dim, n, |x| [(TAU * x[0]).sin(), 0.0, 0.0]),
            theta0: ScalarField::from_fn(dim, n, |x| 1.0 + 0.2 * (TAU * x[1]).sin()),
        }),
        "equilibrium" => Ok(InitialData {
            rho0: ScalarField::constant(dim, n, 1.0),
            u0: VectorField::zeros(dim, n),
            theta0: ScalarField::constant(dim, n, 1.0),
        }),
        "smooth" => Ok(InitialData {
            rho0: ScalarField::from_fn(dim, n, |x| {
                1.5 + 0.3 * (TAU * x[0]).sin() * (TAU * x[1]).cos() + 0.1 * (TAU * x[2]).cos()
            }),
            u0: VectorField::from_fn(dim, n, |x| {
                [0.3 * (TAU * x[1]).sin(), 0.3 * (TAU * x[0]).sin(), 0.2 * (TAU * x[0]).cos()]
            }),
            theta0: ScalarField::from_fn(dim, n, |x| 1.0 + 0.2 * (TAU * x[0]).cos()),
        }),
        "mild" => Ok(InitialData {
            rho0: ScalarField::from_fn(dim, n, |x| 1.0 + 0.05 * (TAU * x[0]).cos()),
            u0: VectorField::from_fn(dim, n, |x| {
                [0.2 * (TAU * x[1]).sin(), 0.2 * (TAU * x[0]).sin(), 0.0]
            }),
            theta0: ScalarField::from_fn(dim, n, |x| 1.0 + 0.1 * (TAU * x[1]).sin()),
        }),
        other => Err(Error::Config(format!(
            "unknown preset '{other}' (expected one of {PRESET_NAMES:?})"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_positive() {
        for name in PRESET_NAMES {
            for dim in [2, 3] {
                let d = preset(name, dim, 16).unwrap();
                assert!(d.rho0.min() > 0.0 && d.theta0.min() > 0.0);
                assert_eq!(d.u0.dim(), dim);
            }
        }
        assert!(preset("nope", 2, 16).is_err());
    }
}
