//! Prescribed density `ρ̃ = ρ₀ − h(t) div(ρ₀u₀)` and the potential `Ψ = h′(t)Φ`
//! with `ΔΦ = div(ρ₀u₀)`, so that `∂_tρ̃ + ΔΨ = 0` holds exactly.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::torus::{GridSpec, ScalarField, Torus, VectorField};

/// Divergences below this are treated as exactly zero (solenoidal data).
const DIV_ZERO_TOL: f64 = 1e-12;

/// `h(t) = (T/(kπ)) sin(kπt/T)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeProfile {
    pub t_final: f64,
    pub k: u32,
}

impl TimeProfile {
    fn omega(&self) -> f64 {
        self.k as f64 * PI / self.t_final
    }

    pub fn h(&self, t: f64) -> f64 {
        (self.omega() * t).sin() / self.omega()
    }

    pub fn h_prime(&self, t: f64) -> f64 {
        (self.omega() * t).cos()
    }

    pub fn h_second(&self, t: f64) -> f64 {
        -self.omega() * (self.omega() * t).sin()
    }

    /// Range of `h` over `[0, T]`.
    pub fn range(&self) -> (f64, f64) {
        let a = 1.0 / self.omega();
        if self.k == 1 {
            (0.0, a)
        } else {
            (-a, a)
        }
    }
}

/// Smallest `k ≥ 1` with `(T/(kπ)) sup|D| < ϱ̲/2`.
pub fn build_h(t_final: f64, sup_div: f64, rho_lower: f64) -> TimeProfile {
    let mut k = 1u32;
    while t_final / (k as f64 * PI) * sup_div >= 0.5 * rho_lower {
        k += 1;
    }
    TimeProfile { t_final, k }
}

#[derive(Clone, Debug)]
pub struct Ansatz {
    grid: GridSpec,
    torus: Torus,
    rho0: ScalarField,
    u0: VectorField,
    w0: VectorField,
    v0: VectorField,
    div_w0: ScalarField,
    phi: ScalarField,
    grad_phi: VectorField,
    grad_rho0: VectorField,
    grad_div: VectorField,
    profile: TimeProfile,
    rho_lower: f64,
}

impl Ansatz {
    /// Builds the ansatz with the density floor `ϱ̲ = min ρ₀`.
    pub fn build(grid: &GridSpec, rho0: &ScalarField, u0: &VectorField) -> Result<Self> {
        Self::build_with_floor(grid, rho0, u0, rho0.min())
    }

    pub fn build_with_floor(
        grid: &GridSpec,
        rho0: &ScalarField,
        u0: &VectorField,
        rho_lower: f64,
    ) -> Result<Self> {
        grid.validate()?;
        let torus = grid.torus();
        if rho0.dim() != grid.dim || rho0.n() != grid.n_space || u0.dim() != grid.dim {
            return Err(Error::GridMismatch("initial data does not match grid".into()));
        }
        u0.comp(0).check_grid(rho0)?;
        if !(rho_lower > 0.0) || rho0.min() < rho_lower {
            return Err(Error::PositivityViolated { min: rho0.min(), floor: rho_lower });
        }
        let w0 = u0.mul_scalar(rho0);
        let mut div_w0 = torus.divergence(&w0)?;
        if div_w0.max_abs() <= DIV_ZERO_TOL {
            div_w0 = ScalarField::zeros(grid.dim, grid.n_space);
        }
        // the spectral divergence has zero mean up to roundoff
        let m = div_w0.mean();
        div_w0 = div_w0.map(|x| x - m);
        let phi = torus.poisson_solve(&div_w0)?;
        let grad_phi = torus.gradient(&phi)?;
        let (v0, _) = torus.helmholtz_decompose(&w0)?;
        let grad_rho0 = torus.gradient(rho0)?;
        let grad_div = torus.gradient(&div_w0)?;
        let profile = build_h(grid.t_final, div_w0.max_abs(), rho_lower);
        let a = Ansatz {
            grid: *grid,
            torus,
            rho0: rho0.clone(),
            u0: u0.clone(),
            w0,
            v0,
            div_w0,
            phi,
            grad_phi,
            grad_rho0,
            grad_div,
            profile,
            rho_lower,
        };
        for &t in &grid.times() {
            let min = a.rho_tilde(t).min();
            if min <= 0.5 * rho_lower {
                return Err(Error::PositivityViolated { min, floor: 0.5 * rho_lower });
            }
        }
        Ok(a)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn torus(&self) -> &Torus {
        &self.torus
    }

    pub fn dim(&self) -> usize {
        self.grid.dim
    }

    pub fn profile(&self) -> &TimeProfile {
        &self.profile
    }

    pub fn rho_lower(&self) -> f64 {
        self.rho_lower
    }

    pub fn rho0(&self) -> &ScalarField {
        &self.rho0
    }

    pub fn u0(&self) -> &VectorField {
        &self.u0
    }

    /// Initial momentum `w₀ = ρ₀u₀`.
    pub fn w0(&self) -> &VectorField {
        &self.w0
    }

    /// Solenoidal part `v₀` of `w₀`.
    pub fn v0(&self) -> &VectorField {
        &self.v0
    }

    /// `D = div(ρ₀u₀)`.
    pub fn div_w0(&self) -> &ScalarField {
        &self.div_w0
    }

    /// True when `D ≡ 0`, i.e. `ρ̃ ≡ ρ₀` and `Ψ ≡ 0`.
    pub fn is_solenoidal(&self) -> bool {
        self.div_w0.max_abs() == 0.0
    }

    pub fn rho_tilde(&self, t: f64) -> ScalarField {
        let h = self.profile.h(t);
        self.rho0.zip_map(&self.div_w0, |r, d| r - h * d)
    }

    /// `∂_tρ̃ = −h′(t) D`.
    pub fn dt_rho_tilde(&self, t: f64) -> ScalarField {
        self.div_w0.scale(-self.profile.h_prime(t))
    }

    pub fn grad_rho_tilde(&self, t: f64) -> VectorField {
        let mut g = self.grad_rho0.clone();
        g.axpy(-self.profile.h(t), &self.grad_div);
        g
    }

    pub fn psi(&self, t: f64) -> ScalarField {
        self.phi.scale(self.profile.h_prime(t))
    }

    /// `∂_tΨ = h″(t) Φ`.
    pub fn dt_psi(&self, t: f64) -> ScalarField {
        self.phi.scale(self.profile.h_second(t))
    }

    pub fn grad_psi(&self, t: f64) -> VectorField {
        self.grad_phi.scale(self.profile.h_prime(t))
    }

    /// `ΔΨ = h′(t) D`.
    pub fn lap_psi(&self, t: f64) -> ScalarField {
        self.div_w0.scale(self.profile.h_prime(t))
    }

    /// `max |∂_tρ̃ + ΔΨ|` over the time grid, with `ΔΨ` recomputed spectrally
    /// from the sampled `Ψ`.
    pub fn continuity_residual(&self) -> f64 {
        self.grid
            .times()
            .iter()
            .map(|&t| {
                let lap = self.torus.laplacian(&self.psi(t)).expect("grid checked at build");
                lap.add(&self.dt_rho_tilde(t)).max_abs()
            })
            .fold(0.0, f64::max)
    }

    /// Bounds of `ρ̃` over `[0,T] × Ω`; exact since `ρ̃` is affine in `h`.
    pub fn rho_tilde_range(&self) -> (f64, f64) {
        let (hl, hh) = self.profile.range();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for h in [hl, hh] {
            for (r, d) in self.rho0.data().iter().zip(self.div_w0.data()) {
                let v = r - h * d;
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::preset;
    use std::f64::consts::TAU;

    #[test]
    fn build_h_scans_k() {
        assert_eq!(build_h(1.0, 10.0, 1.0).k, 7);
        assert_eq!(build_h(1.0, 0.0, 1.0).k, 1);
        let p = build_h(2.0, 3.0, 1.0);
        assert_eq!(p.h(0.0), 0.0);
        assert!((p.h_prime(0.0) - 1.0).abs() <= 1e-10);
        assert!(p.h(2.0).abs() < 1e-14);
        assert!(2.0 / (p.k as f64 * PI) * 3.0 < 0.5);
    }

    #[test]
    fn h_derivatives_match_differences() {
        let p = TimeProfile { t_final: 1.3, k: 3 };
        let e = 1e-5;
        for t in [0.1, 0.5, 1.2] {
            let fd = (p.h(t + e) - p.h(t - e)) / (2.0 * e);
            assert!((fd - p.h_prime(t)).abs() < 1e-8);
            let fd2 = (p.h_prime(t + e) - p.h_prime(t - e)) / (2.0 * e);
            assert!((fd2 - p.h_second(t)).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_velocity_gives_static_density() {
        let grid = GridSpec::new(2, 16, 5, 1.0).unwrap();
        let rho0 = ScalarField::from_fn(2, 16, |x| 2.0 + (TAU * x[0]).sin());
        let a = Ansatz::build(&grid, &rho0, &VectorField::zeros(2, 16)).unwrap();
        assert!(a.is_solenoidal());
        for t in grid.times() {
            assert_eq!(a.rho_tilde(t), rho0);
            assert_eq!(a.psi(t).max_abs(), 0.0);
        }
        assert_eq!(a.continuity_residual(), 0.0);
    }

    #[test]
    fn solenoidal_velocity_on_constant_density() {
        let grid = GridSpec::new(2, 16, 5, 1.0).unwrap();
        let rho0 = ScalarField::constant(2, 16, 1.5);
        let u0 = VectorField::from_fn(2, 16, |x| [(TAU * x[1]).sin(), (TAU * x[0]).cos(), 0.0]);
        let a = Ansatz::build(&grid, &rho0, &u0).unwrap();
        assert!(a.is_solenoidal());
        assert_eq!(a.rho_tilde(0.7), rho0);
        assert_eq!(a.psi(0.3).max_abs(), 0.0);
    }

    #[test]
    fn analytic_preset_is_exact() {
        for dim in [2, 3] {
            let d = preset("analytic", dim, 16).unwrap();
            let grid = GridSpec::new(dim, 16, 9, 1.0).unwrap();
            let a = Ansatz::build(&grid, &d.rho0, &d.u0).unwrap();
            assert_eq!(a.rho_tilde(0.0), d.rho0);
            assert!(a.continuity_residual() <= 1e-8);
            // D = d/dx (2 sin + sin cos) = 2π(2cos 2πx + cos 4πx)
            let exact = ScalarField::from_fn(dim, 16, |x| {
                TAU * (2.0 * (TAU * x[0]).cos() + (2.0 * TAU * x[0]).cos())
            });
            assert!(a.div_w0().sub(&exact).max_abs() < 1e-10);
            let (lo, _) = a.rho_tilde_range();
            assert!(lo > 0.5 * a.rho_lower());
        }
    }

    #[test]
    fn residual_independent_of_time_samples() {
        let d = preset("smooth", 2, 16).unwrap();
        for nt in [3, 17] {
            let grid = GridSpec::new(2, 16, nt, 0.5).unwrap();
            let a = Ansatz::build(&grid, &d.rho0, &d.u0).unwrap();
            assert!(a.continuity_residual() <= 1e-10);
        }
    }
}
