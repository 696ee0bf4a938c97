//! The temperature equation
//!
//! `c(ρ̃∂_tθ + W·∇θ) = Δθ − θΔΨ + θ (∇ρ̃/ρ̃)·W + S`, `W = v + ∇Ψ`,
//!
//! which is linear in `θ` for a given `v`, together with the `v`-independent
//! comparison bounds and residual audits of the energy and entropy forms.
//!
//! Time stepping is an integrating-factor RK4: `σΔθ` is integrated exactly in
//! Fourier space with `σ` the midpoint of the range of `1/(cρ̃)`, and the
//! remainder (variable-coefficient diffusion, advection, reaction) is explicit.
//! Since `|1/(cρ̃) − σ| < σ`, the diffusive part is stable for any step; the
//! step is limited by advection and reaction only. Products are dealiased with
//! the 2/3 rule.

use std::cell::RefCell;

use rustfft::num_complex::Complex64;

use crate::ansatz::Ansatz;
use crate::error::{Error, Result};
use crate::heat_capacity;
use crate::quadrature::derivative_stencil;
use crate::torus::{ScalarField, Torus, VectorField};

/// Tolerance used by the residual audits.
pub const SOLVER_TOL: f64 = 1e-6;

/// Real-axis extent of the RK4 stability region.
const RK4_REAL_EXTENT: f64 = 2.78;

/// A velocity field `v(t, ·)` available at arbitrary times.
pub trait VelocityPath: Sync {
    fn velocity(&self, t: f64) -> VectorField;
}

impl<F: Fn(f64) -> VectorField + Sync> VelocityPath for F {
    fn velocity(&self, t: f64) -> VectorField {
        self(t)
    }
}

/// `v ≡ 0`.
#[derive(Clone, Copy, Debug)]
pub struct ZeroVelocity {
    pub dim: usize,
    pub n: usize,
}

impl VelocityPath for ZeroVelocity {
    fn velocity(&self, _t: f64) -> VectorField {
        VectorField::zeros(self.dim, self.n)
    }
}

/// Piecewise-linear interpolation of velocity samples.
#[derive(Clone, Debug)]
pub struct SampledVelocity {
    times: Vec<f64>,
    fields: Vec<VectorField>,
}

impl SampledVelocity {
    pub fn new(times: Vec<f64>, fields: Vec<VectorField>) -> Result<Self> {
        if times.is_empty() || times.len() != fields.len() {
            return Err(Error::InvalidGrid("velocity samples do not match times".into()));
        }
        Ok(SampledVelocity { times, fields })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn fields(&self) -> &[VectorField] {
        &self.fields
    }
}

impl VelocityPath for SampledVelocity {
    fn velocity(&self, t: f64) -> VectorField {
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return self.fields[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.fields[n - 1].clone();
        }
        let j = self.times.partition_point(|&s| s <= t) - 1;
        let (t0, t1) = (self.times[j], self.times[j + 1]);
        let s = (t - t0) / (t1 - t0);
        if s == 0.0 {
            return self.fields[j].clone();
        }
        let mut out = self.fields[j].scale(1.0 - s);
        out.axpy(s, &self.fields[j + 1]);
        out
    }
}

/// Optional forcing `S(t, ·)` added to the right-hand side.
pub type Source<'a> = &'a (dyn Fn(f64) -> ScalarField + Sync);

#[derive(Clone, Copy, Debug)]
pub struct HeatOptions {
    /// Upper bound on the internal step; defaults to `T/1000`.
    pub max_dt: Option<f64>,
    /// Bound on `dt·ρ_explicit / 2.78`.
    pub stability: f64,
    /// 2/3-rule dealiasing of products.
    pub dealias: bool,
}

impl Default for HeatOptions {
    fn default() -> Self {
        HeatOptions { max_dt: None, stability: 0.4, dealias: true }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SolverStats {
    pub steps: usize,
    /// Largest `dt·ρ_explicit / 2.78` used.
    pub max_ratio: f64,
    /// Per sample: `(t, min θ, max θ)`.
    pub trace: Vec<[f64; 3]>,
}

#[derive(Clone, Debug)]
pub struct TemperatureSolve {
    pub times: Vec<f64>,
    pub theta: Vec<ScalarField>,
    pub theta_lo: f64,
    pub theta_hi: f64,
    pub stats: SolverStats,
}

impl TemperatureSolve {
    pub fn min(&self) -> f64 {
        self.theta.iter().map(|f| f.min()).fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.theta.iter().map(|f| f.max()).fold(f64::NEG_INFINITY, f64::max)
    }
}

struct Coeffs {
    t: f64,
    /// `P[1/(cρ̃)] − σ`
    a_shift: ScalarField,
    a: ScalarField,
    inv_rho: ScalarField,
    /// `P[(∇ρ̃/ρ̃)·W] − ΔΨ`
    react: ScalarField,
    w: VectorField,
    src: Option<ScalarField>,
}

struct Stepper<'a> {
    ansatz: &'a Ansatz,
    torus: &'a Torus,
    v: &'a dyn VelocityPath,
    source: Option<Source<'a>>,
    c: f64,
    sigma: f64,
    dealias: bool,
    band: Vec<bool>,
    cache: RefCell<Vec<std::rc::Rc<Coeffs>>>,
}

impl<'a> Stepper<'a> {
    fn new(
        ansatz: &'a Ansatz,
        v: &'a dyn VelocityPath,
        source: Option<Source<'a>>,
        dealias: bool,
    ) -> Self {
        let torus = ansatz.torus();
        let c = heat_capacity(ansatz.dim());
        let (rlo, rhi) = ansatz.rho_tilde_range();
        let sigma = 0.5 * (1.0 / (c * rlo) + 1.0 / (c * rhi));
        let cut = torus.n() as i64 / 3;
        let band = (0..torus.n_points())
            .map(|p| {
                let k = torus.wavenumber(p);
                !dealias || (0..torus.dim()).all(|a| k[a].abs() <= cut)
            })
            .collect();
        Stepper {
            ansatz,
            torus,
            v,
            source,
            c,
            sigma,
            dealias,
            band,
            cache: RefCell::new(Vec::new()),
        }
    }

    fn project(&self, f: ScalarField) -> ScalarField {
        if !self.dealias {
            return f;
        }
        let mut s = self.torus.forward(&f);
        self.mask(&mut s);
        self.torus.inverse(s)
    }

    fn mask(&self, s: &mut [Complex64]) {
        if self.dealias {
            for (c, &keep) in s.iter_mut().zip(&self.band) {
                if !keep {
                    *c = Complex64::default();
                }
            }
        }
    }

    fn coeffs(&self, t: f64) -> std::rc::Rc<Coeffs> {
        if let Some(c) = self.cache.borrow().iter().find(|c| c.t.to_bits() == t.to_bits()) {
            return c.clone();
        }
        let rho = self.ansatz.rho_tilde(t);
        let inv = rho.map(|r| 1.0 / r);
        let a = self.project(inv.scale(1.0 / self.c));
        let inv_rho = self.project(inv.clone());
        let grad_rho = self.ansatz.grad_rho_tilde(t);
        let mut w = self.v.velocity(t);
        w.axpy(1.0, &self.ansatz.grad_psi(t));
        let wp = VectorField::from_components(
            w.comps().iter().map(|f| self.project(f.clone())).collect(),
        )
        .expect("components share a grid");
        let mut gw = ScalarField::zeros(rho.dim(), rho.n());
        for k in 0..rho.dim() {
            let g = self.project(grad_rho.comp(k).mul(&inv));
            gw = gw.add(&g.mul(wp.comp(k)));
        }
        let react = self.project(gw).sub(&self.project(self.ansatz.lap_psi(t)));
        let src = self.source.map(|s| self.project(s(t)));
        let out = std::rc::Rc::new(Coeffs {
            t,
            a_shift: a.map(|x| x - self.sigma),
            a,
            inv_rho,
            react,
            w: wp,
            src,
        });
        let mut cache = self.cache.borrow_mut();
        if cache.len() >= 3 {
            cache.remove(0);
        }
        cache.push(out.clone());
        out
    }

    /// Explicit part in Fourier space.
    fn explicit(&self, t: f64, u: &[Complex64]) -> Vec<Complex64> {
        let co = self.coeffs(t);
        let torus = self.torus;
        let mut um = u.to_vec();
        self.mask(&mut um);
        let theta = torus.inverse(um.clone());
        let lap = torus.inverse(um.iter().enumerate().map(|(p, c)| c * -torus.k2_full(p)).collect());
        let dim = torus.dim();
        let grads: Vec<ScalarField> = (0..dim)
            .map(|k| {
                torus.inverse(
                    um.iter()
                        .enumerate()
                        .map(|(p, c)| c * Complex64::new(0.0, torus.wavevector(p)[k]))
                        .collect(),
                )
            })
            .collect();
        let mut out = vec![0.0; theta.len()];
        for (p, o) in out.iter_mut().enumerate() {
            let mut adv = 0.0;
            for k in 0..dim {
                adv += co.w.comp(k).data()[p] * grads[k].data()[p];
            }
            let s = co.src.as_ref().map_or(0.0, |s| s.data()[p]);
            *o = co.a_shift.data()[p] * lap.data()[p]
                + co.a.data()[p] * (theta.data()[p] * co.react.data()[p] + s)
                - co.inv_rho.data()[p] * adv;
        }
        let f = ScalarField::from_vec(dim, torus.n(), out).expect("grid size");
        let mut spec = torus.forward(&f);
        self.mask(&mut spec);
        spec
    }

    /// Bound on the spectral radius of the explicit advection/reaction part.
    fn explicit_rate(&self, t: f64) -> f64 {
        let co = self.coeffs(t);
        let kmax = std::f64::consts::PI * self.torus.n() as f64 * (self.torus.dim() as f64).sqrt();
        co.w.max_norm() * co.inv_rho.max_abs() * kmax + co.a.max_abs() * co.react.max_abs()
    }

    fn step(&self, t: f64, h: f64, u: &[Complex64]) -> Vec<Complex64> {
        let torus = self.torus;
        let e_half: Vec<f64> =
            (0..u.len()).map(|p| (-self.sigma * torus.k2_full(p) * 0.5 * h).exp()).collect();
        let k1 = self.explicit(t, u);
        let s2: Vec<Complex64> =
            (0..u.len()).map(|p| (u[p] + k1[p] * (0.5 * h)) * e_half[p]).collect();
        let k2 = self.explicit(t + 0.5 * h, &s2);
        let s3: Vec<Complex64> = (0..u.len()).map(|p| u[p] * e_half[p] + k2[p] * (0.5 * h)).collect();
        let k3 = self.explicit(t + 0.5 * h, &s3);
        let s4: Vec<Complex64> = (0..u.len())
            .map(|p| u[p] * (e_half[p] * e_half[p]) + k3[p] * (h * e_half[p]))
            .collect();
        let k4 = self.explicit(t + h, &s4);
        (0..u.len())
            .map(|p| {
                let e = e_half[p] * e_half[p];
                u[p] * e + (k1[p] * e + (k2[p] + k3[p]) * (2.0 * e_half[p]) + k4[p]) * (h / 6.0)
            })
            .collect()
    }
}

/// Solves for `θ[v]` on the ansatz time grid with `θ(0) = θ₀`.
pub fn solve_theta(
    ansatz: &Ansatz,
    v: &dyn VelocityPath,
    theta0: &ScalarField,
    opts: &HeatOptions,
) -> Result<TemperatureSolve> {
    let times = ansatz.grid().times();
    solve_theta_at(ansatz, v, theta0, None, &times, opts)
}

/// Solves on arbitrary increasing sample times starting at `times[0] = 0`, with
/// an optional source term.
pub fn solve_theta_at(
    ansatz: &Ansatz,
    v: &dyn VelocityPath,
    theta0: &ScalarField,
    source: Option<Source<'_>>,
    times: &[f64],
    opts: &HeatOptions,
) -> Result<TemperatureSolve> {
    theta0.check_grid(ansatz.rho0())?;
    if !(theta0.min() > 0.0) {
        return Err(Error::NonPositiveInitial(theta0.min()));
    }
    if times.is_empty() || times[0] != 0.0 || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid("sample times must start at 0 and increase".into()));
    }
    let (theta_lo, theta_hi) = comparison_bounds(ansatz, theta0)?;
    let stepper = Stepper::new(ansatz, v, source, opts.dealias);
    let torus = ansatz.torus();
    let t_final = *times.last().expect("non-empty");
    let max_dt = opts.max_dt.unwrap_or(t_final / 1000.0);
    let mut u = torus.forward(theta0);
    let mut out = vec![theta0.clone()];
    let mut stats = SolverStats {
        trace: vec![[0.0, theta0.min(), theta0.max()]],
        ..SolverStats::default()
    };
    for w in times.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let rate = stepper.explicit_rate(t0).max(stepper.explicit_rate(t1));
        let mut dt = max_dt;
        if rate > 0.0 {
            dt = dt.min(opts.stability * RK4_REAL_EXTENT / rate);
        }
        let m = ((t1 - t0) / dt).ceil().max(1.0) as usize;
        let h = (t1 - t0) / m as f64;
        stats.max_ratio = stats.max_ratio.max(h * rate / RK4_REAL_EXTENT);
        for i in 0..m {
            let t = t0 + i as f64 * h;
            u = stepper.step(t, h, &u);
            stats.steps += 1;
            let th = torus.inverse(u.clone());
            let min = th.min();
            if !(min > 0.0) {
                return Err(Error::StepFailure {
                    t: t + h,
                    reason: format!("temperature lost positivity (min {min:e})"),
                });
            }
        }
        let th = torus.inverse(u.clone());
        stats.trace.push([t1, th.min(), th.max()]);
        out.push(th);
    }
    Ok(TemperatureSolve { times: times.to_vec(), theta: out, theta_lo, theta_hi, stats })
}

/// Densely sampled `h` values covering the range of the time profile.
fn h_samples(ansatz: &Ansatz) -> Vec<f64> {
    let (lo, hi) = ansatz.profile().range();
    let m = 64;
    (0..=m).map(|i| lo + (hi - lo) * i as f64 / m as f64).collect()
}

/// `F̄ = sup |(1/c)Δ log ρ̃ + (1/c²)|∇ log ρ̃|²|` over `[0,T] × Ω`.
pub fn forcing_bound(ansatz: &Ansatz) -> Result<f64> {
    let torus = ansatz.torus();
    let c = heat_capacity(ansatz.dim());
    let mut fbar: f64 = 0.0;
    for h in h_samples(ansatz) {
        let rho = ansatz.rho0().zip_map(ansatz.div_w0(), |r, d| r - h * d);
        let lr = rho.map(f64::ln);
        let lap = torus.laplacian(&lr)?;
        let g2 = torus.gradient(&lr)?.norm_sq();
        let f = lap.zip_map(&g2, |l, g| l / c + g / (c * c));
        fbar = fbar.max(f.max_abs());
    }
    Ok(fbar)
}

/// `v`-independent bounds `θ_lo ≤ θ[v] ≤ θ_hi` on `[0,T] × Ω`.
///
/// With `Z = c log θ − log ρ̃` the equation becomes
/// `ρ̃∂_tZ + (W − (2/c²)∇log ρ̃)·∇Z = (1/c)ΔZ + (1/c²)|∇Z|² + F`, so spatially
/// constant `Z₀^± ± (2F̄/ϱ̲)t` are super/sub-solutions given `ρ̃ > ϱ̲/2`.
pub fn comparison_bounds(ansatz: &Ansatz, theta0: &ScalarField) -> Result<(f64, f64)> {
    if !(theta0.min() > 0.0) {
        return Err(Error::NonPositiveInitial(theta0.min()));
    }
    let c = heat_capacity(ansatz.dim());
    let z0 = theta0.zip_map(ansatz.rho0(), |th, r| c * th.ln() - r.ln());
    let drift = 2.0 * forcing_bound(ansatz)? / ansatz.rho_lower() * ansatz.grid().t_final;
    let (rlo, rhi) = ansatz.rho_tilde_range();
    let lo = (rlo * (z0.min() - drift).exp()).powf(1.0 / c);
    let hi = (rhi * (z0.max() + drift).exp()).powf(1.0 / c);
    Ok((lo, hi))
}

/// `∂_t` of sampled fields by 7-point finite differences in time.
fn time_derivatives(times: &[f64], fields: &[ScalarField]) -> Vec<ScalarField> {
    (0..times.len())
        .map(|j| {
            let (s, w) = derivative_stencil(times, j, 7);
            let mut d = ScalarField::zeros(fields[0].dim(), fields[0].n());
            for (i, wi) in w.iter().enumerate() {
                d.axpy(*wi, &fields[s + i]);
            }
            d
        })
        .collect()
}

fn l2_space_time(times: &[f64], fields: &[ScalarField]) -> f64 {
    let sq: Vec<f64> = fields.iter().map(|f| f.inner(f)).collect();
    crate::quadrature::integrate_from(times, &sq, times[0]).max(0.0).sqrt()
}

/// Pointwise residual of the internal-energy form at every sample.
pub fn energy_residual_fields(
    sol: &TemperatureSolve,
    v: &dyn VelocityPath,
    ansatz: &Ansatz,
    source: Option<Source<'_>>,
) -> Result<Vec<ScalarField>> {
    let torus = ansatz.torus();
    let c = heat_capacity(ansatz.dim());
    let dth = time_derivatives(&sol.times, &sol.theta);
    sol.times
        .iter()
        .zip(&sol.theta)
        .zip(&dth)
        .map(|((&t, th), th_t)| {
            let rho = ansatz.rho_tilde(t);
            let mut w = v.velocity(t);
            w.axpy(1.0, &ansatz.grad_psi(t));
            let grad = torus.gradient(th)?;
            let lap = torus.laplacian(th)?;
            let gw = ansatz.grad_rho_tilde(t).dot(&w).zip_map(&rho, |a, r| a / r);
            let lpsi = ansatz.lap_psi(t);
            let adv = w.dot(&grad);
            let mut r = rho.mul(th_t).add(&adv).scale(c).sub(&lap);
            r = r.add(&th.mul(&lpsi)).sub(&th.mul(&gw));
            if let Some(s) = source {
                r = r.sub(&s(t));
            }
            Ok(r)
        })
        .collect()
}

/// `L²((0,T)×Ω)` norm of the internal-energy residual.
pub fn energy_residual(
    sol: &TemperatureSolve,
    v: &dyn VelocityPath,
    ansatz: &Ansatz,
    source: Option<Source<'_>>,
) -> Result<f64> {
    Ok(l2_space_time(&sol.times, &energy_residual_fields(sol, v, ansatz, source)?))
}

/// `L²` norm of the internal-energy residual divided pointwise by `θ`.
pub fn energy_residual_over_theta(
    sol: &TemperatureSolve,
    v: &dyn VelocityPath,
    ansatz: &Ansatz,
    source: Option<Source<'_>>,
) -> Result<f64> {
    let r = energy_residual_fields(sol, v, ansatz, source)?;
    let q: Vec<ScalarField> = r.iter().zip(&sol.theta).map(|(r, th)| r.zip_map(th, |a, b| a / b)).collect();
    Ok(l2_space_time(&sol.times, &q))
}

/// `L²` norm of the entropy-form residual
/// `ρ̃∂_tZ + W·∇Z − Δ log θ − |∇ log θ|² − S/θ`, `Z = c log θ − log ρ̃`.
pub fn entropy_residual(
    sol: &TemperatureSolve,
    v: &dyn VelocityPath,
    ansatz: &Ansatz,
    source: Option<Source<'_>>,
) -> Result<f64> {
    let torus = ansatz.torus();
    let c = heat_capacity(ansatz.dim());
    let logs: Vec<ScalarField> = sol.theta.iter().map(|th| th.map(f64::ln)).collect();
    let dlog = time_derivatives(&sol.times, &logs);
    let res = sol
        .times
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let rho = ansatz.rho_tilde(t);
            let mut w = v.velocity(t);
            w.axpy(1.0, &ansatz.grad_psi(t));
            let lt = &logs[j];
            // ∂_t log ρ̃ is taken from the closed form, ∂_t log θ from the samples
            let dz = dlog[j].scale(c).sub(&ansatz.dt_rho_tilde(t).zip_map(&rho, |a, r| a / r));
            let z = lt.scale(c).sub(&rho.map(f64::ln));
            let glt = torus.gradient(lt)?;
            let mut r = rho.mul(&dz).add(&w.dot(&torus.gradient(&z)?));
            r = r.sub(&torus.laplacian(lt)?).sub(&glt.norm_sq());
            if let Some(s) = source {
                r = r.sub(&s(t).zip_map(&sol.theta[j], |a, b| a / b));
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(l2_space_time(&sol.times, &res))
}

/// Largest mismatch over the samples of
/// `d/dt ∫cρ̃θ = ∫θ((∇ρ̃/ρ̃)·W − ΔΨ)` (no source).
pub fn energy_budget_defect(
    sol: &TemperatureSolve,
    v: &dyn VelocityPath,
    ansatz: &Ansatz,
) -> Result<f64> {
    let c = heat_capacity(ansatz.dim());
    let dth = time_derivatives(&sol.times, &sol.theta);
    let mut worst: f64 = 0.0;
    for (j, &t) in sol.times.iter().enumerate() {
        // d/dt(ρ̃θ) with the closed-form ∂_tρ̃
        let de = ansatz.dt_rho_tilde(t).mul(&sol.theta[j]).add(&ansatz.rho_tilde(t).mul(&dth[j])).scale(c);
        let mut w = v.velocity(t);
        w.axpy(1.0, &ansatz.grad_psi(t));
        let rho = ansatz.rho_tilde(t);
        let gw = ansatz.grad_rho_tilde(t).dot(&w).zip_map(&rho, |a, r| a / r);
        let flux = sol.theta[j].mul(&gw.sub(&ansatz.lap_psi(t))).mean();
        worst = worst.max((de.mean() - flux).abs());
    }
    Ok(worst)
}

/// Random solenoidal velocity path: independent band-limited fields with
/// `‖v‖∞ = amplitude` at the given knots, linearly interpolated between them.
pub fn random_solenoidal_path<R: rand::Rng>(
    rng: &mut R,
    torus: &Torus,
    knots: &[f64],
    kmax: i32,
    amplitude: f64,
) -> Result<SampledVelocity> {
    let (dim, n) = (torus.dim(), torus.n());
    let fields = knots
        .iter()
        .map(|_| {
            let comps = (0..dim)
                .map(|_| crate::torus::random_band_limited(rng, dim, n, kmax, true))
                .collect();
            let w = VectorField::from_components(comps)?;
            let (v, _) = torus.helmholtz_decompose(&w)?;
            let m = v.max_norm();
            Ok(if m > 0.0 { v.scale(amplitude / m) } else { v })
        })
        .collect::<Result<Vec<_>>>()?;
    SampledVelocity::new(knots.to_vec(), fields)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::preset;
    use crate::torus::GridSpec;
    use std::f64::consts::TAU;

    fn equilibrium(dim: usize, n: usize, nt: usize, t: f64) -> Ansatz {
        let grid = GridSpec::new(dim, n, nt, t).unwrap();
        let d = preset("equilibrium", dim, n).unwrap();
        Ansatz::build(&grid, &d.rho0.scale(1.5), &d.u0).unwrap()
    }

    fn manufactured(n: usize) -> (f64, f64, f64) {
        let d = preset("analytic", 2, n).unwrap();
        let grid = GridSpec::new(2, n, 81, 0.5).unwrap();
        let a = Ansatz::build(&grid, &d.rho0, &d.u0).unwrap();
        let vel = move |_t: f64| VectorField::from_fn(2, n, |x| [0.3 * (TAU * x[1]).sin(), 0.0, 0.0]);
        let exact = move |t: f64| ScalarField::from_fn(2, n, |x| 2.0 + (TAU * x[0]).sin() * (TAU * t).cos());
        let c = heat_capacity(2);
        let a2 = a.clone();
        let src = move |t: f64| {
            let th = exact(t);
            let th_t = ScalarField::from_fn(2, n, |x| -TAU * (TAU * x[0]).sin() * (TAU * t).sin());
            let gx = ScalarField::from_fn(2, n, |x| TAU * (TAU * x[0]).cos() * (TAU * t).cos());
            let lap = ScalarField::from_fn(2, n, |x| -TAU * TAU * (TAU * x[0]).sin() * (TAU * t).cos());
            let rho = a2.rho_tilde(t);
            let mut w = vel(t);
            w.axpy(1.0, &a2.grad_psi(t));
            let gw = a2.grad_rho_tilde(t).dot(&w).zip_map(&rho, |p, r| p / r);
            rho.mul(&th_t)
                .add(&w.comp(0).mul(&gx))
                .scale(c)
                .sub(&lap)
                .add(&th.mul(&a2.lap_psi(t)))
                .sub(&th.mul(&gw))
        };
        let sol = solve_theta_at(&a, &vel, &exact(0.0), Some(&src), &grid.times(), &HeatOptions::default()).unwrap();
        let r = energy_residual(&sol, &vel, &a, Some(&src)).unwrap();
        let rt = energy_residual_over_theta(&sol, &vel, &a, Some(&src)).unwrap();
        let rs = entropy_residual(&sol, &vel, &a, Some(&src)).unwrap();
        (r, rt, rs)
    }

    #[test]
    fn manufactured_solution_converges_and_forms_agree() {
        let (r32, _, _) = manufactured(32);
        let (r64, rt64, rs64) = manufactured(64);
        assert!(r64 <= 1e-6 && rs64 <= 1e-6, "{r64} {rs64}");
        assert!(r32 / r64 >= 4.0, "{r32} {r64}");
        assert!((rs64 - rt64).abs() <= 10.0 * SOLVER_TOL);
    }

    #[test]
    fn equilibrium_stays_constant() {
        let a = equilibrium(2, 16, 6, 1.0);
        let th0 = ScalarField::constant(2, 16, 0.7);
        let sol = solve_theta(&a, &ZeroVelocity { dim: 2, n: 16 }, &th0, &HeatOptions::default()).unwrap();
        for th in &sol.theta {
            assert!(th.sub(&th0).max_abs() < 1e-13);
        }
        assert_eq!((sol.theta_lo, sol.theta_hi), (0.7, 0.7));
        let v = ZeroVelocity { dim: 2, n: 16 };
        assert!(energy_residual(&sol, &v, &a, None).unwrap() <= SOLVER_TOL);
        assert!(entropy_residual(&sol, &v, &a, None).unwrap() <= SOLVER_TOL);
    }

    #[test]
    fn fourier_mode_decay() {
        for (dim, n) in [(2, 16), (3, 8)] {
            let rho = 1.5;
            let a = equilibrium(dim, n, 11, 0.05);
            let th0 = ScalarField::from_fn(dim, n, |x| 1.0 + 0.1 * (TAU * x[0]).sin());
            let sol = solve_theta(&a, &ZeroVelocity { dim, n }, &th0, &HeatOptions::default()).unwrap();
            let c = heat_capacity(dim);
            for (t, th) in sol.times.iter().zip(&sol.theta) {
                let decay = (-TAU * TAU * t / (c * rho)).exp();
                let exact = ScalarField::from_fn(dim, n, |x| 1.0 + 0.1 * decay * (TAU * x[0]).sin());
                assert!(th.sub(&exact).max_abs() < 1e-11, "t={t}");
            }
        }
        // the three-dimensional rate is (2π)²·2t/(3ρ)
        assert_eq!(heat_capacity(3), 1.5);
    }

    fn analytic_setup(n: usize) -> (Ansatz, ScalarField, SampledVelocity) {
        let d = preset("analytic", 2, n).unwrap();
        let grid = GridSpec::new(2, n, 201, 0.4).unwrap();
        let a = Ansatz::build(&grid, &d.rho0, &d.u0).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9);
        let v = random_solenoidal_path(&mut rng, a.torus(), &[0.0, 0.2, 0.4], 3, 0.5).unwrap();
        (a, d.theta0, v)
    }

    #[test]
    fn budget_closes_and_bounds_hold() {
        let (a, th0, v) = analytic_setup(32);
        let sol = solve_theta(&a, &v, &th0, &HeatOptions::default()).unwrap();
        let defect = energy_budget_defect(&sol, &v, &a).unwrap();
        assert!(defect <= 1e-5, "{defect}");
        assert!(sol.min() >= sol.theta_lo - 1e-6 && sol.max() <= sol.theta_hi + 1e-6);
        let (lo, hi) = comparison_bounds(&a, &th0).unwrap();
        assert_eq!((lo.to_bits(), hi.to_bits()), (sol.theta_lo.to_bits(), sol.theta_hi.to_bits()));
        assert!(sol.stats.steps > 0 && sol.stats.max_ratio <= 0.4 + 1e-12);
    }

    #[test]
    fn solution_is_linear_in_initial_data() {
        let (a, th0, v) = analytic_setup(16);
        let th1 = ScalarField::from_fn(2, 16, |x| 2.0 + 0.3 * (TAU * x[0]).cos());
        let o = HeatOptions::default();
        let s0 = solve_theta(&a, &v, &th0, &o).unwrap();
        let s1 = solve_theta(&a, &v, &th1, &o).unwrap();
        let mix = th0.scale(0.5).add(&th1.scale(2.0));
        let sm = solve_theta(&a, &v, &mix, &o).unwrap();
        for j in 0..sm.theta.len() {
            let comb = s0.theta[j].scale(0.5).add(&s1.theta[j].scale(2.0));
            assert!(sm.theta[j].sub(&comb).max_abs() <= 1e-9);
        }
    }

    #[test]
    fn rejects_non_positive_data() {
        let a = equilibrium(2, 8, 3, 1.0);
        let th0 = ScalarField::from_fn(2, 8, |x| (TAU * x[0]).sin());
        let v = ZeroVelocity { dim: 2, n: 8 };
        assert!(matches!(
            solve_theta(&a, &v, &th0, &HeatOptions::default()),
            Err(Error::NonPositiveInitial(_))
        ));
    }

    #[test]
    fn sampled_velocity_interpolates() {
        let f0 = VectorField::from_fn(2, 8, |_| [1.0, 0.0, 0.0]);
        let f1 = VectorField::from_fn(2, 8, |_| [3.0, 2.0, 0.0]);
        let p = SampledVelocity::new(vec![0.0, 1.0], vec![f0.clone(), f1.clone()]).unwrap();
        assert_eq!(p.velocity(0.0), f0);
        assert_eq!(p.velocity(1.0), f1);
        assert!((p.velocity(0.25).at(0)[1] - 0.5).abs() < 1e-15);
    }
}
