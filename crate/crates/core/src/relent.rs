//! Constitutive laws, weak-form residuals, total energy, entropy production,
//! the relative entropy functional and a short-time classical solver.
//!
//! Units are fixed with `p = ρθ` and heat conductivity `1`; the internal
//! energy is `e = cθ` with `c = d/2` and the entropy `s = c log θ − log ρ`.

use rayon::prelude::*;
use serde::Serialize;

use crate::heat_capacity;
use crate::quadrature::derivative_stencil;
use crate::torus::{ScalarField, Torus, VectorField};
use crate::{Error, Result};

/// Pointwise constitutive values at one state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Constitutive {
    pub p: f64,
    pub e: f64,
    pub s: f64,
}

/// `(p, e, s)` for a gas in `dim` dimensions.
pub fn constitutive(dim: usize, rho: f64, theta: f64) -> Result<Constitutive> {
    if !(rho > 0.0 && theta > 0.0) {
        return Err(Error::NonPositiveState { rho, theta });
    }
    let c = heat_capacity(dim);
    Ok(Constitutive { p: rho * theta, e: c * theta, s: c * theta.ln() - rho.ln() })
}

/// Ballistic free energy `H_Θ(ρ, θ) = ρ(cθ − Θ s(ρ, θ))`.
pub fn ballistic_free_energy(dim: usize, big_theta: f64, rho: f64, theta: f64) -> f64 {
    let c = heat_capacity(dim);
    rho * (c * theta - big_theta * (c * theta.ln() - rho.ln()))
}

/// `∂H_Θ/∂ρ` at `(ρ, θ)`: `cθ − cΘ log θ + Θ log ρ + Θ`.
///
/// From `H_Θ = cρθ − cΘρ log θ + Θρ log ρ`, differentiated in `ρ` at fixed `θ`.
pub fn ballistic_free_energy_drho(dim: usize, big_theta: f64, rho: f64, theta: f64) -> f64 {
    let c = heat_capacity(dim);
    c * theta - c * big_theta * theta.ln() + big_theta * rho.ln() + big_theta
}

/// Pointwise relative entropy density between `(ρ, θ, u)` and `(r, Θ, U)`.
pub fn rel_entropy_density(dim: usize, a: (f64, f64, &[f64; 3]), b: (f64, f64, &[f64; 3])) -> f64 {
    let (rho, theta, u) = a;
    let (r, big, uu) = b;
    let du: f64 = (0..dim).map(|i| (u[i] - uu[i]).powi(2)).sum();
    0.5 * rho * du + ballistic_free_energy(dim, big, rho, theta)
        - ballistic_free_energy_drho(dim, big, r, big) * (rho - r)
        - ballistic_free_energy(dim, big, r, big)
}

/// Time-sampled gas trajectory `(ρ, θ, u)`.
#[derive(Clone, Debug)]
pub struct GasState {
    pub times: Vec<f64>,
    pub rho: Vec<ScalarField>,
    pub theta: Vec<ScalarField>,
    pub u: Vec<VectorField>,
}

impl GasState {
    pub fn new(times: Vec<f64>, rho: Vec<ScalarField>, theta: Vec<ScalarField>, u: Vec<VectorField>) -> Result<Self> {
        let m = times.len();
        if m == 0 || rho.len() != m || theta.len() != m || u.len() != m {
            return Err(Error::GridMismatch(format!(
                "{} times, {} rho, {} theta, {} u",
                m,
                rho.len(),
                theta.len(),
                u.len()
            )));
        }
        let (dim, n) = (rho[0].dim(), rho[0].n());
        for j in 0..m {
            let ok = [rho[j].dim() == dim, theta[j].dim() == dim, u[j].dim() == dim];
            let okn = [rho[j].n() == n, theta[j].n() == n, u[j].n() == n];
            if ok.iter().chain(&okn).any(|b| !b) {
                return Err(Error::GridMismatch(format!("sample {j}")));
            }
            let (rmin, tmin) = (rho[j].min(), theta[j].min());
            if !(rmin > 0.0 && tmin > 0.0) {
                return Err(Error::NonPositiveState { rho: rmin, theta: tmin });
            }
        }
        Ok(GasState { times, rho, theta, u })
    }

    /// Constant state `(ρ, θ, u)` at the given times.
    pub fn constant(dim: usize, n: usize, times: Vec<f64>, rho: f64, theta: f64, u: [f64; 3]) -> Result<Self> {
        let m = times.len();
        let r = ScalarField::constant(dim, n, rho);
        let th = ScalarField::constant(dim, n, theta);
        let v = VectorField::from_fn(dim, n, |_| u);
        GasState::new(times, vec![r; m], vec![th; m], vec![v; m])
    }

    pub fn dim(&self) -> usize {
        self.rho[0].dim()
    }

    pub fn n(&self) -> usize {
        self.rho[0].n()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn momentum(&self, j: usize) -> VectorField {
        self.u[j].mul_scalar(&self.rho[j])
    }

    pub fn pressure(&self, j: usize) -> ScalarField {
        self.rho[j].mul(&self.theta[j])
    }

    pub fn entropy(&self, j: usize) -> ScalarField {
        let c = heat_capacity(self.dim());
        self.rho[j].zip_map(&self.theta[j], |r, t| c * t.ln() - r.ln())
    }

    /// `∫ρ(½|u|² + cθ)` at sample `j`.
    pub fn energy_at(&self, j: usize) -> f64 {
        let c = heat_capacity(self.dim());
        let k = self.u[j].norm_sq().mul(&self.rho[j]).scale(0.5);
        k.add(&self.rho[j].mul(&self.theta[j]).scale(c)).mean()
    }

    /// Lower and upper bounds `(ρ_min, ρ_max, θ_min, θ_max, |u|_max)` over all samples.
    pub fn bounds(&self) -> [f64; 5] {
        let mut b = [f64::INFINITY, 0.0, f64::INFINITY, 0.0, 0.0];
        for j in 0..self.len() {
            b[0] = b[0].min(self.rho[j].min());
            b[1] = b[1].max(self.rho[j].max());
            b[2] = b[2].min(self.theta[j].min());
            b[3] = b[3].max(self.theta[j].max());
            b[4] = b[4].max(self.u[j].max_norm());
        }
        b
    }

    fn check_same_samples(&self, other: &GasState) -> Result<()> {
        let same_t = self.len() == other.len()
            && self.times.iter().zip(&other.times).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        if !same_t || self.dim() != other.dim() || self.n() != other.n() {
            return Err(Error::GridMismatch("trajectories are not sampled alike".into()));
        }
        Ok(())
    }
}

/// Total energy samples and the conservation defect `max_t |E(t) − E(0)|`.
#[derive(Clone, Debug, Serialize)]
pub struct EnergyReport {
    pub times: Vec<f64>,
    pub energy: Vec<f64>,
    pub defect: f64,
}

pub fn total_energy(state: &GasState) -> EnergyReport {
    let energy: Vec<f64> = (0..state.len()).map(|j| state.energy_at(j)).collect();
    let defect = energy.iter().map(|e| (e - energy[0]).abs()).fold(0.0, f64::max);
    EnergyReport { times: state.times.clone(), energy, defect }
}

/// Sample-wise time derivatives with a seven-point stencil.
fn time_derivative<T: Clone + Send + Sync>(
    times: &[f64],
    fields: &[T],
    zero: impl Fn() -> T + Sync,
    axpy: impl Fn(&mut T, f64, &T) + Sync,
) -> Vec<T> {
    (0..times.len())
        .into_par_iter()
        .map(|j| {
            let (s, w) = derivative_stencil(times, j, 7);
            let mut d = zero();
            for (i, wi) in w.iter().enumerate() {
                axpy(&mut d, *wi, &fields[s + i]);
            }
            d
        })
        .collect()
}

fn dt_scalar(times: &[f64], f: &[ScalarField]) -> Vec<ScalarField> {
    let (dim, n) = (f[0].dim(), f[0].n());
    time_derivative(times, f, || ScalarField::zeros(dim, n), |d, w, x| d.axpy(w, x))
}

fn dt_vector(times: &[f64], f: &[VectorField]) -> Vec<VectorField> {
    let (dim, n) = (f[0].dim(), f[0].n());
    time_derivative(times, f, || VectorField::zeros(dim, n), |d, w, x| d.axpy(w, x))
}

/// Space-time test function `η(s)·ψ(x)` with `s = (t − t₀)/(t₁ − t₀)`,
/// `η(s) = s^m (1 − s)²` and `ψ = cos(2πk·x)` or `sin(2πk·x)`.
///
/// `η` vanishes to second order at the final sample, so the pairing at the
/// end of the window drops out. With `shifted = true`, `ψ` is replaced by
/// `1 + cos(2πk·x)` (or `1 + sin`), which is nonnegative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TestFunction {
    pub k: [i64; 3],
    pub sine: bool,
    pub power: u32,
    pub shifted: bool,
}

impl TestFunction {
    fn eta(&self, s: f64) -> f64 {
        s.powi(self.power as i32) * (1.0 - s).powi(2)
    }

    fn eta_prime(&self, s: f64) -> f64 {
        let m = self.power as i32;
        let a = if m == 0 { 0.0 } else { m as f64 * s.powi(m - 1) * (1.0 - s).powi(2) };
        a - 2.0 * s.powi(m) * (1.0 - s)
    }

    fn phase(&self, x: &[f64; 3]) -> f64 {
        2.0 * std::f64::consts::PI * (0..3).map(|a| self.k[a] as f64 * x[a]).sum::<f64>()
    }

    fn psi(&self, dim: usize, n: usize) -> ScalarField {
        let off = if self.shifted { 1.0 } else { 0.0 };
        ScalarField::from_fn(dim, n, |x| {
            let p = self.phase(x);
            off + if self.sine { p.sin() } else { p.cos() }
        })
    }

    fn grad_psi(&self, dim: usize, n: usize) -> VectorField {
        let tau = 2.0 * std::f64::consts::PI;
        VectorField::from_fn(dim, n, |x| {
            let p = self.phase(x);
            let d = if self.sine { p.cos() } else { -p.sin() };
            [tau * self.k[0] as f64 * d, tau * self.k[1] as f64 * d, tau * self.k[2] as f64 * d]
        })
    }
}

/// Fixed dictionary of test functions: low wavevectors, both parities and
/// `η` powers `0, 1`.
pub fn test_family(dim: usize, shifted: bool) -> Vec<TestFunction> {
    let mut ks: Vec<[i64; 3]> = vec![[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [1, -1, 0], [2, 0, 0], [0, 2, 0], [2, 1, 0]];
    if dim == 3 {
        ks.extend([[0, 0, 1], [1, 0, 1], [0, 1, -1]]);
    }
    let mut out = Vec::new();
    for k in ks {
        for sine in [false, true] {
            if sine && k == [0, 0, 0] {
                continue;
            }
            for power in 0..2 {
                out.push(TestFunction { k, sine, power, shifted });
            }
        }
    }
    out
}

/// Space-time pairing `∫∫(η′(t)·A(t) + η(t)·B(t)) + η(t₀)·C` where
/// `A_j = ∫a_j ψ`, `B_j = ∫(b_j·∇ψ + β_j ψ)`; Simpson in time.
struct Pairing<'a> {
    times: &'a [f64],
    a: Vec<ScalarField>,
    b: Vec<VectorField>,
    beta: Vec<ScalarField>,
    c: ScalarField,
}

impl Pairing<'_> {
    fn eval(&self, tf: &TestFunction) -> f64 {
        let (dim, n) = (self.c.dim(), self.c.n());
        let psi = tf.psi(dim, n);
        let gpsi = tf.grad_psi(dim, n);
        let (t0, t1) = (self.times[0], self.times[self.times.len() - 1]);
        let len = t1 - t0;
        let vals: Vec<f64> = (0..self.times.len())
            .map(|j| {
                let s = (self.times[j] - t0) / len;
                let a = self.a[j].inner(&psi);
                let b = self.b[j].dot(&gpsi).mean() + self.beta[j].inner(&psi);
                tf.eta_prime(s) / len * a + tf.eta(s) * b
            })
            .collect();
        crate::quadrature::integrate_from(self.times, &vals, t0) + tf.eta(0.0) * self.c.inner(&psi)
    }
}

/// Defects of the mass, momentum and internal-energy weak forms, one entry per
/// test function (momentum: per test function and component).
#[derive(Clone, Debug, Serialize)]
pub struct WeakResiduals {
    pub mass: Vec<f64>,
    pub momentum: Vec<f64>,
    pub energy: Vec<f64>,
}

impl WeakResiduals {
    pub fn max_abs(&self) -> [f64; 3] {
        let m = |v: &[f64]| v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        [m(&self.mass), m(&self.momentum), m(&self.energy)]
    }
}

/// Weak-form residuals of the trajectory over `family`. The initial data are
/// the first sample.
///
/// The energy form pairs `c ρ₀θ₀` with `φ(0)`, consistent with the pointwise
/// equation `∂_t(cρθ) + div(cρθu) − Δθ = −ρθ div u`.
pub fn weak_residuals(state: &GasState, family: &[TestFunction]) -> Result<WeakResiduals> {
    let (dim, n) = (state.dim(), state.n());
    let torus = Torus::new(dim, n);
    let c = heat_capacity(dim);
    let m = state.len();
    let zeros = vec![ScalarField::zeros(dim, n); m];
    let mom: Vec<VectorField> = (0..m).map(|j| state.momentum(j)).collect();
    let mass = Pairing { times: &state.times, a: state.rho.clone(), b: mom.clone(), beta: zeros.clone(), c: state.rho[0].clone() };
    let mass_r: Vec<f64> = family.par_iter().map(|tf| mass.eval(tf)).collect();

    let mut momentum_r = vec![0.0; family.len() * dim];
    for a in 0..dim {
        let b: Vec<VectorField> = (0..m)
            .map(|j| {
                let mut f = state.u[j].mul_scalar(mom[j].comp(a));
                f.comp_mut(a).axpy(1.0, &state.pressure(j));
                f
            })
            .collect();
        let ma: Vec<ScalarField> = mom.iter().map(|v| v.comp(a).clone()).collect();
        let p = Pairing { times: &state.times, a: ma, b, beta: zeros.clone(), c: mom[0].comp(a).clone() };
        let r: Vec<f64> = family.par_iter().map(|tf| p.eval(tf)).collect();
        for (i, x) in r.into_iter().enumerate() {
            momentum_r[i * dim + a] = x;
        }
    }

    let mut a = Vec::with_capacity(m);
    let mut b = Vec::with_capacity(m);
    let mut beta = Vec::with_capacity(m);
    for j in 0..m {
        let p = state.pressure(j);
        a.push(p.scale(c));
        let mut f = state.u[j].mul_scalar(&p).scale(c);
        f.axpy(-1.0, &torus.gradient(&state.theta[j])?);
        b.push(f);
        beta.push(p.mul(&torus.divergence(&state.u[j])?).scale(-1.0));
    }
    let e = Pairing { times: &state.times, a, b, beta, c: state.pressure(0).scale(c) };
    let energy_r: Vec<f64> = family.par_iter().map(|tf| e.eval(tf)).collect();
    Ok(WeakResiduals { mass: mass_r, momentum: momentum_r, energy: energy_r })
}

/// Signed entropy production per (nonnegative) test function:
/// `−∫∫ρs∂_tφ − ∫∫ρs u·∇φ + ∫∫(∇θ/θ)·∇φ − ∫∫(|∇θ|²/θ²)φ − ∫ρ₀s₀φ(0)`.
///
/// Admissible states give values `≥ −tolerance`; smooth solutions give `≈ 0`.
pub fn entropy_inequality_residual(state: &GasState, family: &[TestFunction]) -> Result<Vec<f64>> {
    let (dim, n) = (state.dim(), state.n());
    let torus = Torus::new(dim, n);
    let m = state.len();
    let mut a = Vec::with_capacity(m);
    let mut b = Vec::with_capacity(m);
    let mut beta = Vec::with_capacity(m);
    for j in 0..m {
        let rs = state.rho[j].mul(&state.entropy(j));
        a.push(rs.scale(-1.0));
        let glog = torus.gradient(&state.theta[j].map(f64::ln))?;
        let mut f = state.u[j].mul_scalar(&rs).scale(-1.0);
        f.axpy(1.0, &glog);
        b.push(f);
        beta.push(glog.norm_sq().scale(-1.0));
    }
    let c0 = state.rho[0].mul(&state.entropy(0)).scale(-1.0);
    let p = Pairing { times: &state.times, a, b, beta, c: c0 };
    Ok(family.par_iter().map(|tf| p.eval(tf)).collect())
}

/// Relative entropy `𝓔(ρ, θ, u | r, Θ, U)` at every sample.
pub fn rel_entropy(state: &GasState, reference: &GasState) -> Result<Vec<f64>> {
    state.check_same_samples(reference)?;
    let dim = state.dim();
    Ok((0..state.len())
        .into_par_iter()
        .map(|j| {
            let np = state.rho[j].len();
            let mut s = 0.0;
            for p in 0..np {
                let a = (state.rho[j].data()[p], state.theta[j].data()[p], &state.u[j].at(p));
                let b = (reference.rho[j].data()[p], reference.theta[j].data()[p], &reference.u[j].at(p));
                s += rel_entropy_density(dim, a, b);
            }
            s / np as f64
        })
        .collect())
}

/// Both sides of the relative entropy inequality at every sample `τ`.
///
/// `rhs_terms[j]` holds the four cumulative right-hand integrals (transport
/// of `U`, entropy mismatch, reference pressure, heat cross term) over
/// `[t₀, τ_j]`; `dissipation[j]` is `∫∫Θ|∇θ|²/θ²`; `defect = rhs − lhs`.
#[derive(Clone, Debug, Serialize)]
pub struct RelEntropyReport {
    pub times: Vec<f64>,
    pub value: Vec<f64>,
    pub dissipation: Vec<f64>,
    pub rhs_terms: Vec<[f64; 4]>,
    pub defect: Vec<f64>,
}

impl RelEntropyReport {
    pub fn min_defect(&self) -> f64 {
        self.defect.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs_defect(&self) -> f64 {
        self.defect.iter().fold(0.0f64, |a, x| a.max(x.abs()))
    }
}

fn cumulative(times: &[f64], vals: &[f64]) -> Vec<f64> {
    (0..times.len())
        .map(|j| if j == 0 { 0.0 } else { crate::quadrature::integrate_from(&times[..=j], &vals[..=j], times[0]) })
        .collect()
}

pub fn rel_entropy_inequality_residual(traj: &GasState, reference: &GasState) -> Result<RelEntropyReport> {
    traj.check_same_samples(reference)?;
    let (dim, n) = (traj.dim(), traj.n());
    let torus = Torus::new(dim, n);
    let value = rel_entropy(traj, reference)?;
    let p_ref: Vec<ScalarField> = (0..reference.len()).map(|j| reference.pressure(j)).collect();
    let du = dt_vector(&reference.times, &reference.u);
    let dth = dt_scalar(&reference.times, &reference.theta);
    let dp = dt_scalar(&reference.times, &p_ref);
    let per: Vec<[f64; 5]> = (0..traj.len())
        .into_par_iter()
        .map(|j| -> Result<[f64; 5]> {
            let (rho, th, u) = (&traj.rho[j], &traj.theta[j], &traj.u[j]);
            let (r, big, uu) = (&reference.rho[j], &reference.theta[j], &reference.u[j]);
            let diff = uu.sub(u);
            let rd = diff.mul_scalar(rho);
            let mut t1 = rd.dot(&du[j]);
            for i in 0..dim {
                let g = torus.gradient(uu.comp(i))?;
                t1 = t1.add(&rd.comp(i).mul(&u.dot(&g)));
            }
            t1 = t1.sub(&traj.pressure(j).mul(&torus.divergence(uu)?));
            let ds = rho.mul(&traj.entropy(j).sub(&reference.entropy(j)));
            let gbig = torus.gradient(big)?;
            let t2 = ds.mul(&dth[j].add(&u.dot(&gbig))).scale(-1.0);
            let ratio = rho.zip_map(r, |a, b| a / b);
            let t3 = ratio.map(|q| 1.0 - q).mul(&dp[j]).sub(&ratio.mul(&u.dot(&torus.gradient(&p_ref[j])?)));
            let gth = torus.gradient(th)?;
            let inv = th.map(|x| 1.0 / x);
            let t4 = gth.dot(&gbig).mul(&inv);
            let dis = gth.norm_sq().mul(&inv).mul(&inv).mul(big);
            Ok([t1.mean(), t2.mean(), t3.mean(), t4.mean(), dis.mean()])
        })
        .collect::<Result<_>>()?;
    let col = |i: usize| cumulative(&traj.times, &per.iter().map(|x| x[i]).collect::<Vec<_>>());
    let cols: Vec<Vec<f64>> = (0..5).map(col).collect();
    let mut rhs_terms = Vec::with_capacity(traj.len());
    let mut defect = Vec::with_capacity(traj.len());
    for j in 0..traj.len() {
        let terms = [cols[0][j], cols[1][j], cols[2][j], cols[3][j]];
        let lhs = value[j] - value[0] + cols[4][j];
        defect.push(terms.iter().sum::<f64>() - lhs);
        rhs_terms.push(terms);
    }
    Ok(RelEntropyReport { times: traj.times.clone(), value, dissipation: cols[4].clone(), rhs_terms, defect })
}

/// Controls for [`classical_solve`].
#[derive(Clone, Debug)]
pub struct ClassicalOptions {
    /// Advective CFL number relative to `dx/(|u| + sound speed)`.
    pub cfl: f64,
    /// Fraction of the RK4 stability limit used for the heat term.
    pub diffusion_safety: f64,
    /// Largest admissible spectral tail fraction of `u` and `θ`.
    pub tail_tol: f64,
    /// Multiplier on the number of steps (2 halves every step).
    pub refine: usize,
}

impl Default for ClassicalOptions {
    fn default() -> Self {
        ClassicalOptions { cfl: 0.25, diffusion_safety: 0.5, tail_tol: 1e-6, refine: 1 }
    }
}

/// Conservative variables `(ρ, m, ℰ)` with `ℰ = ½|m|²/ρ + cρθ`.
#[derive(Clone)]
struct Conserved {
    rho: ScalarField,
    m: VectorField,
    e: ScalarField,
}

impl Conserved {
    fn from_primitive(rho: &ScalarField, theta: &ScalarField, u: &VectorField) -> Self {
        let c = heat_capacity(rho.dim());
        let m = u.mul_scalar(rho);
        let e = u.norm_sq().mul(rho).scale(0.5).add(&rho.mul(theta).scale(c));
        Conserved { rho: rho.clone(), m, e }
    }

    fn primitive(&self) -> (VectorField, ScalarField) {
        let c = heat_capacity(self.rho.dim());
        let inv = self.rho.map(|r| 1.0 / r);
        let u = self.m.mul_scalar(&inv);
        let kin = u.norm_sq().mul(&self.rho).scale(0.5);
        let theta = self.e.sub(&kin).mul(&inv).scale(1.0 / c);
        (u, theta)
    }

    fn axpy(&self, s: f64, d: &Conserved) -> Conserved {
        let mut out = self.clone();
        out.rho.axpy(s, &d.rho);
        out.m.axpy(s, &d.m);
        out.e.axpy(s, &d.e);
        out
    }
}

/// Right-hand side of the conservative system, dealiased by the 2/3 rule.
fn rhs(torus: &Torus, q: &Conserved) -> Result<Conserved> {
    let dim = torus.dim();
    let (u, theta) = q.primitive();
    let p = q.rho.mul(&theta);
    let drho = torus.divergence(&q.m)?.scale(-1.0);
    let mut dm = Vec::with_capacity(dim);
    let gp = torus.gradient(&p)?;
    for a in 0..dim {
        let flux = u.mul_scalar(q.m.comp(a));
        let r = torus.divergence(&flux)?.add(gp.comp(a)).scale(-1.0);
        dm.push(torus.dealias(&r)?);
    }
    let ef = u.mul_scalar(&q.e.add(&p));
    let de = torus.laplacian(&theta)?.sub(&torus.divergence(&ef)?);
    Ok(Conserved { rho: torus.dealias(&drho)?, m: VectorField::from_components(dm)?, e: torus.dealias(&de)? })
}

fn rk4(torus: &Torus, q: &Conserved, dt: f64) -> Result<Conserved> {
    let k1 = rhs(torus, q)?;
    let k2 = rhs(torus, &q.axpy(0.5 * dt, &k1))?;
    let k3 = rhs(torus, &q.axpy(0.5 * dt, &k2))?;
    let k4 = rhs(torus, &q.axpy(dt, &k3))?;
    Ok(q.axpy(dt / 6.0, &k1).axpy(dt / 3.0, &k2).axpy(dt / 3.0, &k3).axpy(dt / 6.0, &k4))
}

fn tail(torus: &Torus, u: &VectorField, theta: &ScalarField) -> f64 {
    u.comps().iter().map(|f| torus.tail_fraction(f)).fold(torus.tail_fraction(theta), f64::max)
}

/// Classical solution of the Euler–Fourier system sampled at `times`
/// (increasing, starting at the data time).
///
/// Explicit RK4 on `(ρ, m, ℰ)` with spectral derivatives; the total energy
/// `∫ℰ` is conserved up to round-off. After every step the spectral tail
/// fraction of `u` and `θ` must stay below `tail_tol`, otherwise
/// [`Error::BlowupSuspected`] is returned.
pub fn classical_solve_at(
    rho0: &ScalarField,
    theta0: &ScalarField,
    u0: &VectorField,
    times: &[f64],
    opts: &ClassicalOptions,
) -> Result<GasState> {
    let (dim, n) = (rho0.dim(), rho0.n());
    if !(rho0.min() > 0.0 && theta0.min() > 0.0) {
        return Err(Error::NonPositiveState { rho: rho0.min(), theta: theta0.min() });
    }
    if times.is_empty() || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Precondition("sample times must be increasing".into()));
    }
    let torus = Torus::new(dim, n);
    let c = heat_capacity(dim);
    let sound = ((1.0 + 1.0 / c) * theta0.max()).sqrt();
    let dx = 1.0 / n as f64;
    let dt_adv = opts.cfl * dx / (u0.max_norm() + sound);
    let dt_heat = opts.diffusion_safety * 2.78 * c * rho0.min() / torus.k2_max();
    let dt_max = dt_adv.min(dt_heat);
    let mut q = Conserved::from_primitive(rho0, theta0, u0);
    let t0 = tail(&torus, u0, theta0);
    if t0 > opts.tail_tol {
        return Err(Error::BlowupSuspected { t: times[0], tail: t0 });
    }
    let mut rho = vec![rho0.clone()];
    let mut theta = vec![theta0.clone()];
    let mut u = vec![u0.clone()];
    for w in times.windows(2) {
        let steps = ((w[1] - w[0]) / dt_max).ceil().max(1.0) as usize * opts.refine.max(1);
        let dt = (w[1] - w[0]) / steps as f64;
        for s in 0..steps {
            q = rk4(&torus, &q, dt)?;
            let (uu, th) = q.primitive();
            let t = w[0] + (s + 1) as f64 * dt;
            let tf = tail(&torus, &uu, &th);
            if !(tf <= opts.tail_tol) {
                return Err(Error::BlowupSuspected { t, tail: tf });
            }
            if !(q.rho.min() > 0.0 && th.min() > 0.0) {
                return Err(Error::NonPositiveState { rho: q.rho.min(), theta: th.min() });
            }
        }
        let (uu, th) = q.primitive();
        rho.push(q.rho.clone());
        theta.push(th);
        u.push(uu);
    }
    GasState::new(times.to_vec(), rho, theta, u)
}

/// Classical solution on `[0, t_short]` at `samples` uniform times.
pub fn classical_solve(
    rho0: &ScalarField,
    theta0: &ScalarField,
    u0: &VectorField,
    t_short: f64,
    samples: usize,
    opts: &ClassicalOptions,
) -> Result<GasState> {
    if !(t_short > 0.0) || samples < 2 {
        return Err(Error::Precondition(format!("t_short = {t_short}, samples = {samples}")));
    }
    let times: Vec<f64> = (0..samples).map(|j| t_short * j as f64 / (samples - 1) as f64).collect();
    classical_solve_at(rho0, theta0, u0, &times, opts)
}

/// Relative entropy between a weak trajectory and the classical solution from
/// `data`, with the fitted growth constant `C` in `𝓔(t) ≤ 𝓔(0)e^{Ct}`.
#[derive(Clone, Debug, Serialize)]
pub struct WeakStrongReport {
    pub times: Vec<f64>,
    pub value: Vec<f64>,
    pub max_value: f64,
    pub growth: Option<f64>,
    pub gronwall: Option<f64>,
    /// `(ρ_min, ρ_max, θ_min, θ_max, |u|_max)` of the weak trajectory.
    pub weak_bounds: [f64; 5],
}

/// Compares `weak` against the classical solution from `data` on the weak
/// trajectory's sample times; returns the report and the reference.
pub fn weak_strong_monitor(
    weak: &GasState,
    data: &crate::presets::InitialData,
    opts: &ClassicalOptions,
) -> Result<(WeakStrongReport, GasState)> {
    let reference = classical_solve_at(&data.rho0, &data.theta0, &data.u0, &weak.times, opts)?;
    let value = rel_entropy(weak, &reference)?;
    let e0 = value[0];
    let max_value = value.iter().cloned().fold(0.0, f64::max);
    let (growth, gronwall) = if e0 > 0.0 {
        let g = max_value / e0;
        let t0 = weak.times[0];
        let c = value
            .iter()
            .zip(&weak.times)
            .skip(1)
            .map(|(v, t)| (v.max(f64::MIN_POSITIVE) / e0).ln() / (t - t0))
            .fold(f64::NEG_INFINITY, f64::max);
        (Some(g), Some(c.max(0.0)))
    } else {
        (None, None)
    };
    let report = WeakStrongReport { times: weak.times.clone(), value, max_value, growth, gronwall, weak_bounds: weak.bounds() };
    Ok((report, reference))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::{preset, InitialData};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    fn acoustic(dim: usize, n: usize, a: f64) -> InitialData {
        InitialData {
            rho0: ScalarField::from_fn(dim, n, |x| 1.0 + a * (TAU * x[0]).cos()),
            u0: VectorField::from_fn(dim, n, |x| [a * (TAU * x[0]).cos(), 0.5 * a * (TAU * x[0]).sin(), 0.0]),
            theta0: ScalarField::from_fn(dim, n, |x| 1.0 + 0.5 * a * (TAU * x[1]).sin()),
        }
    }

    fn split_form(dim: usize, a: (f64, f64, &[f64; 3]), b: (f64, f64, &[f64; 3])) -> f64 {
        let c = heat_capacity(dim);
        let (rho, th, u) = a;
        let (r, big, uu) = b;
        let du: f64 = (0..dim).map(|i| (u[i] - uu[i]).powi(2)).sum();
        0.5 * rho * du + rho * c * (th - big - big * (th / big).ln()) + big * (rho * (rho / r).ln() - (rho - r))
    }

    #[test]
    fn constitutive_values() {
        for dim in [2, 3] {
            let k = constitutive(dim, 2.0, 3.0).unwrap();
            assert_eq!(k.p, 6.0);
            assert_eq!(k.e, heat_capacity(dim) * 3.0);
            assert_eq!(constitutive(dim, 1.0, 1.0).unwrap().s, 0.0);
        }
        assert!(matches!(constitutive(3, 0.0, 1.0), Err(Error::NonPositiveState { .. })));
        assert!(matches!(constitutive(3, 1.0, -1.0), Err(Error::NonPositiveState { .. })));
    }

    #[test]
    fn gibbs_relation_by_finite_differences() {
        let h = 1e-6;
        for dim in [2, 3] {
            for &(r, t) in &[(0.5, 2.0), (1.0, 1.0), (3.0, 0.2)] {
                let k = |r: f64, t: f64| constitutive(dim, r, t).unwrap();
                let s_t = (k(r, t + h).s - k(r, t - h).s) / (2.0 * h);
                let e_t = (k(r, t + h).e - k(r, t - h).e) / (2.0 * h);
                let s_r = (k(r + h, t).s - k(r - h, t).s) / (2.0 * h);
                let e_r = (k(r + h, t).e - k(r - h, t).e) / (2.0 * h);
                // θ ds = de + p d(1/ρ) along each coordinate direction
                assert!((t * s_t - e_t).abs() < 1e-6);
                assert!((t * s_r - (e_r - k(r, t).p / (r * r))).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn free_energy_derivative_matches_finite_differences() {
        let h = 1e-6;
        for dim in [2, 3] {
            for &(big, r, t) in &[(1.0, 1.0, 1.0), (0.3, 2.0, 0.7), (4.0, 0.2, 5.0)] {
                let fd = (ballistic_free_energy(dim, big, r + h, t) - ballistic_free_energy(dim, big, r - h, t)) / (2.0 * h);
                assert!((fd - ballistic_free_energy_drho(dim, big, r, t)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn relative_entropy_sampling_audit() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for i in 0..10_000 {
            let dim = 2 + i % 2;
            let mut draw = || {
                let u = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
                (rng.gen_range(0.1..5.0), rng.gen_range(0.1..5.0), u)
            };
            let (a, b) = (draw(), draw());
            let v = rel_entropy_density(dim, (a.0, a.1, &a.2), (b.0, b.1, &b.2));
            let w = split_form(dim, (a.0, a.1, &a.2), (b.0, b.1, &b.2));
            assert!((v - w).abs() <= 1e-9 * (1.0 + w.abs()));
            worst = worst.min(v);
            assert!(v > 0.0, "distinct states must give a positive value");
            assert_eq!(rel_entropy_density(dim, (a.0, a.1, &a.2), (a.0, a.1, &a.2)).abs() < 1e-12, true);
        }
        assert!(worst >= -1e-10);
    }

    proptest! {
        #[test]
        fn relative_entropy_nonnegative(r in 0.05f64..20.0, t in 0.05f64..20.0, rr in 0.05f64..20.0, tt in 0.05f64..20.0,
                                        u in -3.0f64..3.0, uu in -3.0f64..3.0) {
            let v = rel_entropy_density(3, (r, t, &[u, 0.0, 0.0]), (rr, tt, &[uu, 0.0, 0.0]));
            prop_assert!(v >= -1e-10 * (1.0 + r + t + rr + tt));
        }
    }

    #[test]
    fn relative_entropy_of_fields() {
        let (dim, n) = (2, 16);
        let times = vec![0.0, 0.1];
        let eq = GasState::constant(dim, n, times.clone(), 1.0, 1.0, [0.0; 3]).unwrap();
        let u = VectorField::from_fn(dim, n, |x| [(TAU * x[0]).sin(), 0.3, 0.0]);
        let st = GasState::new(
            times.clone(),
            vec![ScalarField::constant(dim, n, 1.0); 2],
            vec![ScalarField::constant(dim, n, 1.0); 2],
            vec![u.clone(); 2],
        )
        .unwrap();
        let e = rel_entropy(&st, &eq).unwrap();
        let kin = 0.5 * u.norm_sq().mean();
        assert!((e[0] - kin).abs() < 1e-14 && (e[1] - kin).abs() < 1e-14);
        assert!(rel_entropy(&st, &st).unwrap().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn equilibrium_residuals_vanish() {
        let times: Vec<f64> = (0..11).map(|j| j as f64 * 0.01).collect();
        for dim in [2, 3] {
            let st = GasState::constant(dim, 8, times.clone(), 1.3, 0.7, [0.2, -0.1, 0.05]).unwrap();
            let w = weak_residuals(&st, &test_family(dim, false)).unwrap().max_abs();
            assert!(w.iter().all(|x| *x <= 1e-10), "{w:?}");
            let s = entropy_inequality_residual(&st, &test_family(dim, true)).unwrap();
            assert!(s.iter().all(|x| x.abs() <= 1e-10));
            assert_eq!(total_energy(&st).defect, 0.0);
            let r = rel_entropy_inequality_residual(&st, &st).unwrap();
            assert!(r.max_abs_defect() <= 1e-12);
        }
    }

    #[test]
    fn random_fields_have_large_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (dim, n) = (2, 16);
        let times: Vec<f64> = (0..9).map(|j| j as f64 * 0.01).collect();
        let rnd = |rng: &mut ChaCha8Rng, lo: f64| ScalarField::from_vec(dim, n, (0..n * n).map(|_| lo + rng.gen::<f64>()).collect()).unwrap();
        let rho: Vec<_> = (0..9).map(|_| rnd(&mut rng, 0.5)).collect();
        let th: Vec<_> = (0..9).map(|_| rnd(&mut rng, 0.5)).collect();
        let u: Vec<_> = (0..9).map(|_| VectorField::from_components(vec![rnd(&mut rng, -0.5), rnd(&mut rng, -0.5)]).unwrap()).collect();
        let st = GasState::new(times, rho, th, u).unwrap();
        let w = weak_residuals(&st, &test_family(dim, false)).unwrap().max_abs();
        assert!(w.iter().all(|x| *x > 1e-3), "{w:?}");
    }

    #[test]
    fn heating_produces_entropy() {
        let (dim, n) = (2, 8);
        let times: Vec<f64> = (0..11).map(|j| j as f64 * 0.01).collect();
        let th: Vec<_> = times.iter().map(|t| ScalarField::constant(dim, n, 1.0 + 5.0 * t)).collect();
        let st = GasState::new(times, vec![ScalarField::constant(dim, n, 1.0); 11], th, vec![VectorField::zeros(dim, n); 11]).unwrap();
        let s = entropy_inequality_residual(&st, &test_family(dim, true)).unwrap();
        assert!(s.iter().all(|x| *x > 1e-2), "{s:?}");
    }

    #[test]
    fn classical_equilibrium_is_steady() {
        let d = preset("equilibrium", 2, 16).unwrap();
        let st = classical_solve(&d.rho0, &d.theta0, &d.u0, 0.01, 5, &ClassicalOptions::default()).unwrap();
        for j in 0..st.len() {
            assert!(st.rho[j].sub(&d.rho0).max_abs() < 1e-14);
            assert!(st.theta[j].sub(&d.theta0).max_abs() < 1e-14);
            assert!(st.u[j].max_norm() < 1e-14);
        }
    }

    #[test]
    fn classical_conserves_energy_and_converges() {
        let (dim, n) = (2, 32);
        let d = acoustic(dim, n, 0.05);
        let o = ClassicalOptions::default();
        let st = classical_solve(&d.rho0, &d.theta0, &d.u0, 0.0125, 9, &o).unwrap();
        let e = total_energy(&st);
        assert!(e.defect <= 1e-6 * e.energy[0], "{}", e.defect);
        // step doubling: RK4 error shrinks as the step halves
        let fine = classical_solve(&d.rho0, &d.theta0, &d.u0, 0.0125, 9, &ClassicalOptions { refine: 2, ..o.clone() }).unwrap();
        let finer = classical_solve(&d.rho0, &d.theta0, &d.u0, 0.0125, 9, &ClassicalOptions { refine: 4, ..o }).unwrap();
        let j = st.len() - 1;
        let d1 = st.theta[j].sub(&fine.theta[j]).max_abs();
        let d2 = fine.theta[j].sub(&finer.theta[j]).max_abs();
        assert!(d1 < 1e-8 && (d2 <= d1 / 4.0 || d2 < 1e-12), "{d1:e} {d2:e}");
    }

    #[test]
    fn classical_rejects_rough_data() {
        let (dim, n) = (2, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let th = ScalarField::from_vec(dim, n, (0..n * n).map(|_| 1.0 + rng.gen::<f64>()).collect()).unwrap();
        let r = classical_solve(&ScalarField::constant(dim, n, 1.0), &th, &VectorField::zeros(dim, n), 0.01, 3, &ClassicalOptions::default());
        assert!(matches!(r, Err(Error::BlowupSuspected { .. })));
    }

    #[test]
    fn classical_solution_satisfies_weak_forms() {
        let (dim, n) = (2, 32);
        let d = acoustic(dim, n, 0.05);
        let o = ClassicalOptions::default();
        let mut prev = f64::INFINITY;
        for samples in [9, 17, 33] {
            let st = classical_solve(&d.rho0, &d.theta0, &d.u0, 0.0125, samples, &o).unwrap();
            let w = weak_residuals(&st, &test_family(dim, false)).unwrap().max_abs();
            let worst = w.iter().cloned().fold(0.0, f64::max);
            assert!(worst < 1e-5 && worst < prev / 4.0, "{samples}: {w:?}");
            prev = worst;
            let s = entropy_inequality_residual(&st, &test_family(dim, true)).unwrap();
            assert!(s.iter().all(|x| x.abs() < 1e-5), "{s:?}");
        }
    }

    #[test]
    fn relative_entropy_inequality_against_itself() {
        let d = acoustic(2, 32, 0.05);
        let st = classical_solve(&d.rho0, &d.theta0, &d.u0, 0.0125, 9, &ClassicalOptions::default()).unwrap();
        let r = rel_entropy_inequality_residual(&st, &st).unwrap();
        assert!(r.max_abs_defect() <= 1e-6, "{:?}", r.defect);
        assert!(r.value.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn weak_strong_identical_and_perturbed() {
        let (dim, n) = (2, 32);
        let d = acoustic(dim, n, 0.05);
        let o = ClassicalOptions::default();
        let weak = classical_solve(&d.rho0, &d.theta0, &d.u0, 0.0125, 9, &ClassicalOptions { refine: 2, ..o.clone() }).unwrap();
        let (rep, _) = weak_strong_monitor(&weak, &d, &o).unwrap();
        assert!(rep.max_value <= 1e-6, "{}", rep.max_value);

        let mut growth = Vec::new();
        let mut e0 = Vec::new();
        for a in [1e-2, 5e-3] {
            let p = InitialData {
                rho0: d.rho0.zip_map(&ScalarField::from_fn(dim, n, |x| (TAU * x[1]).cos()), |r, s| r + a * s),
                u0: d.u0.clone(),
                theta0: d.theta0.clone(),
            };
            let pert = classical_solve(&p.rho0, &p.theta0, &p.u0, 0.0125, 9, &o).unwrap();
            let (rep, _) = weak_strong_monitor(&pert, &d, &o).unwrap();
            e0.push(rep.value[0]);
            growth.push(rep.growth.unwrap());
            assert!(rep.gronwall.unwrap().is_finite());
        }
        assert!((e0[0] / e0[1] - 4.0).abs() < 0.1, "{e0:?}");
        assert!((growth[0] / growth[1] - 1.0).abs() < 0.1, "{growth:?}");
    }
}
