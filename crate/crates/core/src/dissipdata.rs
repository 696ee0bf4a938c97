//! Initial data whose wild continuations conserve total energy: the
//! solenoidal reduction `ρ̃ = ρ₀`, `Ψ = 0`, an energy profile `χ(t)`, the
//! staircase recursion concentrating kinetic energy at a time `τ̄`, the
//! dissipative energy `e(t)` after shifting `τ̄` to the origin, and its
//! admissibility against `ē[w] = χ(τ̄) − cρ₀θ[w]`.

use std::f64::consts::PI;

use crate::ansatz::Ansatz;
use crate::convint::{
    perturb_box, BoxCell, BoxOptions, BoxProblem, SpatialBox, TimeWindow, Wave, WildState,
};
use crate::error::{Error, Result};
use crate::heat::{solve_theta_at, HeatOptions, TemperatureSolve, VelocityPath};
use crate::heat_capacity;
use crate::quadrature::integrate_from;
use crate::subsolution::{constraint_prefactor, WeakMetric};
use crate::torus::{ScalarField, TensorField, Torus, VectorField};

/// Divergence tolerance for the solenoidal reduction.
pub const SOLENOIDAL_TOL: f64 = 1e-10;

/// `χ₀ = (1+margin) sup[(d/2)|v₀|²/ρ₀ + cρ₀θ₀]`, using
/// `λ_max(v⊗v/ρ) = |v|²/ρ`.
pub fn choose_chi0(
    torus: &Torus,
    v0: &VectorField,
    rho0: &ScalarField,
    theta0: &ScalarField,
    margin: f64,
) -> Result<f64> {
    let div = torus.divergence(v0)?.max_abs();
    if div > SOLENOIDAL_TOL {
        return Err(Error::NotSolenoidal(div));
    }
    let dim = torus.dim();
    let c = heat_capacity(dim);
    let k = constraint_prefactor(dim);
    let val = v0
        .norm_sq()
        .zip_map(rho0, |w, r| k * w / r)
        .add(&rho0.mul(theta0).scale(c));
    Ok((1.0 + margin) * val.max())
}

/// `min_x [χ₀ − cρ₀θ₀ − (d/2)|v₀|²/ρ₀]`; positive means the strict start
/// condition holds pointwise.
pub fn start_margin(v0: &VectorField, rho0: &ScalarField, theta0: &ScalarField, chi0: f64) -> f64 {
    let dim = v0.dim();
    let c = heat_capacity(dim);
    let k = constraint_prefactor(dim);
    let kin = v0.norm_sq().zip_map(rho0, |w, r| k * w / r);
    rho0.mul(theta0).scale(-c).sub(&kin).map(|x| x + chi0).min()
}

/// Default `χ̄ = max(2.5χ₀, 4 sup cρ₀θ̄)`.
pub fn default_chi_bar(chi0: f64, rho0: &ScalarField, theta_hi: f64) -> f64 {
    let c = heat_capacity(rho0.dim());
    (2.5 * chi0).max(4.0 * c * rho0.max() * theta_hi)
}

/// `χ(t)`: a `sin²` rise from `χ₀` to `χ̄` on `[0, t_peak]`, then linear decay
/// with slope `−2K` landing at `χ₀` exactly at `T`.
///
/// `τ` and `ε` are placed on the decay so that every `|τ̄ − τ| < ε` satisfies
/// `χ(τ̄) − χ₀ > χ̄/2` and `χ(t) < χ(τ̄) − K(t − τ̄)` on `(τ̄, T)`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct ChiProfile {
    pub chi0: f64,
    pub chi_bar: f64,
    pub k: f64,
    pub t_final: f64,
    pub t_peak: f64,
    pub tau: f64,
    pub eps: f64,
}

impl ChiProfile {
    pub fn build(chi0: f64, chi_bar: f64, k: f64, t_final: f64) -> Result<Self> {
        if !(chi0 > 0.0 && chi_bar > 2.0 * chi0 && k > 0.0 && t_final > 0.0) {
            return Err(Error::Precondition(format!(
                "profile needs χ̄ > 2χ₀ > 0 and K, T > 0 (χ₀ = {chi0}, χ̄ = {chi_bar}, K = {k}, T = {t_final})"
            )));
        }
        let decay = (chi_bar - chi0) / (2.0 * k);
        let t_peak = t_final - decay;
        if !(t_peak > 0.0) {
            return Err(Error::InfeasibleProfile(format!(
                "decay from χ̄ = {chi_bar} at slope 2K = {} needs {decay} > T = {t_final}",
                2.0 * k
            )));
        }
        // largest admissible fraction of the decay interval past the peak
        let f_max = (chi_bar - 2.0 * chi0) / (2.0 * (chi_bar - chi0));
        let tau = t_peak + 0.5 * f_max * decay;
        let eps = 0.25 * f_max * decay;
        Ok(ChiProfile { chi0, chi_bar, k, t_final, t_peak, tau, eps })
    }

    pub fn at(&self, t: f64) -> f64 {
        if t <= 0.0 || t >= self.t_final {
            self.chi0
        } else if t <= self.t_peak {
            let s = (0.5 * PI * t / self.t_peak).sin();
            self.chi0 + (self.chi_bar - self.chi0) * s * s
        } else {
            self.chi_bar - 2.0 * self.k * (t - self.t_peak)
        }
    }

    /// Checks the five profile properties on `m` uniform samples, and the
    /// two `τ̄`-conditions for `τ̄ = τ ± 0.99ε` and `τ̄ = τ`.
    pub fn check(&self, m: usize) -> Result<()> {
        let t_final = self.t_final;
        let fail = |what: String| Err(Error::Invariant(format!("χ profile: {what}")));
        if self.at(0.0) != self.chi0 || self.at(t_final) != self.chi0 {
            return fail("endpoint values differ from χ₀".into());
        }
        let mut max: f64 = f64::NEG_INFINITY;
        for i in 1..m {
            let t = t_final * i as f64 / m as f64;
            let x = self.at(t);
            if !(x > self.chi0) {
                return fail(format!("χ({t}) = {x} ≤ χ₀"));
            }
            max = max.max(x);
        }
        if (self.at(self.t_peak) - self.chi_bar).abs() > 1e-12 * self.chi_bar || max > self.chi_bar {
            return fail("maximum differs from χ̄".into());
        }
        for tb in [self.tau - 0.99 * self.eps, self.tau, self.tau + 0.99 * self.eps] {
            if !(self.at(tb) - self.chi0 > 0.5 * self.chi_bar) {
                return fail(format!("χ(τ̄) − χ₀ ≤ χ̄/2 at τ̄ = {tb}"));
            }
            for i in 1..m {
                let t = tb + (t_final - tb) * i as f64 / m as f64;
                if !(self.at(t) < self.at(tb) - self.k * (t - tb)) {
                    return fail(format!("decay slower than K at t = {t}, τ̄ = {tb}"));
                }
            }
        }
        Ok(())
    }
}

/// `e(t) = χ(τ̄) − cρ₀θ₀ − Kt` up to the knee `(χ(τ̄) − χ₀)/K`, then
/// `χ₀ − cρ₀θ₀`.
#[derive(Clone, Debug)]
pub struct DissipativeEnergy {
    pub chi_tau: f64,
    pub chi0: f64,
    pub k: f64,
    pub t_final: f64,
    /// `cρ₀θ₀`
    pub internal: ScalarField,
}

impl DissipativeEnergy {
    pub fn knee(&self) -> f64 {
        (self.chi_tau - self.chi0) / self.k
    }

    /// The spatially constant part `e + cρ₀θ₀`.
    pub fn kinetic_part(&self, t: f64) -> f64 {
        if t <= self.knee() {
            self.chi_tau - self.k * t
        } else {
            self.chi0
        }
    }

    pub fn at(&self, t: f64) -> ScalarField {
        let a = self.kinetic_part(t);
        self.internal.map(|x| a - x)
    }
}

pub fn build_dissipative_e(
    chi_tau: f64,
    chi0: f64,
    k: f64,
    t_final: f64,
    rho0: &ScalarField,
    theta0: &ScalarField,
) -> Result<DissipativeEnergy> {
    if !(k > 0.0 && chi_tau > chi0) {
        return Err(Error::Precondition(format!("need K > 0 and χ(τ̄) > χ₀ (K = {k})")));
    }
    let c = heat_capacity(rho0.dim());
    Ok(DissipativeEnergy { chi_tau, chi0, k, t_final, internal: rho0.mul(theta0).scale(c) })
}

#[derive(Clone, Debug)]
pub struct RecursionOptions {
    /// Time samples per window (odd, centred on `τ_{k−1}`).
    pub samples: usize,
    pub boxes: BoxOptions,
    /// Margin `δ` as a fraction of the smallest gap in the window.
    pub delta_fraction: f64,
    /// `ε_k = shrink · ε_{k−1}` before any further halving.
    pub shrink: f64,
    pub max_eps_halvings: usize,
    pub max_amplitude_halvings: usize,
    /// Fourier modes of the weak metric.
    pub metric_modes: usize,
}

impl Default for RecursionOptions {
    fn default() -> Self {
        RecursionOptions {
            samples: 65,
            boxes: BoxOptions::default(),
            delta_fraction: 0.1,
            shrink: 0.49,
            max_eps_halvings: 8,
            max_amplitude_halvings: 40,
            metric_modes: 16,
        }
    }
}

/// Mutually orthogonal wave directions and phases, one per level.
pub const LEVEL_WAVES: [([i64; 2], f64); 8] = [
    ([1, 0], 0.0),
    ([0, 1], 0.0),
    ([1, 1], 0.0),
    ([1, -1], 0.0),
    ([1, 0], 0.5 * PI),
    ([0, 1], 0.5 * PI),
    ([1, 1], 0.5 * PI),
    ([1, -1], 0.5 * PI),
];

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct LevelRecord {
    pub k: usize,
    pub tau: f64,
    pub eps: f64,
    /// `α_k = ∫∫_window (e − ½|w_{k−1}|²/ρ₀)` by Simpson's rule.
    pub alpha: f64,
    /// The same with twice the samples.
    pub alpha_refined: f64,
    /// `∫ ½|w_k|²/ρ₀` at `τ_k`.
    pub kinetic: f64,
    /// `max_window ∫ ½|w_{k−1}|²/ρ₀`.
    pub prev_max: f64,
    /// `∫ e(τ_k) − ½|w_k(τ_k)|²/ρ₀`.
    pub defect: f64,
    /// `(kinetic − prev_max) ε_k² / α_k²`.
    pub lambda_hat: f64,
    pub weak_distance: f64,
    /// `max_m sup_t |∫ (w_k − w_{k−1})·w_m/ρ₀|`.
    pub cross_pairing: f64,
    pub amplitude: f64,
    pub eps_halvings: usize,
}

#[derive(Clone, Debug)]
pub struct Recursion {
    /// `w_0, …, w_depth`.
    pub states: Vec<WildState>,
    pub levels: Vec<LevelRecord>,
    pub tau_bar: f64,
    /// `∫ e(τ) − ½|v₀|²/ρ₀`.
    pub defect0: f64,
}

impl Recursion {
    pub fn final_state(&self) -> &WildState {
        self.states.last().expect("non-empty")
    }

    /// Saturation defect after each level, starting with depth 0.
    pub fn defects(&self) -> Vec<f64> {
        std::iter::once(self.defect0).chain(self.levels.iter().map(|l| l.defect)).collect()
    }

    pub fn staircase_csv(&self) -> String {
        let mut s = String::from("k,tau,eps,alpha,kinetic,defect,lambda_hat,weak_distance,cross_pairing\n");
        for l in &self.levels {
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                l.k, l.tau, l.eps, l.alpha, l.kinetic, l.defect, l.lambda_hat, l.weak_distance, l.cross_pairing
            ));
        }
        s
    }
}

fn kinetic_mean(v: &VectorField, rho: &ScalarField) -> f64 {
    v.norm_sq().zip_map(rho, |w, r| 0.5 * w / r).mean()
}

fn window_times(center: f64, eps: f64, m: usize) -> Vec<f64> {
    let mut t: Vec<f64> = (0..m).map(|j| center - eps + 2.0 * eps * j as f64 / (m - 1) as f64).collect();
    t[m / 2] = center;
    t
}

/// Staircase recursion started from `(v₀, U = 0)` with the energy `e(t, x)`:
/// level `k` adds one wave supported in `(τ_{k−1} − ε_k, τ_{k−1} + ε_k)`,
/// shrinking `ε_k` until the kinetic energy at the new `τ_k` exceeds that of
/// `w_{k−1}` everywhere on the window, and the amplitude until the weak
/// distance and cross pairings stay below `2^{−k}`.
#[allow(clippy::too_many_arguments)]
pub fn lemma_a2_recursion(
    torus: &Torus,
    rho0: &ScalarField,
    v0: &VectorField,
    e: &dyn Fn(f64) -> ScalarField,
    t_final: f64,
    tau: f64,
    eps0: f64,
    depth: usize,
    opts: &RecursionOptions,
) -> Result<Recursion> {
    let (dim, n) = (torus.dim(), torus.n());
    if opts.samples < 5 || opts.samples % 2 == 0 {
        return Err(Error::Precondition("window samples must be odd and at least 5".into()));
    }
    if !(tau - eps0 > 0.0 && tau + eps0 < t_final) {
        return Err(Error::Precondition(format!("window ({}, {}) leaves (0, T)", tau - eps0, tau + eps0)));
    }
    let div = torus.divergence(v0)?.max_abs();
    if div > SOLENOIDAL_TOL {
        return Err(Error::NotSolenoidal(div));
    }
    let zero_v = VectorField::zeros(dim, n);
    let kdim = constraint_prefactor(dim);
    // (v₀, 0) must be a strict subsolution on [0, T]
    let start_gap = (0..=200)
        .map(|i| {
            let t = t_final * i as f64 / 200.0;
            let kin = v0.norm_sq().zip_map(rho0, |w, r| kdim * w / r);
            e(t).sub(&kin).min()
        })
        .fold(f64::INFINITY, f64::min);
    if !(start_gap > 0.0) {
        return Err(Error::Precondition(format!("(v₀, 0) is not a strict subsolution (gap {start_gap:e})")));
    }
    let metric = WeakMetric::new(dim, n, opts.metric_modes);
    let mut states = vec![WildState::new(v0.clone())];
    let mut levels: Vec<LevelRecord> = Vec::new();
    let defect0 = e(tau).mean() - kinetic_mean(v0, rho0);
    let (mut tau_prev, mut eps_prev) = (tau, eps0);
    let m = opts.samples;
    for k in 1..=depth {
        let prev = states.last().expect("non-empty").clone();
        let mut eps_k = opts.shrink * eps_prev;
        let mut accepted = None;
        let mut last_reason = String::new();
        for halvings in 0..=opts.max_eps_halvings {
            let times = window_times(tau_prev, eps_k, m);
            let window = TimeWindow { t1: tau_prev - eps_k, t2: tau_prev + eps_k };
            let vs: Vec<VectorField> = times.iter().map(|&t| prev.velocity_at(t)).collect();
            let us: Vec<TensorField> = times.iter().map(|&t| prev.flux(t)).collect();
            let es: Vec<ScalarField> = times.iter().map(|&t| e(t)).collect();
            let rhos = vec![rho0.clone(); m];
            let zeros = vec![zero_v.clone(); m];
            let ke_prev: Vec<f64> = vs.iter().map(|v| kinetic_mean(v, rho0)).collect();
            let alpha = simpson_alpha(&times, &es, &ke_prev);
            let refined = window_times(tau_prev, eps_k, 2 * m - 1);
            let ke_ref: Vec<f64> = refined.iter().map(|&t| kinetic_mean(&prev.velocity_at(t), rho0)).collect();
            let es_ref: Vec<ScalarField> = refined.iter().map(|&t| e(t)).collect();
            let alpha_refined = simpson_alpha(&refined, &es_ref, &ke_ref);
            let min_gap = vs
                .iter()
                .zip(&us)
                .zip(&es)
                .map(|((v, u), e)| e.sub(&constraint_on(dim, v, u, rho0)).min())
                .fold(f64::INFINITY, f64::min);
            if !(min_gap > 0.0 && alpha > 0.0) {
                return Err(Error::StallAtLevel { level: k, reason: format!("gap {min_gap:e} not positive") });
            }
            let delta = opts.delta_fraction * min_gap;
            let target: Vec<ScalarField> = es.iter().map(|e| e.map(|x| x - delta)).collect();
            let cell = BoxCell {
                window,
                samples: (0..m).collect(),
                sbox: SpatialBox::whole(),
                rho_frozen: rho0.max(),
                v_frozen: [0.0; 3],
                osc_rho: rho0.max() - rho0.min(),
                osc_v: 0.0,
            };
            let bp = BoxProblem {
                torus,
                cell: &cell,
                times: &times,
                v: &vs,
                u: &us,
                rho: &rhos,
                big_v: &zeros,
                e: &target,
                margin: 0.5 * delta,
            };
            let bopts = BoxOptions { candidates: vec![LEVEL_WAVES[(k - 1) % LEVEL_WAVES.len()]], ..opts.boxes.clone() };
            let pert = match perturb_box(&bp, &bopts) {
                Ok(p) => p,
                Err(Error::NoAdmissibleAmplitude(r)) => {
                    last_reason = r;
                    eps_k *= 0.5;
                    continue;
                }
                Err(err) => return Err(err),
            };
            // amplitude control for the weak distance and the cross pairings
            let bound = 0.5f64.powi(k as i32);
            let prev_samples: Vec<Vec<VectorField>> =
                states.iter().map(|s| times.iter().map(|&t| s.velocity_at(t)).collect()).collect();
            let mut scale = 1.0;
            let mut found = None;
            for _ in 0..=opts.max_amplitude_halvings {
                let wave = Wave { window, w: pert.wave.w.scale(scale), y: pert.wave.y.scale(scale) };
                let diffs: Vec<VectorField> = times.iter().map(|&t| wave.w.scale(window.g(t))).collect();
                let news: Vec<VectorField> = vs.iter().zip(&diffs).map(|(v, d)| v.add(d)).collect();
                let dist = metric.distance(&news, &vs);
                let cross = prev_samples
                    .iter()
                    .map(|wm| {
                        diffs
                            .iter()
                            .zip(wm)
                            .map(|(d, w)| d.dot(w).zip_map(rho0, |x, r| x / r).mean().abs())
                            .fold(0.0, f64::max)
                    })
                    .fold(0.0, f64::max);
                if dist < bound && cross < bound {
                    found = Some((wave, news, dist, cross));
                    break;
                }
                scale *= 0.5;
            }
            let Some((wave, news, dist, cross)) = found else {
                last_reason = "weak distance or cross pairing above 2^-k".into();
                eps_k *= 0.5;
                continue;
            };
            let ke_new: Vec<f64> = news.iter().map(|v| kinetic_mean(v, rho0)).collect();
            let prev_max = ke_prev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut j_best = 1;
            for j in 1..m - 1 {
                if ke_new[j] > ke_new[j_best] {
                    j_best = j;
                }
            }
            if !(ke_new[j_best] > prev_max) {
                last_reason = format!("staircase failed: {} ≤ {prev_max}", ke_new[j_best]);
                eps_k *= 0.5;
                continue;
            }
            let tau_k = times[j_best];
            let kinetic = ke_new[j_best];
            let mut next = prev.clone();
            next.push(wave);
            accepted = Some((
                next,
                LevelRecord {
                    k,
                    tau: tau_k,
                    eps: eps_k,
                    alpha,
                    alpha_refined,
                    kinetic,
                    prev_max,
                    defect: e(tau_k).mean() - kinetic,
                    lambda_hat: (kinetic - prev_max) * eps_k * eps_k / (alpha * alpha),
                    weak_distance: dist,
                    cross_pairing: cross,
                    amplitude: pert.amplitude * scale,
                    eps_halvings: halvings,
                },
            ));
            break;
        }
        let Some((next, rec)) = accepted else {
            return Err(Error::StallAtLevel { level: k, reason: last_reason });
        };
        tau_prev = rec.tau;
        eps_prev = rec.eps;
        states.push(next);
        levels.push(rec);
    }
    Ok(Recursion { states, levels, tau_bar: tau_prev, defect0 })
}

fn constraint_on(dim: usize, v: &VectorField, u: &TensorField, rho: &ScalarField) -> ScalarField {
    let data = (0..rho.len())
        .map(|p| crate::subsolution::constraint_value(dim, &v.at(p), &u.at(p), rho.data()[p]))
        .collect();
    ScalarField::from_vec(dim, rho.n(), data).expect("grid size")
}

fn simpson_alpha(times: &[f64], es: &[ScalarField], ke: &[f64]) -> f64 {
    let f: Vec<f64> = es.iter().zip(ke).map(|(e, k)| e.mean() - k).collect();
    integrate_from(times, &f, times[0])
}

/// `t ↦ w(offset + t)`.
pub struct Shifted<'a> {
    pub state: &'a WildState,
    pub offset: f64,
}

impl VelocityPath for Shifted<'_> {
    fn velocity(&self, t: f64) -> VectorField {
        self.state.velocity_at(self.offset + t)
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct AdmissibilityReport {
    pub k: f64,
    pub knee: f64,
    /// `min_{t>0, x} (ē[w] − e)`.
    pub min_margin: f64,
    /// `max_{t>0} max_x |θ − θ₀| / ((1 + ‖w‖∞) t)`.
    pub c_hat: f64,
    /// `max_{0<t≤knee, x} cρ₀(θ − θ₀)/t`, the smallest slope the first regime admits.
    pub k_min: f64,
}

/// Verifies `e < ē[w] = χ(τ̄) − cρ₀θ[w]` at every sample with `t > 0`.
pub fn admissibility_check(
    e: &DissipativeEnergy,
    rho0: &ScalarField,
    theta0: &ScalarField,
    sol: &TemperatureSolve,
    w_sup: f64,
) -> Result<AdmissibilityReport> {
    let c = heat_capacity(rho0.dim());
    let knee = e.knee();
    let mut min_margin = f64::INFINITY;
    let mut c_hat: f64 = 0.0;
    let mut k_min: f64 = 0.0;
    let mut violation = None;
    for (&t, th) in sol.times.iter().zip(&sol.theta) {
        if t <= 0.0 {
            continue;
        }
        let rise = rho0.mul(&th.sub(theta0)).scale(c);
        c_hat = c_hat.max(th.sub(theta0).max_abs() / ((1.0 + w_sup) * t));
        if t <= knee {
            k_min = k_min.max(rise.max() / t);
        }
        // ē[w] − e = χ(τ̄) − cρ₀θ − (a(t) − cρ₀θ₀) = χ(τ̄) − a(t) − cρ₀(θ − θ₀)
        let a = e.kinetic_part(t);
        let margin = rise.map(|r| e.chi_tau - a - r);
        let m = margin.min();
        if m <= 0.0 && violation.is_none() {
            let index = margin.data().iter().position(|&x| x == m).unwrap_or(0);
            violation = Some((t, index));
        }
        min_margin = min_margin.min(m);
    }
    if let Some((t, index)) = violation {
        return Err(Error::AdmissibilityFailed { t, index, suggested_k: 2.0 * k_min });
    }
    Ok(AdmissibilityReport { k: e.k, knee, min_margin, c_hat, k_min })
}

/// `E(t) = ∫ |v|²/(2ρ) + cρθ`.
pub fn total_energy(v: &VectorField, rho: &ScalarField, theta: &ScalarField) -> f64 {
    let c = heat_capacity(rho.dim());
    v.norm_sq().zip_map(rho, |w, r| 0.5 * w / r).add(&rho.mul(theta).scale(c)).mean()
}

/// `max_t |E(t) − χ(t)|` over a trajectory with `ρ̃ = ρ₀`.
pub fn energy_identity(
    times: &[f64],
    vs: &[VectorField],
    rho0: &ScalarField,
    thetas: &[ScalarField],
    chi: &dyn Fn(f64) -> f64,
) -> f64 {
    times
        .iter()
        .zip(vs)
        .zip(thetas)
        .map(|((&t, v), th)| (total_energy(v, rho0, th) - chi(t)).abs())
        .fold(0.0, f64::max)
}

/// Saturated reference state: constant `ρ`, `θ` and velocity `a`, solved for
/// `θ[a]` on `grid`; returns `max_t |E(t) − χ|` with `χ = |a|²/(2ρ) + cρθ`.
pub fn saturated_energy_defect(
    dim: usize,
    n: usize,
    n_time: usize,
    t_final: f64,
    rho: f64,
    theta: f64,
    a: [f64; 3],
) -> Result<f64> {
    let grid = crate::torus::GridSpec::new(dim, n, n_time, t_final)?;
    let rho0 = ScalarField::constant(dim, n, rho);
    let u0 = VectorField::from_fn(dim, n, |_| [a[0] / rho, a[1] / rho, a[2] / rho]);
    let ansatz = Ansatz::build(&grid, &rho0, &u0)?;
    let v = VectorField::from_fn(dim, n, |_| a);
    let path = |_t: f64| v.clone();
    let theta0 = ScalarField::constant(dim, n, theta);
    let sol = crate::heat::solve_theta(&ansatz, &path, &theta0, &HeatOptions::default())?;
    let c = heat_capacity(dim);
    let aa: f64 = a[..dim].iter().map(|x| x * x).sum();
    let chi = 0.5 * aa / rho + c * rho * theta;
    // saturation: ½|a|²/ρ equals ē = χ − cρθ pointwise
    let vs = vec![v.clone(); sol.times.len()];
    Ok(energy_identity(&sol.times, &vs, &rho0, &sol.theta, &|_| chi))
}

#[derive(Clone, Debug)]
pub struct DissipativeConfig {
    pub t_final: f64,
    /// Time samples of the shifted problem on `[0, T − τ̄]`.
    pub n_time: usize,
    pub depth: usize,
    pub chi_bar: Option<f64>,
    /// Initial slope; raised to `(χ̄ − χ₀)/T` if smaller, and automatically
    /// when admissibility fails.
    pub k: f64,
    pub chi_margin: f64,
    pub max_k_attempts: usize,
    pub recursion: RecursionOptions,
    pub heat: HeatOptions,
}

impl Default for DissipativeConfig {
    fn default() -> Self {
        DissipativeConfig {
            t_final: 0.25,
            n_time: 41,
            depth: 6,
            chi_bar: None,
            k: 20.0,
            chi_margin: 0.1,
            max_k_attempts: 6,
            recursion: RecursionOptions::default(),
            heat: HeatOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DissipativeOutcome {
    pub chi0: f64,
    pub profile: ChiProfile,
    pub recursion: Recursion,
    pub energy: DissipativeEnergy,
    pub admissibility: AdmissibilityReport,
    /// Slopes tried, ending with the accepted one.
    pub k_history: Vec<f64>,
    /// Violation `(t, index)` found with slope `K/100`.
    pub forced_failure: Option<(f64, usize)>,
    /// `max_t |E(t) − χ(τ̄)|` of the finite-depth shifted trajectory.
    pub energy_defect: f64,
    /// The same for the exactly saturated reference state.
    pub saturated_defect: f64,
    /// Initial momentum `w(τ̄)` of the constructed data.
    pub w_start: VectorField,
    pub shifted: TemperatureSolve,
}

/// Builds the energy profile and staircase, shifts `τ̄` to the origin and
/// raises `K` until the dissipative energy is admissible.
pub fn dissipative_pipeline(
    rho0: &ScalarField,
    v0: &VectorField,
    theta0: &ScalarField,
    cfg: &DissipativeConfig,
) -> Result<DissipativeOutcome> {
    let (dim, n) = (rho0.dim(), rho0.n());
    let torus = Torus::new(dim, n);
    let chi0 = choose_chi0(&torus, v0, rho0, theta0, cfg.chi_margin)?;
    let u0 = v0.mul_scalar(&rho0.map(|r| 1.0 / r));
    let grid = crate::torus::GridSpec::new(dim, n, cfg.n_time, cfg.t_final)?;
    let base = Ansatz::build(&grid, rho0, &u0)?;
    if !base.is_solenoidal() {
        return Err(Error::NotSolenoidal(base.div_w0().max_abs()));
    }
    let (_, theta_hi) = crate::heat::comparison_bounds(&base, theta0)?;
    let chi_bar = cfg.chi_bar.unwrap_or_else(|| default_chi_bar(chi0, rho0, theta_hi));
    let c = heat_capacity(dim);
    let internal = rho0.mul(theta0).scale(c);
    // the decay from χ̄ must fit into half the interval
    let mut k = cfg.k.max((chi_bar - chi0) / cfg.t_final);
    let mut k_history = Vec::new();
    for _ in 0..cfg.max_k_attempts {
        k_history.push(k);
        let profile = ChiProfile::build(chi0, chi_bar, k, cfg.t_final)?;
        profile.check(10_000)?;
        let e_rec = |t: f64| internal.map(|x| profile.at(t) - x);
        let recursion = lemma_a2_recursion(
            &torus,
            rho0,
            v0,
            &e_rec,
            cfg.t_final,
            profile.tau,
            profile.eps,
            cfg.depth,
            &cfg.recursion,
        )?;
        let tau_bar = recursion.tau_bar;
        let chi_tau = profile.at(tau_bar);
        let t_shift = cfg.t_final - tau_bar;
        let energy = build_dissipative_e(chi_tau, chi0, k, t_shift, rho0, theta0)?;
        let w_end = recursion.final_state();
        let w_start = w_end.velocity_at(tau_bar);
        let sgrid = crate::torus::GridSpec::new(dim, n, cfg.n_time, t_shift)?;
        let sans = Ansatz::build(&sgrid, rho0, &w_start.mul_scalar(&rho0.map(|r| 1.0 / r)))?;
        let path = Shifted { state: w_end, offset: tau_bar };
        let times = sgrid.times();
        let sol = solve_theta_at(&sans, &path, theta0, None, &times, &cfg.heat)?;
        let vs: Vec<VectorField> = times.iter().map(|&t| path.velocity(t)).collect();
        let w_sup = vs.iter().map(|v| v.max_norm()).fold(0.0, f64::max);
        match admissibility_check(&energy, rho0, theta0, &sol, w_sup) {
            Ok(report) => {
                let weak = build_dissipative_e(chi_tau, chi0, k / 100.0, t_shift, rho0, theta0)?;
                let forced_failure = match admissibility_check(&weak, rho0, theta0, &sol, w_sup) {
                    Err(Error::AdmissibilityFailed { t, index, .. }) => Some((t, index)),
                    _ => None,
                };
                let energy_defect = energy_identity(&times, &vs, rho0, &sol.theta, &|_| chi_tau);
                let mean_v = v0.mean();
                let a = if mean_v.iter().any(|x| *x != 0.0) { mean_v } else { [0.1, 0.05, 0.0] };
                let saturated_defect = saturated_energy_defect(
                    dim,
                    n,
                    cfg.n_time,
                    t_shift,
                    rho0.mean(),
                    theta0.mean(),
                    a,
                )?;
                return Ok(DissipativeOutcome {
                    chi0,
                    profile,
                    recursion,
                    energy,
                    admissibility: report,
                    k_history,
                    forced_failure,
                    energy_defect,
                    saturated_defect,
                    w_start,
                    shifted: sol,
                });
            }
            Err(Error::AdmissibilityFailed { suggested_k, .. }) => {
                k = suggested_k.max(2.0 * k);
            }
            Err(err) => return Err(err),
        }
    }
    Err(Error::AdmissibilityFailed { t: 0.0, index: 0, suggested_k: k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::preset;
    use std::f64::consts::TAU;

    fn mild(n: usize) -> (ScalarField, VectorField, ScalarField) {
        let d = preset("mild", 2, n).unwrap();
        let v0 = VectorField::from_fn(2, n, |x| [0.2 * (TAU * x[1]).sin(), 0.2 * (TAU * x[0]).sin(), 0.0]);
        (d.rho0, v0, d.theta0)
    }

    #[test]
    fn chi0_examples() {
        let torus = Torus::new(3, 8);
        let one = ScalarField::constant(3, 8, 1.0);
        let chi = choose_chi0(&torus, &VectorField::zeros(3, 8), &one, &one, 0.1).unwrap();
        assert!((chi - 1.65).abs() < 1e-14);
        let (rho, v, th) = mild(16);
        let t2 = Torus::new(2, 16);
        let z = ScalarField::zeros(2, 16);
        let k1 = choose_chi0(&t2, &v, &rho, &z, 0.0).unwrap();
        let k2 = choose_chi0(&t2, &v.scale(2.0), &rho, &z, 0.0).unwrap();
        assert!((k2 - 4.0 * k1).abs() < 1e-12 * k2);
        let chi = choose_chi0(&t2, &v, &rho, &th, 0.1).unwrap();
        assert!(start_margin(&v, &rho, &th, chi) > 0.0);
        let bad = VectorField::from_fn(2, 16, |x| [(TAU * x[0]).sin(), 0.0, 0.0]);
        assert!(matches!(choose_chi0(&t2, &bad, &rho, &th, 0.1), Err(Error::NotSolenoidal(_))));
    }

    #[test]
    fn chi_profile_invariants_and_failures() {
        let p = ChiProfile::build(1.0, 3.0, 10.0, 1.0).unwrap();
        p.check(10_000).unwrap();
        assert!(matches!(ChiProfile::build(1.0, 3.0, 0.5, 1.0), Err(Error::InfeasibleProfile(_))));
        assert!(matches!(ChiProfile::build(1.0, 2.0, 10.0, 1.0), Err(Error::Precondition(_))));
        // K → 0⁺: feasible until the decay no longer fits
        let mut k = 10.0;
        let mut last_ok = true;
        while k > 1e-3 {
            let ok = ChiProfile::build(1.0, 3.0, k, 1.0).is_ok();
            assert!(last_ok || !ok);
            last_ok = ok;
            k *= 0.7;
        }
        assert!(!last_ok);
    }

    #[test]
    fn dissipative_energy_slope_and_knee() {
        let (rho, _, th) = mild(8);
        let e = build_dissipative_e(3.0, 1.2, 7.0, 1.0, &rho, &th).unwrap();
        assert_eq!(e.knee(), 1.8 / 7.0);
        let c = heat_capacity(2);
        let e0 = e.at(0.0);
        let expect0 = rho.mul(&th).scale(-c).map(|x| x + 3.0);
        assert!(e0.sub(&expect0).max_abs() < 1e-15);
        for i in 1..50 {
            let t = e.knee() * i as f64 / 50.0;
            let slope = e0.sub(&e.at(t)).map(|x| x / t);
            assert!((slope.max() - 7.0).abs() < 1e-12 && (slope.min() - 7.0).abs() < 1e-12);
        }
        let h = 1e-13;
        assert!(e.at(e.knee() - h).sub(&e.at(e.knee() + h)).max_abs() < 1e-12);
    }

    fn small_recursion(depth: usize) -> (Recursion, ChiProfile) {
        let n = 16;
        let (rho, v0, th) = mild(n);
        let torus = Torus::new(2, n);
        let chi0 = choose_chi0(&torus, &v0, &rho, &th, 0.1).unwrap();
        let p = ChiProfile::build(chi0, 3.0 * chi0, 20.0, 0.25).unwrap();
        let c = heat_capacity(2);
        let internal = rho.mul(&th).scale(c);
        let e = |t: f64| internal.map(|x| p.at(t) - x);
        let opts = RecursionOptions { boxes: BoxOptions { frequency: 5, ..BoxOptions::default() }, ..Default::default() };
        let r = lemma_a2_recursion(&torus, &rho, &v0, &e, 0.25, p.tau, p.eps, depth, &opts).unwrap();
        (r, p)
    }

    #[test]
    fn depth_zero_is_identity() {
        let (r, p) = small_recursion(0);
        assert!(r.levels.is_empty());
        assert_eq!(r.tau_bar, p.tau);
        assert!(r.defect0 > 0.0);
    }

    #[test]
    fn recursion_staircase_invariants() {
        let (r, p) = small_recursion(4);
        let mut eps_prev = p.eps;
        let mut tau_prev = p.tau;
        let mut ke_prev = f64::NEG_INFINITY;
        for l in &r.levels {
            assert!(l.eps < eps_prev / 2.0);
            assert!((l.tau - tau_prev).abs() < l.eps);
            assert!(l.kinetic > ke_prev && l.kinetic > l.prev_max);
            let bound = 0.5f64.powi(l.k as i32);
            assert!(l.weak_distance < bound && l.cross_pairing < bound);
            assert!(((l.alpha - l.alpha_refined) / l.alpha_refined).abs() <= 1e-6, "{l:?}");
            eps_prev = l.eps;
            tau_prev = l.tau;
            ke_prev = l.kinetic;
        }
        assert!((r.tau_bar - p.tau).abs() < p.eps);
        let d = r.defects();
        assert!(d.windows(2).all(|w| w[1] < w[0]), "{d:?}");
        // w ≡ v₀ near T
        let w = r.final_state();
        assert_eq!(w.velocity_at(0.2499), w.base);
    }

    #[test]
    fn saturated_state_has_exact_energy() {
        let d = saturated_energy_defect(2, 16, 21, 0.1, 1.3, 0.8, [0.3, -0.2, 0.0]).unwrap();
        assert!(d <= 1e-8, "{d:e}");
    }

    #[test]
    fn equilibrium_admissibility_passes_any_k() {
        let n = 8;
        let one = ScalarField::constant(2, n, 1.0);
        let grid = crate::torus::GridSpec::new(2, n, 11, 0.1).unwrap();
        let a = Ansatz::build(&grid, &one, &VectorField::zeros(2, n)).unwrap();
        let zero = crate::heat::ZeroVelocity { dim: 2, n };
        let sol = crate::heat::solve_theta(&a, &zero, &one, &HeatOptions::default()).unwrap();
        for k in [1e-3, 1.0, 1e3] {
            let e = build_dissipative_e(2.0, 1.5, k, 0.1, &one, &one).unwrap();
            let rep = admissibility_check(&e, &one, &one, &sol, 0.0).unwrap();
            assert!(rep.k_min.abs() < 1e-12 && rep.c_hat < 1e-10);
        }
    }

    #[test]
    #[ignore = "long-running pipeline, run explicitly"]
    fn dissipative_pipeline_probe() {
        let (rho, v0, th) = mild(32);
        let start = std::time::Instant::now();
        let out = dissipative_pipeline(&rho, &v0, &th, &DissipativeConfig::default()).unwrap();
        eprintln!("{}", out.recursion.staircase_csv());
        eprintln!("defects {:?}", out.recursion.defects());
        eprintln!("{:?} k {:?} forced {:?}", out.admissibility, out.k_history, out.forced_failure);
        eprintln!("energy defect {:e} saturated {:e}", out.energy_defect, out.saturated_defect);
        eprintln!("profile {:?} elapsed {:?}", out.profile, start.elapsed());
    }
}
