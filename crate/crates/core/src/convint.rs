//! Localized oscillatory perturbations of subsolutions and the energy-gain
//! iteration.
//!
//! A perturbation is a stationary wave `w = A g(t) ∇^⊥Δ′Z`, `Y = A g′(t) y(Z)`
//! built from a spatial potential `Z = E(x) sin(2π k·x + φ)/(2π|k|)³`, where
//! `g` is a smooth time bump, `E` a product of `sin⁴` profiles on a box,
//! `Δ′` the Laplacian in the wave plane and `y` the trace-free symmetric
//! tensor with `div y = −∇^⊥Δ′Z`. All spatial derivatives are spectral, so
//! `∂_t w + div Y = 0` and `div w = 0` hold to roundoff. In 3D the wave lives
//! in the `(x₁, x₂)` plane.

use std::f64::consts::{PI, TAU};

use rayon::prelude::*;

use crate::ansatz::Ansatz;
use crate::error::{Error, Result};
use crate::heat::{solve_theta_at, HeatOptions, TemperatureSolve, VelocityPath};
use crate::subsolution::{self, constraint_value, gap_report, GapReport};
use crate::torus::{ScalarField, TensorField, Torus, VectorField};

/// `exp(1 − 1/(1 − s²))` on `(−1, 1)`, zero outside; equals 1 at `s = 0`.
pub fn bump(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - s * s)).exp()
    }
}

fn bump_prime(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        0.0
    } else {
        let q = 1.0 - s * s;
        bump(s) * (-2.0 * s / (q * q))
    }
}

/// Time cutoff `g(t)` supported in the open interval `(t1, t2)`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct TimeWindow {
    pub t1: f64,
    pub t2: f64,
}

impl TimeWindow {
    fn s(&self, t: f64) -> f64 {
        (2.0 * t - self.t1 - self.t2) / (self.t2 - self.t1)
    }

    pub fn contains(&self, t: f64) -> bool {
        t > self.t1 && t < self.t2
    }

    pub fn g(&self, t: f64) -> f64 {
        if self.contains(t) {
            bump(self.s(t))
        } else {
            0.0
        }
    }

    pub fn g_prime(&self, t: f64) -> f64 {
        if self.contains(t) {
            bump_prime(self.s(t)) * 2.0 / (self.t2 - self.t1)
        } else {
            0.0
        }
    }
}

/// Spatial part of a perturbation: `v += g(t) w`, `U += g′(t) y`.
#[derive(Clone, Debug)]
pub struct Wave {
    pub window: TimeWindow,
    pub w: VectorField,
    pub y: TensorField,
}

/// `v(t) = base + Σ g_i(t) w_i`, `U(t) = base_u + Σ g_i′(t) y_i` with a
/// constant trace-free `base_u`.
#[derive(Clone, Debug)]
pub struct WildState {
    pub base: VectorField,
    pub base_u: TensorField,
    pub waves: Vec<Wave>,
}

impl WildState {
    pub fn new(base: VectorField) -> Self {
        let base_u = TensorField::zeros(base.dim(), base.n());
        WildState { base, base_u, waves: Vec::new() }
    }

    /// Replaces the constant flux; it must be divergence-free.
    pub fn with_flux(mut self, base_u: TensorField) -> Self {
        self.base_u = base_u;
        self
    }

    pub fn velocity_at(&self, t: f64) -> VectorField {
        let mut v = self.base.clone();
        for w in &self.waves {
            if w.window.contains(t) {
                v.axpy(w.window.g(t), &w.w);
            }
        }
        v
    }

    pub fn velocity_dt(&self, t: f64) -> VectorField {
        let mut v = VectorField::zeros(self.base.dim(), self.base.n());
        for w in &self.waves {
            if w.window.contains(t) {
                v.axpy(w.window.g_prime(t), &w.w);
            }
        }
        v
    }

    pub fn flux(&self, t: f64) -> TensorField {
        let mut u = self.base_u.clone();
        for w in &self.waves {
            if w.window.contains(t) {
                u.axpy(w.window.g_prime(t), &w.y);
            }
        }
        u
    }

    /// Adds a wave, merging with an existing one on the same window.
    pub fn push(&mut self, wave: Wave) {
        if let Some(w) = self.waves.iter_mut().find(|w| w.window == wave.window) {
            w.w.axpy(1.0, &wave.w);
            w.y.axpy(1.0, &wave.y);
        } else {
            self.waves.push(wave);
        }
    }
}

impl VelocityPath for WildState {
    fn velocity(&self, t: f64) -> VectorField {
        self.velocity_at(t)
    }
}

/// Spatial box `Π [lo_a, hi_a] ⊂ [0, 1]^d` (unused axes span `[0, 1]`).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct SpatialBox {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl SpatialBox {
    pub fn whole() -> Self {
        SpatialBox { lo: [0.0; 3], hi: [1.0; 3] }
    }

    /// Cell `idx` of the uniform `c`-refinement.
    pub fn cell(dim: usize, c: usize, idx: [usize; 3]) -> Self {
        let mut b = SpatialBox::whole();
        for a in 0..dim {
            b.lo[a] = idx[a] as f64 / c as f64;
            b.hi[a] = (idx[a] + 1) as f64 / c as f64;
        }
        b
    }
}

/// Envelope supported in the box: a product of `sin⁴` profiles over the
/// coordinate intervals `[lo/n, hi/n]`. Compared with exponential bumps it
/// concentrates the spectrum of the third derivatives best on coarse boxes.
pub fn envelope(dim: usize, n: usize, b: &SpatialBox) -> ScalarField {
    ScalarField::from_fn(dim, n, |x| {
        (0..dim)
            .map(|a| {
                let (l, h) = (b.lo[a], b.hi[a]);
                let s = (x[a] - l) / (h - l);
                if s > 0.0 && s < 1.0 {
                    (PI * s).sin().powi(4)
                } else {
                    0.0
                }
            })
            .product()
    })
}

/// Wave shape `(w̃, ỹ)` for the potential `E sin(2πk·x + φ)/(2π|k|)³`, scaled
/// so that `max|w̃| = 1`. `k` lies in the `(x₁, x₂)` plane.
pub fn wave_shape(
    torus: &Torus,
    env: &ScalarField,
    k: [i64; 2],
    phase: f64,
) -> Result<(VectorField, TensorField)> {
    let dim = torus.dim();
    let n = torus.n();
    let kn = TAU * ((k[0] * k[0] + k[1] * k[1]) as f64).sqrt();
    let osc = ScalarField::from_fn(dim, n, |x| {
        (TAU * (k[0] as f64 * x[0] + k[1] as f64 * x[1]) + phase).sin() / kn.powi(3)
    });
    let z = env.mul(&osc);
    let d = |f: &ScalarField, a: usize| torus.derivative(f, a);
    let z1 = d(&z, 0)?;
    let z2 = d(&z, 1)?;
    let z11 = d(&z1, 0)?;
    let z22 = d(&z2, 1)?;
    let z12 = d(&z1, 1)?;
    let lap = z11.add(&z22);
    let mut comps = vec![d(&lap, 1)?.scale(-1.0), d(&lap, 0)?];
    if dim == 3 {
        comps.push(ScalarField::zeros(dim, n));
    }
    let w = VectorField::from_components(comps)?;
    let mut y = TensorField::zeros(dim, n);
    *y.entry_mut(0, 0) = z12.scale(2.0);
    *y.entry_mut(0, 1) = z22.sub(&z11);
    *y.entry_mut(1, 1) = z12.scale(-2.0);
    let m = w.max_norm();
    if !(m > 0.0) {
        return Err(Error::NoAdmissibleAmplitude("degenerate wave shape".into()));
    }
    Ok((w.scale(1.0 / m), y.scale(1.0 / m)))
}

/// Largest `ε` such that moving `(ρ̃, V)` by less than `ε` (with `ρ̃` in
/// `rho_range`) changes `(d/2)λ_max(W⊗W/ρ̃ − U)` and `½|W|²/ρ̃` by less than
/// `δ/4` whenever the state obeys the constraint below `e_sup`.
///
/// With `|W| ≤ Z = sqrt(2 r_hi e_sup)` and `λ_max` 1-Lipschitz in the operator
/// norm the change is at most
/// `(d/2)[(2Z + ε)/r_lo + (Z + ε)²/r_lo²] ε`, inverted by bisection.
/// Returns `∞` when the coefficients are frozen (`r_lo = r_hi`, `v_osc = 0`).
pub fn epsilon_for_delta(dim: usize, delta: f64, e_sup: f64, rho_range: (f64, f64), v_osc: f64) -> f64 {
    let (r_lo, r_hi) = rho_range;
    assert!(delta > 0.0 && r_lo > 0.0 && r_hi >= r_lo, "invalid arguments");
    if r_lo == r_hi && v_osc == 0.0 {
        return f64::INFINITY;
    }
    let z = (2.0 * r_hi * e_sup.max(0.0)).sqrt();
    let bound = |e: f64| {
        subsolution::constraint_prefactor(dim).max(0.5)
            * ((2.0 * z + e) / r_lo + (z + e).powi(2) / (r_lo * r_lo))
            * e
    };
    let target = delta / 4.0;
    let mut hi = 1.0;
    while bound(hi) < target {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if bound(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// One space-time cell with frozen coefficients.
#[derive(Clone, Debug, serde::Serialize)]
pub struct BoxCell {
    pub window: TimeWindow,
    /// Indices of the time samples in the closed window.
    pub samples: Vec<usize>,
    pub sbox: SpatialBox,
    /// `sup ρ̃` over the cell.
    pub rho_frozen: f64,
    /// Mean of `V` over the cell.
    pub v_frozen: [f64; 3],
    pub osc_rho: f64,
    pub osc_v: f64,
}

/// Uniform refinement of `[T₁,T₂] × Ω` into `c^{d+1}` cells.
#[derive(Clone, Debug, serde::Serialize)]
pub struct BoxDecomposition {
    /// Subdivisions per axis.
    pub c: usize,
    /// Lipschitz count `⌊L/ε⌋ + 1`, an upper bound for `c`.
    pub c_bound: usize,
    pub eps_osc: f64,
    pub boxes: Vec<BoxCell>,
}

impl BoxDecomposition {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Largest oscillation of `ρ̃` and of `V` over all cells.
    pub fn max_osc(&self) -> (f64, f64) {
        self.boxes.iter().fold((0.0f64, 0.0f64), |(a, b), q| (a.max(q.osc_rho), b.max(q.osc_v)))
    }
}

/// Samples of `ρ̃` and `V` on `[T₁, T₂]`.
struct CoefficientSamples {
    dim: usize,
    n: usize,
    t1: f64,
    t2: f64,
    idx: Vec<usize>,
    times: Vec<f64>,
    rho: Vec<ScalarField>,
    big_v: Vec<VectorField>,
}

impl CoefficientSamples {
    fn new(
        ansatz: &Ansatz,
        big_v: &dyn Fn(f64) -> VectorField,
        t1: f64,
        t2: f64,
    ) -> Result<Self> {
        let all = ansatz.grid().times();
        let idx: Vec<usize> = (0..all.len()).filter(|&j| all[j] >= t1 && all[j] <= t2).collect();
        if idx.len() < 2 {
            return Err(Error::Precondition(format!(
                "interval [{t1}, {t2}] holds fewer than two time samples"
            )));
        }
        let times: Vec<f64> = idx.iter().map(|&j| all[j]).collect();
        let rho = times.iter().map(|&t| ansatz.rho_tilde(t)).collect();
        let big_v = times.iter().map(|&t| big_v(t)).collect();
        Ok(CoefficientSamples {
            dim: ansatz.dim(),
            n: ansatz.torus().n(),
            t1,
            t2,
            idx,
            times,
            rho,
            big_v,
        })
    }

    /// Lipschitz aggregate `L` with `osc ≤ L/c` on every cell of a
    /// `c`-refinement (sums of neighbour increments along each axis).
    fn lipschitz(&self) -> f64 {
        let (dim, n) = (self.dim, self.n);
        let mut comps: Vec<Vec<&ScalarField>> = vec![self.rho.iter().collect()];
        for a in 0..dim {
            comps.push(self.big_v.iter().map(|v| v.comp(a)).collect());
        }
        let mut l_rho = 0.0;
        let mut l_v2 = 0.0;
        for (ci, series) in comps.iter().enumerate() {
            let mut l = 0.0;
            // time: increments times number of samples per unit of interval
            let mut lt: f64 = 0.0;
            for (w, tt) in series.windows(2).zip(self.times.windows(2)) {
                let d = w[1].sub(w[0]).max_abs() / (tt[1] - tt[0]);
                lt = lt.max(d);
            }
            l += lt * (self.t2 - self.t1);
            for a in 0..dim {
                let mut la: f64 = 0.0;
                for f in series {
                    la = la.max(axis_increment(f, a) * n as f64);
                }
                l += la;
            }
            if ci == 0 {
                l_rho = l;
            } else {
                l_v2 += l * l;
            }
        }
        l_rho.max(l_v2.sqrt())
    }

    fn cells(&self, c: usize) -> Vec<BoxCell> {
        let dim = self.dim;
        let dt = (self.t2 - self.t1) / c as f64;
        let n_space = c.pow(dim as u32);
        let mut out = Vec::with_capacity(c * n_space);
        for it in 0..c {
            let (lo, hi) = (self.t1 + it as f64 * dt, self.t1 + (it + 1) as f64 * dt);
            let hi = if it + 1 == c { self.t2 } else { hi };
            let local: Vec<usize> = (0..self.times.len())
                .filter(|&j| self.times[j] >= lo - 1e-12 * dt && self.times[j] <= hi + 1e-12 * dt)
                .collect();
            for is in 0..n_space {
                let mut idx = [0; 3];
                let mut r = is;
                for i in idx.iter_mut().take(dim) {
                    *i = r % c;
                    r /= c;
                }
                let sb = SpatialBox::cell(dim, c, idx);
                out.push(self.cell(TimeWindow { t1: lo, t2: hi }, &local, sb));
            }
        }
        out
    }

    fn cell(&self, window: TimeWindow, local: &[usize], sb: SpatialBox) -> BoxCell {
        let (dim, n) = (self.dim, self.n);
        let pts = closed_box_points(dim, n, &sb);
        let (mut rmin, mut rmax) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut mean = [0.0; 3];
        let mut count = 0.0;
        for &j in local {
            for &p in &pts {
                let r = self.rho[j].data()[p];
                rmin = rmin.min(r);
                rmax = rmax.max(r);
                let v = self.big_v[j].at(p);
                for a in 0..dim {
                    mean[a] += v[a];
                }
                count += 1.0;
            }
        }
        for m in mean.iter_mut() {
            *m /= count;
        }
        let mut osc_v: f64 = 0.0;
        for &j in local {
            for &p in &pts {
                let v = self.big_v[j].at(p);
                let d2: f64 = (0..dim).map(|a| (v[a] - mean[a]).powi(2)).sum();
                osc_v = osc_v.max(d2.sqrt());
            }
        }
        BoxCell {
            window,
            samples: local.iter().map(|&j| self.idx[j]).collect(),
            sbox: sb,
            rho_frozen: rmax,
            v_frozen: mean,
            osc_rho: rmax - rmin,
            osc_v,
        }
    }
}

/// Largest increment between grid neighbours along `axis`.
fn axis_increment(f: &ScalarField, axis: usize) -> f64 {
    let (dim, n) = (f.dim(), f.n());
    let stride = n.pow(axis as u32);
    let d = f.data();
    let mut m: f64 = 0.0;
    for p in 0..d.len() {
        let i = (p / stride) % n;
        let q = if i + 1 == n { p + stride - n * stride } else { p + stride };
        m = m.max((d[q] - d[p]).abs());
    }
    let _ = dim;
    m
}

/// Grid points of the closed box, periodically (`x = 1` is `x = 0`).
pub(crate) fn closed_box_points(dim: usize, n: usize, sb: &SpatialBox) -> Vec<usize> {
    let tol = 1e-9 / n as f64;
    let ranges: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            if a < dim {
                (0..=n)
                    .filter(|&i| {
                        let x = i as f64 / n as f64;
                        x >= sb.lo[a] - tol && x <= sb.hi[a] + tol
                    })
                    .map(|i| i % n)
                    .collect()
            } else {
                vec![0]
            }
        })
        .collect();
    let mut out = Vec::new();
    for &k in &ranges[2] {
        for &j in &ranges[1] {
            for &i in &ranges[0] {
                out.push(i + n * (j + n * k));
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Coarsest uniform refinement of `[T₁,T₂] × Ω` on which every cell has
/// `osc ρ̃ < ε` and `sup|V − Ṽ| < ε`. Fails with `EpsilonTooSmall` when the
/// required `c^{d+1}` exceeds `cap` or `c` exceeds the spatial resolution.
pub fn localize(
    ansatz: &Ansatz,
    big_v: &dyn Fn(f64) -> VectorField,
    t1: f64,
    t2: f64,
    eps: f64,
    cap: usize,
) -> Result<BoxDecomposition> {
    if !(eps > 0.0) {
        return Err(Error::Precondition(format!("oscillation bound must be positive, got {eps}")));
    }
    let s = CoefficientSamples::new(ansatz, big_v, t1, t2)?;
    let dim = s.dim;
    let l = s.lipschitz();
    let c_bound = if eps.is_infinite() { 1 } else { (l / eps).floor() as usize + 1 };
    let too_small = |c: usize| {
        c > s.n || c.checked_pow(dim as u32 + 1).map_or(true, |m| m > cap)
    };
    for c in 1.. {
        if too_small(c) {
            let boxes = c_bound.max(c).saturating_pow(dim as u32 + 1);
            return Err(Error::EpsilonTooSmall { boxes, cap });
        }
        let boxes = s.cells(c);
        if boxes.iter().all(|q| q.osc_rho < eps && q.osc_v < eps) {
            return Ok(BoxDecomposition { c, c_bound, eps_osc: eps, boxes });
        }
    }
    unreachable!("refinement search terminates at the grid resolution")
}

/// The `c`-refinement regardless of oscillation; `eps_osc` records the
/// oscillation actually achieved.
pub fn uniform_boxes(
    ansatz: &Ansatz,
    big_v: &dyn Fn(f64) -> VectorField,
    t1: f64,
    t2: f64,
    c: usize,
) -> Result<BoxDecomposition> {
    let s = CoefficientSamples::new(ansatz, big_v, t1, t2)?;
    if c == 0 || c > s.n {
        return Err(Error::Precondition(format!("refinement {c} outside 1..={}", s.n)));
    }
    let boxes = s.cells(c);
    let (a, b) = boxes.iter().fold((0.0f64, 0.0f64), |(a, b), q| (a.max(q.osc_rho), b.max(q.osc_v)));
    let l = s.lipschitz();
    Ok(BoxDecomposition { c, c_bound: (l / a.max(b).max(1e-300)).floor() as usize + 1, eps_osc: a.max(b), boxes })
}

/// Everything a single-box search needs, sampled at the cell's time samples.
pub struct BoxProblem<'a> {
    pub torus: &'a Torus,
    pub cell: &'a BoxCell,
    pub times: &'a [f64],
    /// `v` at `times`.
    pub v: &'a [VectorField],
    /// `U` at `times`.
    pub u: &'a [TensorField],
    /// Actual `ρ̃` at `times`.
    pub rho: &'a [ScalarField],
    /// Actual `V = ∇Ψ` at `times`.
    pub big_v: &'a [VectorField],
    /// Target `e` at `times`; the actual constraint must stay strictly below.
    pub e: &'a [ScalarField],
    /// With frozen coefficients the constraint must stay below `e − margin`
    /// inside the cell.
    pub margin: f64,
}

#[derive(Clone, Debug)]
pub struct BoxOptions {
    /// Oscillation wavenumber per axis of the wave.
    pub frequency: i64,
    /// Fraction of the largest admissible amplitude used.
    pub safety: f64,
    pub bisections: usize,
    /// Wave directions (in units of `frequency`) and phases to try; empty
    /// means the four directions `(1,0), (0,1), (1,1), (1,−1)` with phase 0.
    pub candidates: Vec<([i64; 2], f64)>,
}

impl Default for BoxOptions {
    fn default() -> Self {
        BoxOptions { frequency: 8, safety: 0.9, bisections: 40, candidates: Vec::new() }
    }
}

/// Accepted perturbation of one cell.
#[derive(Clone, Debug)]
pub struct WavePerturbation {
    pub cell: BoxCell,
    pub direction: [i64; 2],
    pub phase: f64,
    pub amplitude: f64,
    /// Already scaled by the amplitude.
    pub wave: Wave,
    /// `∫∫ ½|W + w|²/ρ̃ − ½|W|²/ρ̃` over the cell's time samples.
    pub gain: f64,
    /// `max_t |⟨w(t), φ⟩|` for the lowest Fourier mode `φ`, a weak-continuity proxy.
    pub weak_pairing: f64,
    /// `max |w̃|` outside the cell (spectral leakage of the shape).
    pub leakage: f64,
}

fn candidates(m: i64, opts: &BoxOptions) -> Vec<([i64; 2], f64)> {
    if opts.candidates.is_empty() {
        [[1, 0], [0, 1], [1, 1], [1, -1]].iter().map(|d| ([d[0] * m, d[1] * m], 0.0)).collect()
    } else {
        opts.candidates.iter().map(|(d, ph)| ([d[0] * m, d[1] * m], *ph)).collect()
    }
}

/// Constraint check and gain for amplitude `a` of the shape `(w, y)`.
struct Candidate<'a> {
    p: &'a BoxProblem<'a>,
    w: VectorField,
    y: TensorField,
    inside: Vec<bool>,
    g: Vec<f64>,
    gp: Vec<f64>,
}

impl<'a> Candidate<'a> {
    fn new(p: &'a BoxProblem<'a>, w: VectorField, y: TensorField, env: &ScalarField) -> Self {
        let inside = env.data().iter().map(|&x| x > 0.0).collect();
        let g = p.times.iter().map(|&t| p.cell.window.g(t)).collect();
        let gp = p.times.iter().map(|&t| p.cell.window.g_prime(t)).collect();
        Candidate { p, w, y, inside, g, gp }
    }

    fn feasible(&self, a: f64) -> bool {
        let p = self.p;
        let dim = p.torus.dim();
        let vf = p.cell.v_frozen;
        let rf = p.cell.rho_frozen;
        for j in 0..p.times.len() {
            let (g, gp) = (a * self.g[j], a * self.gp[j]);
            let (v, u, rho, bv, e) = (&p.v[j], &p.u[j], &p.rho[j], &p.big_v[j], &p.e[j]);
            for q in 0..rho.len() {
                let mut wv = v.at(q);
                let dw = self.w.at(q);
                for c in 0..dim {
                    wv[c] += g * dw[c];
                }
                let uu = u.at(q).add(&self.y.at(q).scale(gp));
                let bq = bv.at(q);
                let mut wa = wv;
                for c in 0..dim {
                    wa[c] += bq[c];
                }
                if !(constraint_value(dim, &wa, &uu, rho.data()[q]) < e.data()[q]) {
                    return false;
                }
                if self.inside[q] && g != 0.0 {
                    let mut wfz = wv;
                    for c in 0..dim {
                        wfz[c] += vf[c];
                    }
                    if !(constraint_value(dim, &wfz, &uu, rf) < e.data()[q] - p.margin) {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn kinetic_change(&self, a: f64) -> Vec<f64> {
        let p = self.p;
        (0..p.times.len())
            .map(|j| {
                let w = p.v[j].add(&p.big_v[j]);
                let dw = self.w.scale(a * self.g[j]);
                // ½(|W + w|² − |W|²)/ρ = (W·w + ½|w|²)/ρ
                let num = w.dot(&dw).add(&dw.norm_sq().scale(0.5));
                num.zip_map(&p.rho[j], |x, r| x / r).mean()
            })
            .collect()
    }

    fn gain(&self, a: f64) -> f64 {
        trapezoid(self.p.times, &self.kinetic_change(a))
    }
}

pub(crate) fn trapezoid(t: &[f64], f: &[f64]) -> f64 {
    t.windows(2).zip(f.windows(2)).map(|(t, f)| 0.5 * (t[1] - t[0]) * (f[0] + f[1])).sum()
}

/// Largest `a` with `feasible(a)`, found by doubling then bisection.
fn max_amplitude(c: &Candidate<'_>, bisections: usize) -> f64 {
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut doublings = 0;
    while c.feasible(hi) {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 60 {
            return lo;
        }
    }
    for _ in 0..bisections {
        let mid = 0.5 * (lo + hi);
        if c.feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Builds a stationary wave inside the cell with the largest admissible
/// amplitude (times the safety factor) over a few oscillation directions.
pub fn perturb_box(p: &BoxProblem<'_>, opts: &BoxOptions) -> Result<WavePerturbation> {
    let torus = p.torus;
    let (dim, n) = (torus.dim(), torus.n());
    let m = opts.frequency.clamp(1, (n / 3).max(1) as i64);
    let env = envelope(dim, n, &p.cell.sbox);
    let zero = Candidate::new(
        p,
        VectorField::zeros(dim, n),
        TensorField::zeros(dim, n),
        &env,
    );
    if !zero.feasible(0.0) {
        return Err(Error::NoAdmissibleAmplitude(
            "constraint not strictly satisfied before perturbation".into(),
        ));
    }
    let shapes = candidates(m, opts)
        .into_iter()
        .map(|(k, ph)| wave_shape(torus, &env, k, ph).map(|s| (k, ph, s)))
        .collect::<Result<Vec<_>>>()?;
    // ties resolved towards the earlier candidate
    let best = shapes
        .into_par_iter()
        .enumerate()
        .map(|(i, (k, ph, (w, y)))| {
            let cand = Candidate::new(p, w, y, &env);
            let a = opts.safety * max_amplitude(&cand, opts.bisections);
            let gain = if a > 0.0 { cand.gain(a) } else { 0.0 };
            (i, k, ph, a, gain, cand.w, cand.y)
        })
        .filter(|c| c.3 > 0.0 && c.4 > 0.0)
        .max_by(|a, b| a.4.total_cmp(&b.4).then(b.0.cmp(&a.0)));
    let Some((_, k, phase, a, gain, w, y)) = best else {
        return Err(Error::NoAdmissibleAmplitude("no positive admissible amplitude".into()));
    };
    let leakage = (0..w.len())
        .filter(|&q| env.data()[q] == 0.0)
        .map(|q| {
            let x = w.at(q);
            (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
        })
        .fold(0.0, f64::max);
    let w = w.scale(a);
    let y = y.scale(a);
    let phi = lowest_mode(dim, n);
    let weak_pairing = p
        .times
        .iter()
        .map(|&t| p.cell.window.g(t) * w.comp(0).inner(&phi).abs().max(w.comp(1).inner(&phi).abs()))
        .fold(0.0, f64::max);
    Ok(WavePerturbation {
        cell: p.cell.clone(),
        direction: k,
        phase,
        amplitude: a,
        wave: Wave { window: p.cell.window, w, y },
        gain,
        weak_pairing,
        leakage,
    })
}

/// `cos(2πx₁) + sin(2πx₂)`, the test function of the weak pairing proxy.
fn lowest_mode(dim: usize, n: usize) -> ScalarField {
    ScalarField::from_fn(dim, n, |x| (TAU * x[0]).cos() + (TAU * x[1]).sin())
}

/// The energy the constraint is measured against.
pub enum Target<'a> {
    /// `ē[v] = χ − cρ̃θ[v] − c∂_tΨ` with `θ[v]` re-solved from `θ₀`.
    Ebar {
        chi: &'a (dyn Fn(f64) -> f64 + Sync),
        theta0: &'a ScalarField,
        heat: HeatOptions,
    },
    /// A prescribed `e(t, x)` on the ansatz time grid.
    Fixed(&'a [ScalarField]),
}

pub struct WildProblem<'a> {
    pub ansatz: &'a Ansatz,
    pub target: Target<'a>,
}

/// A state sampled on the time grid together with its energy target.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub times: Vec<f64>,
    pub v: Vec<VectorField>,
    pub u: Vec<TensorField>,
    pub e: Vec<ScalarField>,
    pub gaps: Vec<ScalarField>,
    /// Spatial means of `½|W|²/ρ̃ − e`.
    pub defect_means: Vec<f64>,
    /// Spatial means of `(½|W|²/ρ̃ − e)²`.
    pub defect_sq_means: Vec<f64>,
    pub theta: Option<TemperatureSolve>,
}

impl Evaluation {
    pub fn i_eps(&self, eps: f64) -> f64 {
        subsolution::i_eps(&self.times, &self.defect_means, eps)
    }

    /// `∫_ε^T ∫_Ω (½|W|²/ρ̃ − e)²`.
    pub fn defect_sq(&self, eps: f64) -> f64 {
        subsolution::i_eps(&self.times, &self.defect_sq_means, eps)
    }

    /// Minimum of the gap over samples with `t ≥ from`.
    pub fn inf_gap(&self, from: f64) -> f64 {
        self.times
            .iter()
            .zip(&self.gaps)
            .filter(|(&t, _)| t >= from)
            .map(|(_, g)| g.min())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn report(&self, eps: f64) -> GapReport {
        gap_report(&self.times, &self.gaps, &[0.0, eps])
    }
}

/// Samples the state, solves for `θ[v]` when needed and forms gaps and defects.
pub fn evaluate(problem: &WildProblem<'_>, state: &WildState) -> Result<Evaluation> {
    let ansatz = problem.ansatz;
    let times = ansatz.grid().times();
    let (theta, e) = match &problem.target {
        Target::Ebar { chi, theta0, heat } => {
            let sol = solve_theta_at(ansatz, state, theta0, None, &times, heat)?;
            let e = subsolution::ebar(ansatz, *chi, &sol);
            (Some(sol), e)
        }
        Target::Fixed(e) => {
            if e.len() != times.len() {
                return Err(Error::GridMismatch("energy target length differs from the time grid".into()));
            }
            (None, e.to_vec())
        }
    };
    let rows: Vec<_> = times
        .par_iter()
        .zip(&e)
        .map(|(&t, e)| {
            let v = state.velocity_at(t);
            let u = state.flux(t);
            let gap = subsolution::gap_field(ansatz, t, &v, &u, e);
            let def = subsolution::kinetic_defect(ansatz, t, &v, e);
            let (m, m2) = (def.mean(), def.inner(&def));
            (v, u, gap, m, m2)
        })
        .collect();
    let mut ev = Evaluation {
        times,
        v: Vec::new(),
        u: Vec::new(),
        e,
        gaps: Vec::new(),
        defect_means: Vec::new(),
        defect_sq_means: Vec::new(),
        theta,
    };
    for (v, u, g, m, m2) in rows {
        ev.v.push(v);
        ev.u.push(u);
        ev.gaps.push(g);
        ev.defect_means.push(m);
        ev.defect_sq_means.push(m2);
    }
    Ok(ev)
}

#[derive(Clone, Debug)]
pub struct StepOptions {
    pub boxes: BoxOptions,
    /// Largest admissible number of cells.
    pub box_cap: usize,
    /// `δ` as a fraction of the infimal gap on `[ε, T]`.
    pub delta_fraction: f64,
    /// `α` as a fraction of `|I_ε|`.
    pub alpha_fraction: f64,
    pub max_backtracks: usize,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            boxes: BoxOptions::default(),
            box_cap: 64,
            delta_fraction: 0.1,
            alpha_fraction: 0.99,
            max_backtracks: 8,
        }
    }
}

/// One accepted energy-gain step.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub eps: f64,
    pub delta: f64,
    pub alpha: f64,
    /// `β̂ = I_ε[v′] − I_ε[v]`.
    pub gain: f64,
    /// `Λ̂ = β̂ / ∫_ε^T∫_Ω (½|W|²/ρ̃ − ē)²` at the start of the step.
    pub lambda_hat: f64,
    pub i_eps: f64,
    pub inf_gap: f64,
    /// Cells refined per axis and perturbations accepted.
    pub c: usize,
    pub boxes: usize,
    /// Whether the cells meet the oscillation bound from [`epsilon_for_delta`].
    pub rigorous: bool,
    pub eps_osc: f64,
    pub backtracks: usize,
}

pub const LEDGER_HEADER: &str =
    "step,eps,delta,alpha,gain,lambda_hat,beta_hat,i_eps,inf_gap,c,boxes,rigorous,backtracks";

/// Ledger as CSV; floats use the shortest round-trip representation.
pub fn ledger_csv(records: &[StepRecord]) -> String {
    let mut s = String::from(LEDGER_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{},{},{}\n",
            r.step,
            r.eps,
            r.delta,
            r.alpha,
            r.gain,
            r.lambda_hat,
            r.gain,
            r.i_eps,
            r.inf_gap,
            r.c,
            r.boxes,
            r.rigorous,
            r.backtracks
        ));
    }
    s
}

fn check_eps(t_final: f64, eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < t_final) {
        return Err(Error::Precondition(format!("ε = {eps} outside (0, {t_final})")));
    }
    Ok(())
}

/// Largest `c` with `c^{d+1} ≤ cap`.
fn fallback_refinement(dim: usize, cap: usize) -> usize {
    let mut c = 1;
    while (c + 1usize).checked_pow(dim as u32 + 1).is_some_and(|m| m <= cap) {
        c += 1;
    }
    c
}

/// One energy-gain step: perturbs every admissible cell of `[ε, T] × Ω`
/// towards `e = ē − δ`, then re-solves `θ[v′]` and re-audits membership,
/// halving the perturbation when `I_ε` fails to increase.
pub fn pw1_step(
    problem: &WildProblem<'_>,
    state: &WildState,
    current: &Evaluation,
    eps: f64,
    step: usize,
    opts: &StepOptions,
) -> Result<(WildState, Evaluation, StepRecord)> {
    let ansatz = problem.ansatz;
    let t_final = ansatz.grid().t_final;
    check_eps(t_final, eps)?;
    let i0 = current.i_eps(eps);
    if !(i0 < 0.0) || i0.abs() < 1e-14 {
        return Err(Error::Precondition(format!("I_ε = {i0:e} is not negative")));
    }
    let alpha = opts.alpha_fraction * (-i0);
    let inf_gap = current.inf_gap(eps);
    if !(inf_gap > 0.0) || !current.report(eps).member {
        return Err(Error::Precondition(format!("state is not a strict subsolution (inf gap {inf_gap:e})")));
    }
    let delta = opts.delta_fraction * inf_gap;
    let dim = ansatz.dim();
    let torus = ansatz.torus();
    let times = &current.times;
    let rho: Vec<ScalarField> = times.iter().map(|&t| ansatz.rho_tilde(t)).collect();
    let big_v: Vec<VectorField> = times.iter().map(|&t| ansatz.grad_psi(t)).collect();
    let e_sup = current.e.iter().map(|e| e.max()).fold(f64::NEG_INFINITY, f64::max);
    let v_osc = 2.0 * big_v.iter().map(|v| v.max_norm()).fold(0.0, f64::max);
    let eps_loc = epsilon_for_delta(dim, delta, e_sup, ansatz.rho_tilde_range(), v_osc);
    let bv = |t: f64| ansatz.grad_psi(t);
    let (decomp, rigorous) = match localize(ansatz, &bv, eps, t_final, eps_loc, opts.box_cap) {
        Ok(d) => (d, true),
        Err(Error::EpsilonTooSmall { .. }) => {
            let c = fallback_refinement(dim, opts.box_cap).min(torus.n());
            (uniform_boxes(ansatz, &bv, eps, t_final, c)?, false)
        }
        Err(e) => return Err(e),
    };
    let target: Vec<ScalarField> = current.e.iter().map(|e| e.map(|x| x - delta)).collect();

    // Greedy order: descending box-integrated squared gap.
    let mut order: Vec<(f64, usize)> = decomp
        .boxes
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let pts = closed_box_points(dim, torus.n(), &q.sbox);
            let s: f64 = q
                .samples
                .iter()
                .map(|&j| pts.iter().map(|&p| current.gaps[j].data()[p].powi(2)).sum::<f64>())
                .sum();
            (s, i)
        })
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut v_w = current.v.clone();
    let mut u_w = current.u.clone();
    let mut accepted: Vec<WavePerturbation> = Vec::new();
    for &(_, i) in &order {
        let cell = &decomp.boxes[i];
        let (a, b) = (cell.samples[0], *cell.samples.last().expect("non-empty cell") + 1);
        let bp = BoxProblem {
            torus,
            cell,
            times: &times[a..b],
            v: &v_w[a..b],
            u: &u_w[a..b],
            rho: &rho[a..b],
            big_v: &big_v[a..b],
            e: &target[a..b],
            margin: 0.5 * delta,
        };
        match perturb_box(&bp, &opts.boxes) {
            Ok(p) => {
                for j in a..b {
                    let t = times[j];
                    v_w[j].axpy(p.wave.window.g(t), &p.wave.w);
                    u_w[j].axpy(p.wave.window.g_prime(t), &p.wave.y);
                }
                accepted.push(p);
            }
            Err(Error::NoAdmissibleAmplitude(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if accepted.is_empty() {
        return Err(Error::StepStalled(format!("no cell admitted a perturbation (δ = {delta:e})")));
    }
    let def_sq = current.defect_sq(eps);
    let mut scale = 1.0;
    for backtracks in 0..=opts.max_backtracks {
        let mut next = state.clone();
        for p in &accepted {
            next.push(Wave { window: p.wave.window, w: p.wave.w.scale(scale), y: p.wave.y.scale(scale) });
        }
        let ev = evaluate(problem, &next)?;
        let i1 = ev.i_eps(eps);
        if ev.report(eps).member && i1 > i0 {
            let gain = i1 - i0;
            let record = StepRecord {
                step,
                eps,
                delta,
                alpha,
                gain,
                lambda_hat: gain / def_sq,
                i_eps: i1,
                inf_gap: ev.inf_gap(eps),
                c: decomp.c,
                boxes: accepted.len(),
                rigorous,
                eps_osc: decomp.eps_osc,
                backtracks,
            };
            return Ok((next, ev, record));
        }
        scale *= 0.5;
    }
    Err(Error::StepStalled(format!(
        "I_ε or membership not improved after {} backtracks",
        opts.max_backtracks
    )))
}

#[derive(Clone, Debug)]
pub struct Schedule {
    pub eps: f64,
    pub max_steps: usize,
    /// Stop once `|I_ε|` falls below this.
    pub tol: f64,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub states: Vec<WildState>,
    pub ledger: Vec<StepRecord>,
    /// `I_ε` of every state, starting with the initial one.
    pub i_eps: Vec<f64>,
    pub final_eval: Evaluation,
    pub final_report: GapReport,
    /// Diagnostics when a step stalled before the budget was exhausted.
    pub stalled: Option<String>,
}

impl Trajectory {
    pub fn remaining_defect(&self) -> f64 {
        self.i_eps.last().map_or(0.0, |x| x.abs())
    }
}

/// Runs `pw1_step` until `|I_ε| < tol`, the step budget is exhausted or a step stalls.
pub fn iterate(
    problem: &WildProblem<'_>,
    initial: WildState,
    schedule: &Schedule,
    opts: &StepOptions,
) -> Result<Trajectory> {
    check_eps(problem.ansatz.grid().t_final, schedule.eps)?;
    let mut ev = evaluate(problem, &initial)?;
    let mut i_hist = vec![ev.i_eps(schedule.eps)];
    let mut states = vec![initial];
    let mut ledger = Vec::new();
    let mut stalled = None;
    for k in 1..=schedule.max_steps {
        if i_hist.last().expect("non-empty").abs() < schedule.tol {
            break;
        }
        let state = states.last().expect("non-empty");
        match pw1_step(problem, state, &ev, schedule.eps, k, opts) {
            Ok((next, nev, rec)) => {
                i_hist.push(rec.i_eps);
                ledger.push(rec);
                states.push(next);
                ev = nev;
            }
            Err(Error::StepStalled(msg)) => {
                stalled = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let final_report = ev.report(schedule.eps);
    Ok(Trajectory { states, ledger, i_eps: i_hist, final_eval: ev, final_report, stalled })
}

/// Smallest measured `Λ̂` and, per step, whether `β̂ ≥ Λ̂ α²/((T − ε)|Ω|)`.
pub fn jensen_floor(ledger: &[StepRecord], t_final: f64) -> (f64, Vec<bool>) {
    let lambda = ledger.iter().map(|r| r.lambda_hat).fold(f64::INFINITY, f64::min);
    let ok = ledger
        .iter()
        .map(|r| r.gain >= lambda * r.alpha * r.alpha / (t_final - r.eps))
        .collect();
    (lambda, ok)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heat::comparison_bounds;
    use crate::presets::preset;
    use crate::subsolution::{equality_tensor, linear_system_residual_with, lambda_max_sym};
    use crate::torus::{GridSpec, SymMat};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::time::Instant;

    fn ansatz_from(name: &str, grid: &GridSpec) -> (Ansatz, ScalarField) {
        let data = preset(name, grid.dim, grid.n_space).unwrap();
        (Ansatz::build(grid, &data.rho0, &data.u0).unwrap(), data.theta0)
    }

    #[test]
    fn bump_window_is_smooth_and_compact() {
        let w = TimeWindow { t1: 0.2, t2: 0.6 };
        assert_eq!(w.g(0.4), 1.0);
        assert_eq!(w.g(0.2), 0.0);
        assert_eq!(w.g(0.6), 0.0);
        assert_eq!(w.g_prime(0.1), 0.0);
        for &t in &[0.25, 0.33, 0.47, 0.58] {
            let h = 1e-6;
            let fd = (w.g(t + h) - w.g(t - h)) / (2.0 * h);
            assert!((fd - w.g_prime(t)).abs() < 1e-6 * (1.0 + fd.abs()), "t = {t}");
        }
    }

    #[test]
    fn epsilon_for_delta_is_monotone_and_frozen_is_infinite() {
        let mut last = f64::INFINITY;
        for k in 0..20 {
            let delta = 2f64.powi(-k);
            let e = epsilon_for_delta(2, delta, 3.0, (0.5, 2.0), 0.3);
            assert!(e > 0.0 && e < last);
            last = e;
        }
        assert!(last < 1e-5);
        assert!(epsilon_for_delta(3, 1e-3, 3.0, (1.0, 1.0), 0.0).is_infinite());
    }

    #[test]
    fn epsilon_for_delta_monte_carlo_audit() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for dim in [2usize, 3] {
            let (r_lo, r_hi, e_sup, delta) = (0.5, 2.0, 3.0, 0.05);
            let eps = epsilon_for_delta(dim, delta, e_sup, (r_lo, r_hi), 1.0);
            let mut failures = 0;
            let mut tried = 0;
            while tried < 10_000 {
                let rho: f64 = rng.gen_range(r_lo..=r_hi);
                let mut w = [0.0; 3];
                for x in w.iter_mut().take(dim) {
                    *x = rng.gen_range(-2.0..2.0);
                }
                let mut u = SymMat::zeros(dim);
                for i in 0..dim {
                    for j in i..dim {
                        let x = rng.gen_range(-1.0..1.0);
                        u.a[i][j] = x;
                        u.a[j][i] = x;
                    }
                }
                let tr = u.trace() / dim as f64;
                u = u.sub(&SymMat::identity(dim).scale(tr));
                let val = constraint_value(dim, &w, &u, rho);
                if val >= e_sup {
                    continue;
                }
                tried += 1;
                let r2 = (rho + rng.gen_range(-eps..eps)).clamp(r_lo, r_hi);
                let mut w2 = w;
                for x in w2.iter_mut().take(dim) {
                    *x += rng.gen_range(-eps..eps) / (dim as f64).sqrt();
                }
                let val2 = constraint_value(dim, &w2, &u, r2);
                let kin = |w: &[f64; 3], r: f64| 0.5 * w.iter().map(|x| x * x).sum::<f64>() / r;
                if (val2 - val).abs() >= delta / 4.0 || (kin(&w2, r2) - kin(&w, rho)).abs() >= delta / 4.0 {
                    failures += 1;
                }
            }
            assert_eq!(failures, 0, "d = {dim}");
        }
    }

    #[test]
    fn localize_constant_data_gives_one_box() {
        let grid = GridSpec::new(2, 16, 11, 0.5).unwrap();
        let (a, _) = ansatz_from("equilibrium", &grid);
        let bv = |t: f64| a.grad_psi(t);
        let d = localize(&a, &bv, 0.0, 0.5, 1e-3, 64).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.boxes[0].samples.len(), 11);
    }

    /// Minimal `c` from a direct sweep over aligned cells of the grid values.
    fn brute_force_c(n: usize, eps: f64) -> usize {
        let f = |i: usize| 2.0 + 0.5 * (TAU * (i % n) as f64 / n as f64).sin();
        (1..=n)
            .find(|&c| {
                (0..c).all(|b| {
                    let vals: Vec<f64> = (0..=n).filter(|&i| i * c >= b * n && i * c <= (b + 1) * n).map(f).collect();
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    hi - lo < eps
                })
            })
            .unwrap()
    }

    #[test]
    fn localize_matches_brute_force_and_halving_bound() {
        let n = 32;
        let grid = GridSpec::new(2, n, 11, 0.5).unwrap();
        let rho0 = ScalarField::from_fn(2, n, |x| 2.0 + 0.5 * (TAU * x[0]).sin());
        let a = Ansatz::build(&grid, &rho0, &VectorField::zeros(2, n)).unwrap();
        let bv = |t: f64| a.grad_psi(t);
        let d = localize(&a, &bv, 0.0, 0.5, 0.6, 100_000).unwrap();
        let c = brute_force_c(n, 0.6);
        assert_eq!(d.c, c);
        assert_eq!(d.len(), c.pow(3));
        assert!(d.len() <= d.c_bound.pow(3));
        let mut eps = 0.6;
        let mut prev = d.c_bound;
        for _ in 0..2 {
            eps /= 2.0;
            let d2 = localize(&a, &bv, 0.0, 0.5, eps, 1_000_000).unwrap();
            assert_eq!(d2.c, brute_force_c(n, eps));
            assert!(d2.c <= d2.c_bound);
            // the Lipschitz count at most doubles per axis
            assert!(d2.c_bound.pow(3) <= 8 * prev.pow(3));
            prev = d2.c_bound;
        }
        assert!(matches!(
            localize(&a, &bv, 0.0, 0.5, 1e-3, 64),
            Err(Error::EpsilonTooSmall { .. })
        ));
    }

    #[test]
    fn wave_shape_satisfies_linear_system() {
        for (dim, n) in [(2usize, 32usize), (3, 16)] {
            let torus = Torus::new(dim, n);
            let mut sb = SpatialBox::whole();
            sb.lo[0] = 0.25;
            sb.hi[0] = 0.75;
            let env = envelope(dim, n, &sb);
            let (w, y) = wave_shape(&torus, &env, [4, -4], 0.3).unwrap();
            assert!((w.max_norm() - 1.0).abs() < 1e-12);
            assert!(torus.divergence(&w).unwrap().max_abs() < 1e-10);
            assert!(y.is_trace_free(1e-14));
            let r = subsolution::tensor_divergence(&torus, &y).unwrap().add(&w);
            assert!(r.max_norm() < 1e-10, "div y + w = {}", r.max_norm());
        }
    }

    fn unit_problem_data(n: usize, m: usize) -> (Torus, BoxCell, Vec<f64>) {
        let dim = 2;
        let times: Vec<f64> = (0..m).map(|j| j as f64 / (m - 1) as f64).collect();
        let cell = BoxCell {
            window: TimeWindow { t1: 0.0, t2: 1.0 },
            samples: (0..m).collect(),
            sbox: SpatialBox::whole(),
            rho_frozen: 1.0,
            v_frozen: [0.0; 3],
            osc_rho: 0.0,
            osc_v: 0.0,
        };
        (Torus::new(dim, n), cell, times)
    }

    #[test]
    fn zero_margin_box_is_rejected() {
        let (n, m) = (16, 9);
        let (torus, cell, times) = unit_problem_data(n, m);
        let v: Vec<VectorField> = vec![VectorField::from_fn(2, n, |_| [0.5, 0.0, 0.0]); m];
        let u = vec![TensorField::zeros(2, n); m];
        let rho = vec![ScalarField::constant(2, n, 1.0); m];
        let bv = vec![VectorField::zeros(2, n); m];
        // gap ≡ 0: e equals the constraint value
        let e = vec![ScalarField::constant(2, n, constraint_value(2, &[0.5, 0.0, 0.0], &SymMat::zeros(2), 1.0)); m];
        let p = BoxProblem { torus: &torus, cell: &cell, times: &times, v: &v, u: &u, rho: &rho, big_v: &bv, e: &e, margin: 0.0 };
        assert!(matches!(perturb_box(&p, &BoxOptions::default()), Err(Error::NoAdmissibleAmplitude(_))));
    }

    fn unit_box(n: usize, m: usize, freq: i64) -> (WavePerturbation, f64, Vec<f64>) {
        let (torus, cell, times) = unit_problem_data(n, m);
        let v = vec![VectorField::zeros(2, n); m];
        let u = vec![TensorField::zeros(2, n); m];
        let rho = vec![ScalarField::constant(2, n, 1.0); m];
        let e = vec![ScalarField::constant(2, n, 1.0); m];
        let p = BoxProblem { torus: &torus, cell: &cell, times: &times, v: &v, u: &u, rho: &rho, big_v: &v, e: &e, margin: 0.0 };
        let opts = BoxOptions { frequency: freq, ..BoxOptions::default() };
        let pert = perturb_box(&p, &opts).unwrap();
        // ∫∫ (e − 0)² = 1
        (pert, 1.0, times)
    }

    #[test]
    fn unit_box_perturbation_gains_energy_and_solves_linear_system() {
        let (n, m) = (32, 41);
        let (p, e2, times) = unit_box(n, m, 8);
        let rho_gain = p.gain / e2;
        assert!(p.gain > 0.0 && rho_gain > 1e-3, "gain {}", p.gain);
        // line search oracle: 1/0.9 of the amplitude violates, the amplitude itself holds
        let dim = 2;
        let mut state = WildState::new(VectorField::zeros(dim, n));
        state.push(p.wave.clone());
        let torus = Torus::new(dim, n);
        let vs: Vec<_> = times.iter().map(|&t| state.velocity_at(t)).collect();
        let vt: Vec<_> = times.iter().map(|&t| state.velocity_dt(t)).collect();
        let us: Vec<_> = times.iter().map(|&t| state.flux(t)).collect();
        let (r1, r2) = linear_system_residual_with(&torus, &times, &vs, &vt, &us).unwrap();
        assert!(r1 <= 1e-8 && r2 <= 1e-10, "{r1:e} {r2:e}");
        let mut max_c: f64 = 0.0;
        for (v, u) in vs.iter().zip(&us) {
            for q in 0..v.len() {
                max_c = max_c.max(constraint_value(dim, &v.at(q), &u.at(q), 1.0));
            }
        }
        assert!(max_c < 1.0, "constraint {max_c}");
        let kin: Vec<f64> = vs.iter().map(|v| 0.5 * v.norm_sq().mean()).collect();
        assert!((trapezoid(&times, &kin) - p.gain).abs() < 1e-12);
        // the whole-domain envelope is a trigonometric polynomial
        assert!(p.leakage < 1e-12, "leakage {}", p.leakage);
    }

    #[test]
    fn frequency_sweep_gain_converges_and_pairing_decays() {
        let (n, m) = (48, 21);
        let runs: Vec<(f64, f64)> = [4i64, 8, 12, 16]
            .iter()
            .map(|&f| {
                let (p, _, _) = unit_box(n, m, f);
                (p.gain, p.weak_pairing)
            })
            .collect();
        let freqs = [4.0, 8.0, 12.0, 16.0];
        for (i, w) in runs.windows(2).enumerate() {
            // monotone decrease up to 5% wobble
            assert!(w[1].0 < 1.05 * w[0].0, "gain {:?}", runs);
            // pairing at least O(1/n)
            assert!(w[1].1 <= runs[0].1 * freqs[0] / freqs[i + 1] + 1e-15, "pairing {:?}", runs);
        }
        let g_last = runs[3].0;
        assert!((runs[2].0 - g_last).abs() < 0.05 * g_last, "gain {:?}", runs);
        assert!(g_last > 0.0);
    }

    #[test]
    fn exact_state_fails_precondition_and_iterates_zero_steps() {
        let grid = GridSpec::new(2, 16, 21, 0.5).unwrap();
        let (a, _) = ansatz_from("equilibrium", &grid);
        let rho = a.rho0().data()[0];
        let c = [0.3, -0.2, 0.0];
        let base = VectorField::from_fn(2, 16, |_| c);
        let eq = equality_tensor(2, &c, rho);
        let base_u = TensorField::from_fn(2, 16, |_| eq.clone());
        let e0 = 0.5 * (c[0] * c[0] + c[1] * c[1]) / rho;
        assert!((lambda_max_sym(&SymMat::outer(2, &c).scale(1.0 / rho).sub(&eq)) - e0).abs() < 1e-14);
        let e = vec![ScalarField::constant(2, 16, e0); 21];
        let problem = WildProblem { ansatz: &a, target: Target::Fixed(&e) };
        let state = WildState::new(base).with_flux(base_u);
        let ev = evaluate(&problem, &state).unwrap();
        assert!(ev.i_eps(0.05).abs() < 1e-14);
        assert!(matches!(
            pw1_step(&problem, &state, &ev, 0.05, 1, &StepOptions::default()),
            Err(Error::Precondition(_))
        ));
        let sched = Schedule { eps: 0.05, max_steps: 5, tol: 1e-12 };
        let tr = iterate(&problem, state.clone(), &sched, &StepOptions::default()).unwrap();
        assert!(tr.ledger.is_empty());
        let bad = Schedule { eps: 0.6, ..sched };
        assert!(matches!(iterate(&problem, state, &bad, &StepOptions::default()), Err(Error::Precondition(_))));
    }

    #[test]
    #[ignore = "long-running pipeline, run explicitly"]
    fn wild_pipeline_probe() {
        let grid = GridSpec::new(2, 32, 41, 0.25).unwrap();
        let (a, theta0) = ansatz_from("mild", &grid);
        let (_, hi) = comparison_bounds(&a, &theta0).unwrap();
        let chi0 = subsolution::choose_chi_wild(&a, hi, 0.1);
        let chi = move |_t: f64| chi0;
        let problem = WildProblem {
            ansatz: &a,
            target: Target::Ebar { chi: &chi, theta0: &theta0, heat: HeatOptions::default() },
        };
        let start = Instant::now();
        let sched = Schedule { eps: 0.025, max_steps: 10, tol: 0.0 };
        let tr = iterate(&problem, WildState::new(a.v0().clone()), &sched, &StepOptions::default()).unwrap();
        eprintln!("{}", ledger_csv(&tr.ledger));
        eprintln!("stalled {:?} elapsed {:?}", tr.stalled, start.elapsed());
    }
}
