//! Pointwise algebra of subsolutions: `λ_max`, the kinetic inequality, the
//! energy function `ē[v]`, the gap, the functionals `I_ε`, the sup bound and
//! the linear system `∂_t v + div U = 0`, `div v = 0`.

use crate::ansatz::Ansatz;
use crate::error::{Error, Result};
use crate::heat::TemperatureSolve;
use crate::heat_capacity;
use crate::quadrature::{derivative_stencil, integrate_from};
use crate::torus::{ScalarField, SymMat, TensorField, Torus, VectorField};

/// Trace tolerance for matrices declared trace-free.
pub const TRACE_TOL: f64 = 1e-12;

/// Prefactor `d/2` of the `λ_max` constraint.
pub fn constraint_prefactor(dim: usize) -> f64 {
    dim as f64 / 2.0
}

/// Largest eigenvalue of a trace-free symmetric matrix.
pub fn lambda_max(m: &SymMat) -> Result<f64> {
    let tr = m.trace();
    if tr.abs() > TRACE_TOL * m.max_abs_entry().max(1.0) {
        return Err(Error::NotTraceFree(tr));
    }
    Ok(lambda_max_sym(m))
}

/// Largest eigenvalue of any symmetric matrix, in closed form.
pub fn lambda_max_sym(m: &SymMat) -> f64 {
    let a = &m.a;
    if m.dim == 2 {
        let q = 0.5 * (a[0][0] + a[1][1]);
        let r = 0.5 * (a[0][0] - a[1][1]);
        return q + r.hypot(a[0][1]);
    }
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
    let d0 = a[0][0] - q;
    let d1 = a[1][1] - q;
    let d2 = a[2][2] - q;
    let p2 = d0 * d0 + d1 * d1 + d2 * d2 + 2.0 * off;
    if p2 == 0.0 {
        return q;
    }
    let p = (p2 / 6.0).sqrt();
    let (b00, b11, b22) = (d0 / p, d1 / p, d2 / p);
    let (b01, b02, b12) = (a[0][1] / p, a[0][2] / p, a[1][2] / p);
    let det = b00 * (b11 * b22 - b12 * b12) - b01 * (b01 * b22 - b12 * b02)
        + b02 * (b01 * b12 - b11 * b02);
    let r = (0.5 * det).clamp(-1.0, 1.0);
    q + 2.0 * p * (r.acos() / 3.0).cos()
}

/// `w⊗w/ρ − |w|²/(dρ) I`, the flux saturating the kinetic inequality.
pub fn equality_tensor(dim: usize, w: &[f64; 3], rho: f64) -> SymMat {
    let ww: f64 = w[..dim].iter().map(|x| x * x).sum();
    SymMat::outer(dim, w).scale(1.0 / rho).sub(&SymMat::identity(dim).scale(ww / (dim as f64 * rho)))
}

/// `(d/2) λ_max(w⊗w/ρ − U)`.
pub fn constraint_value(dim: usize, w: &[f64; 3], u: &SymMat, rho: f64) -> f64 {
    constraint_prefactor(dim) * lambda_max_sym(&SymMat::outer(dim, w).scale(1.0 / rho).sub(u))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KineticCheck {
    /// `½|w|²/ρ`
    pub lhs: f64,
    /// `(d/2) λ_max(w⊗w/ρ − U)`
    pub rhs: f64,
    /// `U` is the equality tensor within `1e−10`.
    pub equality: bool,
}

impl KineticCheck {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs + 1e-12 * self.rhs.abs().max(1.0)
    }
}

pub fn kinetic_inequality_check(w: &[f64; 3], u: &SymMat, rho: f64) -> KineticCheck {
    let dim = u.dim;
    let lhs = 0.5 * w[..dim].iter().map(|x| x * x).sum::<f64>() / rho;
    let rhs = constraint_value(dim, w, u, rho);
    let equality = equality_tensor(dim, w, rho).sub(u).max_abs_entry() <= 1e-10;
    KineticCheck { lhs, rhs, equality }
}

/// `ē = χ − cρ̃θ − c∂_tΨ` at time `t`.
pub fn ebar_at(ansatz: &Ansatz, chi: f64, t: f64, theta: &ScalarField) -> ScalarField {
    let c = heat_capacity(ansatz.dim());
    let rho = ansatz.rho_tilde(t);
    let dpsi = ansatz.dt_psi(t);
    let mut out = rho.mul(theta).scale(-c);
    out.axpy(-c, &dpsi);
    out.map(|x| x + chi)
}

/// `ē[v]` at every sample of a temperature solve.
pub fn ebar(ansatz: &Ansatz, chi: &dyn Fn(f64) -> f64, sol: &TemperatureSolve) -> Vec<ScalarField> {
    sol.times.iter().zip(&sol.theta).map(|(&t, th)| ebar_at(ansatz, chi(t), t, th)).collect()
}

/// `W = v + ∇Ψ` at time `t`.
pub fn momentum(ansatz: &Ansatz, t: f64, v: &VectorField) -> VectorField {
    v.add(&ansatz.grad_psi(t))
}

/// `(d/2) λ_max(W⊗W/ρ̃ − U)` pointwise.
pub fn constraint_field(ansatz: &Ansatz, t: f64, v: &VectorField, u: &TensorField) -> ScalarField {
    let dim = ansatz.dim();
    let w = momentum(ansatz, t, v);
    let rho = ansatz.rho_tilde(t);
    let data = (0..rho.len())
        .map(|p| constraint_value(dim, &w.at(p), &u.at(p), rho.data()[p]))
        .collect();
    ScalarField::from_vec(dim, rho.n(), data).expect("grid size")
}

/// Pointwise gap `ē − (d/2) λ_max(W⊗W/ρ̃ − U)`.
pub fn gap_field(
    ansatz: &Ansatz,
    t: f64,
    v: &VectorField,
    u: &TensorField,
    ebar: &ScalarField,
) -> ScalarField {
    ebar.sub(&constraint_field(ansatz, t, v, u))
}

/// `½|W|²/ρ̃ − ē` pointwise; its integral over `(ε,T)×Ω` is `I_ε`.
pub fn kinetic_defect(ansatz: &Ansatz, t: f64, v: &VectorField, ebar: &ScalarField) -> ScalarField {
    let w = momentum(ansatz, t, v);
    w.norm_sq().zip_map(&ansatz.rho_tilde(t), |a, r| 0.5 * a / r).sub(ebar)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GapReport {
    pub min_per_time: Vec<f64>,
    /// `(ε, min over samples t ≥ ε of the gap)`
    pub inf_after: Vec<(f64, f64)>,
    pub member: bool,
}

/// Discrete membership verdict: the infimum of the gap over samples with
/// `t ≥ ε` must be positive for every listed `ε`.
pub fn gap_report(times: &[f64], gaps: &[ScalarField], eps_list: &[f64]) -> GapReport {
    let min_per_time: Vec<f64> = gaps.iter().map(|g| g.min()).collect();
    let inf_after: Vec<(f64, f64)> = eps_list
        .iter()
        .map(|&e| {
            let m = times
                .iter()
                .zip(&min_per_time)
                .filter(|(t, _)| **t >= e)
                .map(|(_, g)| *g)
                .fold(f64::INFINITY, f64::min);
            (e, m)
        })
        .collect();
    let member = inf_after.iter().all(|(_, m)| *m > 0.0);
    GapReport { min_per_time, inf_after, member }
}

/// `I_ε = ∫_ε^T ∫_Ω (½|W|²/ρ̃ − ē)` from the spatial means of the defect.
pub fn i_eps(times: &[f64], defect_means: &[f64], eps: f64) -> f64 {
    integrate_from(times, defect_means, eps)
}

/// `c = sup sqrt(2ρ̃ ē⁺) + sup|∇Ψ|`, checked against `sup|v|`.
pub fn sup_bound(
    ansatz: &Ansatz,
    times: &[f64],
    vs: &[VectorField],
    ebars: &[ScalarField],
) -> Result<f64> {
    let mut kin: f64 = 0.0;
    let mut gp: f64 = 0.0;
    let mut sup_v: f64 = 0.0;
    for ((&t, v), e) in times.iter().zip(vs).zip(ebars) {
        let rho = ansatz.rho_tilde(t);
        kin = kin.max(rho.zip_map(e, |r, e| (2.0 * r * e.max(0.0)).sqrt()).max());
        gp = gp.max(ansatz.grad_psi(t).max_norm());
        sup_v = sup_v.max(v.max_norm());
    }
    let c = kin + gp;
    if sup_v > c + 1e-8 {
        return Err(Error::BoundViolated { sup_v, c });
    }
    Ok(c)
}

/// `(div U)_i = Σ_j ∂_j U_ij`.
pub fn tensor_divergence(torus: &Torus, u: &TensorField) -> Result<VectorField> {
    let dim = u.dim();
    let comps = (0..dim)
        .map(|i| {
            let mut acc = ScalarField::zeros(dim, u.n());
            for j in 0..dim {
                acc = acc.add(&torus.derivative(u.entry(i, j), j)?);
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    VectorField::from_components(comps)
}

/// `L²((0,T)×Ω)` norms of `∂_t v + div U` and `div v`, with `∂_t v` supplied.
pub fn linear_system_residual_with(
    torus: &Torus,
    times: &[f64],
    vs: &[VectorField],
    v_dt: &[VectorField],
    us: &[TensorField],
) -> Result<(f64, f64)> {
    let mut r1 = Vec::with_capacity(times.len());
    let mut r2 = Vec::with_capacity(times.len());
    for ((v, vt), u) in vs.iter().zip(v_dt).zip(us) {
        let m = vt.add(&tensor_divergence(torus, u)?);
        r1.push(m.inner(&m));
        let d = torus.divergence(v)?;
        r2.push(d.inner(&d));
    }
    let q = |x: &[f64]| integrate_from(times, x, times[0]).max(0.0).sqrt();
    Ok((q(&r1), q(&r2)))
}

/// As [`linear_system_residual_with`] with `∂_t v` from 7-point differences.
pub fn linear_system_residual(
    torus: &Torus,
    times: &[f64],
    vs: &[VectorField],
    us: &[TensorField],
) -> Result<(f64, f64)> {
    let dim = torus.dim();
    let v_dt: Vec<VectorField> = (0..times.len())
        .map(|j| {
            let (s, w) = derivative_stencil(times, j, 7);
            let mut d = VectorField::zeros(dim, torus.n());
            for (i, wi) in w.iter().enumerate() {
                d.axpy(*wi, &vs[s + i]);
            }
            d
        })
        .collect();
    linear_system_residual_with(torus, times, vs, &v_dt, us)
}

/// Constant `χ₀ = (1+margin) sup[(d/2)λ_max(W₀⊗W₀/ρ̃) + cρ̃θ̄ + c|∂_tΨ|]` with
/// `W₀ = v₀ + ∇Ψ`, the supremum taken over `Ω` and a dense time sampling.
pub fn choose_chi_wild(ansatz: &Ansatz, theta_hi: f64, margin: f64) -> f64 {
    let dim = ansatz.dim();
    let c = heat_capacity(dim);
    let m = ansatz.grid().n_time.max(1001);
    let t_final = ansatz.grid().t_final;
    let mut sup: f64 = 0.0;
    for i in 0..m {
        let t = t_final * i as f64 / (m - 1) as f64;
        let w = momentum(ansatz, t, ansatz.v0()).norm_sq();
        let rho = ansatz.rho_tilde(t);
        let dpsi = ansatz.dt_psi(t);
        for p in 0..rho.len() {
            // λ_max(W⊗W/ρ) = |W|²/ρ
            let val = constraint_prefactor(dim) * w.data()[p] / rho.data()[p]
                + c * rho.data()[p] * theta_hi
                + c * dpsi.data()[p].abs();
            sup = sup.max(val);
        }
    }
    (1.0 + margin) * sup
}

/// Weak-topology metric `d(v, w) = max_t Σ_j 2^{−j} |⟨v(t) − w(t), φ_j⟩|` over
/// a fixed family of `L²`-normalized trigonometric vector fields ordered by
/// `|k|`.
#[derive(Clone, Debug)]
pub struct WeakMetric {
    modes: Vec<VectorField>,
}

impl WeakMetric {
    pub fn new(dim: usize, n: usize, count: usize) -> Self {
        use std::f64::consts::{SQRT_2, TAU};
        let kmax = 3i64;
        let mut ks: Vec<[i64; 3]> = Vec::new();
        let r3 = if dim == 3 { kmax } else { 0 };
        for a in -kmax..=kmax {
            for b in -kmax..=kmax {
                for c in -r3..=r3 {
                    let k = [a, b, c];
                    // one representative per ±k pair
                    let first = k.iter().find(|x| **x != 0);
                    if first.is_none_or(|x| *x > 0) {
                        ks.push(k);
                    }
                }
            }
        }
        ks.sort_by_key(|k| (k[0] * k[0] + k[1] * k[1] + k[2] * k[2], *k));
        let mut modes = Vec::new();
        'outer: for k in ks {
            let zero = k.iter().all(|x| *x == 0);
            let kinds: &[bool] = if zero { &[true] } else { &[true, false] };
            for &is_cos in kinds {
                for a in 0..dim {
                    if modes.len() == count {
                        break 'outer;
                    }
                    let amp = if zero { 1.0 } else { SQRT_2 };
                    modes.push(VectorField::from_fn(dim, n, |x| {
                        let arg = TAU * (k[0] as f64 * x[0] + k[1] as f64 * x[1] + k[2] as f64 * x[2]);
                        let s = amp * if is_cos { arg.cos() } else { arg.sin() };
                        let mut out = [0.0; 3];
                        out[a] = s;
                        out
                    }));
                }
            }
        }
        WeakMetric { modes }
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// `Σ_j 2^{−j}|⟨f, φ_j⟩|` for a single field.
    pub fn seminorm(&self, f: &VectorField) -> f64 {
        self.modes
            .iter()
            .enumerate()
            .map(|(j, m)| 0.5f64.powi(j as i32 + 1) * f.inner(m).abs())
            .sum()
    }

    /// Distance between two sampled paths on the same time grid.
    pub fn distance(&self, a: &[VectorField], b: &[VectorField]) -> f64 {
        a.iter().zip(b).map(|(x, y)| self.seminorm(&x.sub(y))).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag(dim: usize, d: [f64; 3]) -> SymMat {
        let mut m = SymMat::zeros(dim);
        for i in 0..dim {
            m.a[i][i] = d[i];
        }
        m
    }

    fn random_sym<R: Rng>(rng: &mut R, dim: usize, trace_free: bool) -> SymMat {
        let mut m = SymMat::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                let x = rng.gen_range(-1.0..1.0);
                m.a[i][j] = x;
                m.a[j][i] = x;
            }
        }
        if trace_free {
            let t = m.trace() / dim as f64;
            for i in 0..dim {
                m.a[i][i] -= t;
            }
        }
        m
    }

    /// Shifted power iteration with a Rayleigh-quotient readout.
    fn power_oracle(m: &SymMat) -> f64 {
        let dim = m.dim;
        let shift = m.frobenius() + 1.0;
        let mut x = [1.0, 0.7, 0.3];
        let mut lam = 0.0;
        for _ in 0..20000 {
            let mut y = [0.0; 3];
            for i in 0..dim {
                for j in 0..dim {
                    y[i] += m.a[i][j] * x[j];
                }
                y[i] += shift * x[i];
            }
            let nrm = y[..dim].iter().map(|v| v * v).sum::<f64>().sqrt();
            for i in 0..dim {
                x[i] = y[i] / nrm;
            }
            let mut q = 0.0;
            for i in 0..dim {
                for j in 0..dim {
                    q += x[i] * m.a[i][j] * x[j];
                }
            }
            lam = q;
        }
        lam
    }

    #[test]
    fn lambda_max_examples() {
        assert_eq!(lambda_max(&diag(3, [2.0, -1.0, -1.0])).unwrap(), 2.0);
        assert_eq!(lambda_max(&SymMat::zeros(3)).unwrap(), 0.0);
        let e = equality_tensor(3, &[1.0, 0.0, 0.0], 1.0);
        assert!((lambda_max(&e).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(lambda_max(&diag(2, [1.0, 0.0, 0.0])), Err(Error::NotTraceFree(_))));
    }

    #[test]
    fn lambda_max_matches_power_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for dim in [2, 3] {
            for _ in 0..200 {
                let m = random_sym(&mut rng, dim, true);
                let exact = power_oracle(&m);
                assert!((lambda_max(&m).unwrap() - exact).abs() <= 1e-10, "{m:?}");
            }
        }
    }

    #[test]
    fn kinetic_examples() {
        let w = [0.3, -1.2, 0.5];
        for dim in [2, 3] {
            let rho = 1.7;
            let k = kinetic_inequality_check(&w, &equality_tensor(dim, &w, rho), rho);
            assert!((k.lhs - k.rhs).abs() < 1e-14 && k.equality);
        }
        let k = kinetic_inequality_check(&[1.0, 0.0, 0.0], &SymMat::zeros(3), 1.0);
        assert_eq!((k.lhs, k.rhs), (0.5, 1.5));
        assert!(!k.equality && k.holds());
        let k2 = kinetic_inequality_check(&[1.0, 0.0, 0.0], &SymMat::zeros(2), 1.0);
        assert_eq!((k2.lhs, k2.rhs), (0.5, 1.0));
    }

    proptest! {
        #[test]
        fn kinetic_inequality_never_fails(seed in 0u64..10_000, dim in 2usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let u = random_sym(&mut rng, dim, true).scale(rng.gen_range(0.0..5.0));
            let rho = rng.gen_range(0.1..4.0);
            let k = kinetic_inequality_check(&w, &u, rho);
            prop_assert!(k.holds());
            prop_assert!(!k.equality || (k.lhs - k.rhs).abs() < 1e-9);
        }

        #[test]
        fn lambda_max_homogeneous_and_lipschitz(seed in 0u64..10_000, dim in 2usize..4, s in 0.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_sym(&mut rng, dim, true);
            let b = random_sym(&mut rng, dim, true);
            let la = lambda_max(&a).unwrap();
            prop_assert!((lambda_max(&a.scale(s)).unwrap() - s * la).abs() <= 1e-12 * (1.0 + s));
            // the operator norm is bounded by the Frobenius norm
            let diff = (la - lambda_max(&b).unwrap()).abs();
            prop_assert!(diff <= a.sub(&b).frobenius() + 1e-12);
        }
    }
}
