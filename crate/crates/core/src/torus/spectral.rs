use std::f64::consts::TAU;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{multi_index, ScalarField, VectorField};
use crate::error::{Error, Result};

/// Mean tolerance for the Poisson solve.
pub const POISSON_MEAN_TOL: f64 = 1e-10;

/// Spectral calculus on `T^dim` with `n` points per axis.
///
/// First derivatives use the symbol `i 2πk` with the Nyquist mode zeroed, so
/// that divergence, gradient and the Helmholtz projector commute exactly. The
/// Laplacian uses the full symbol `-(2π|k|)²`.
#[derive(Clone)]
pub struct Torus {
    dim: usize,
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    kd: Vec<[f64; 3]>,
    k2: Vec<f64>,
    kint: Vec<[i64; 3]>,
}

impl std::fmt::Debug for Torus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Torus").field("dim", &self.dim).field("n", &self.n).finish()
    }
}

impl Torus {
    pub fn new(dim: usize, n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let len = n.pow(dim as u32);
        let mut kd = Vec::with_capacity(len);
        let mut k2 = Vec::with_capacity(len);
        let mut kint = Vec::with_capacity(len);
        for p in 0..len {
            let idx = multi_index(dim, n, p);
            let mut d = [0.0; 3];
            let mut ki = [0i64; 3];
            let mut s = 0.0;
            for a in 0..dim {
                let i = idx[a] as i64;
                let k = if 2 * i < n as i64 { i } else { i - n as i64 };
                ki[a] = k;
                s += (TAU * k as f64).powi(2);
                d[a] = if 2 * i == n as i64 { 0.0 } else { TAU * k as f64 };
            }
            kd.push(d);
            k2.push(s);
            kint.push(ki);
        }
        Torus { dim, n, fwd, inv, kd, k2, kint }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_points(&self) -> usize {
        self.kd.len()
    }

    /// Derivative wavevector `2πk` (Nyquist zeroed) of spectral index `p`.
    pub fn wavevector(&self, p: usize) -> [f64; 3] {
        self.kd[p]
    }

    /// Integer wavenumbers of spectral index `p` (Nyquist reported as `-n/2`).
    pub fn wavenumber(&self, p: usize) -> [i64; 3] {
        self.kint[p]
    }

    /// `(2π|k|)²` with the full symbol.
    pub fn k2_full(&self, p: usize) -> f64 {
        self.k2[p]
    }

    /// Largest `(2π|k|)²` on the grid.
    pub fn k2_max(&self) -> f64 {
        self.dim as f64 * (std::f64::consts::PI * self.n as f64).powi(2)
    }

    fn check(&self, f: &ScalarField) -> Result<()> {
        if f.dim() != self.dim || f.n() != self.n {
            return Err(Error::GridMismatch(format!(
                "field {}^{} on torus {}^{}",
                f.n(),
                f.dim(),
                self.n,
                self.dim
            )));
        }
        Ok(())
    }

    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        let plan = if inverse { &self.inv } else { &self.fwd };
        let n = self.n;
        let len = buf.len();
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        // contiguous last axis in one batched call
        plan.process_with_scratch(buf, &mut scratch);
        let mut line = vec![Complex64::default(); n];
        for axis in 0..self.dim - 1 {
            let stride = n.pow((self.dim - 1 - axis) as u32);
            let block = stride * n;
            for base in (0..len).step_by(block) {
                for off in 0..stride {
                    let start = base + off;
                    for (i, l) in line.iter_mut().enumerate() {
                        *l = buf[start + i * stride];
                    }
                    plan.process_with_scratch(&mut line, &mut scratch);
                    for (i, l) in line.iter().enumerate() {
                        buf[start + i * stride] = *l;
                    }
                }
            }
        }
    }

    /// Unnormalized forward transform.
    pub fn forward(&self, f: &ScalarField) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = f.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut buf, false);
        buf
    }

    /// Inverse transform (normalized) keeping the real part.
    pub fn inverse(&self, mut spec: Vec<Complex64>) -> ScalarField {
        self.transform(&mut spec, true);
        let scale = 1.0 / spec.len() as f64;
        let data = spec.iter().map(|c| c.re * scale).collect();
        ScalarField::from_vec(self.dim, self.n, data).expect("spectrum length matches grid")
    }

    /// Applies the Fourier multiplier `symbol(p)` to `f`.
    pub fn apply_symbol(
        &self,
        f: &ScalarField,
        symbol: impl Fn(usize) -> Complex64,
    ) -> Result<ScalarField> {
        self.check(f)?;
        let mut spec = self.forward(f);
        for (p, c) in spec.iter_mut().enumerate() {
            *c *= symbol(p);
        }
        Ok(self.inverse(spec))
    }

    /// `∂f/∂x_axis`, exact for band-limited `f`.
    pub fn derivative(&self, f: &ScalarField, axis: usize) -> Result<ScalarField> {
        if axis >= self.dim {
            return Err(Error::AxisOutOfRange { axis, dim: self.dim });
        }
        self.apply_symbol(f, |p| Complex64::new(0.0, self.kd[p][axis]))
    }

    pub fn gradient(&self, f: &ScalarField) -> Result<VectorField> {
        self.check(f)?;
        let spec = self.forward(f);
        let comps = (0..self.dim)
            .map(|a| {
                let s = spec
                    .iter()
                    .enumerate()
                    .map(|(p, c)| c * Complex64::new(0.0, self.kd[p][a]))
                    .collect();
                self.inverse(s)
            })
            .collect();
        VectorField::from_components(comps)
    }

    pub fn divergence(&self, v: &VectorField) -> Result<ScalarField> {
        let mut acc = vec![Complex64::default(); self.n_points()];
        for a in 0..self.dim {
            self.check(v.comp(a))?;
            let spec = self.forward(v.comp(a));
            for (p, (o, c)) in acc.iter_mut().zip(spec).enumerate() {
                *o += c * Complex64::new(0.0, self.kd[p][a]);
            }
        }
        Ok(self.inverse(acc))
    }

    pub fn laplacian(&self, f: &ScalarField) -> Result<ScalarField> {
        self.apply_symbol(f, |p| Complex64::new(-self.k2[p], 0.0))
    }

    /// Zero-mean `Ψ` with `ΔΨ = f`.
    pub fn poisson_solve(&self, f: &ScalarField) -> Result<ScalarField> {
        self.check(f)?;
        let mean = f.mean();
        if mean.abs() > POISSON_MEAN_TOL {
            return Err(Error::NonZeroMean(mean));
        }
        let mut spec = self.forward(f);
        for (p, c) in spec.iter_mut().enumerate() {
            *c = if self.k2[p] == 0.0 { Complex64::default() } else { *c / -self.k2[p] };
        }
        Ok(self.inverse(spec))
    }

    /// Splits `w` into a divergence-free part (carrying the mean of `w`) and the
    /// gradient of a zero-mean potential.
    pub fn helmholtz_decompose(&self, w: &VectorField) -> Result<(VectorField, VectorField)> {
        let specs: Vec<Vec<Complex64>> = (0..self.dim)
            .map(|a| {
                self.check(w.comp(a))?;
                Ok(self.forward(w.comp(a)))
            })
            .collect::<Result<_>>()?;
        let len = self.n_points();
        let mut grad: Vec<Vec<Complex64>> = vec![vec![Complex64::default(); len]; self.dim];
        for p in 0..len {
            let k = self.kd[p];
            let kk: f64 = (0..self.dim).map(|a| k[a] * k[a]).sum();
            if kk == 0.0 {
                continue;
            }
            let kw: Complex64 = (0..self.dim).map(|a| specs[a][p] * k[a]).sum();
            for a in 0..self.dim {
                grad[a][p] = kw * (k[a] / kk);
            }
        }
        let mut sol = Vec::with_capacity(self.dim);
        let mut gra = Vec::with_capacity(self.dim);
        for (a, g) in grad.into_iter().enumerate() {
            let s: Vec<Complex64> = specs[a].iter().zip(&g).map(|(x, y)| x - y).collect();
            sol.push(self.inverse(s));
            gra.push(self.inverse(g));
        }
        Ok((VectorField::from_components(sol)?, VectorField::from_components(gra)?))
    }

    /// Zeroes every mode with `|k_a| > n/3` on some axis (2/3 rule).
    pub fn dealias(&self, f: &ScalarField) -> Result<ScalarField> {
        let cut = self.n as i64 / 3;
        self.apply_symbol(f, |p| {
            let k = self.kint[p];
            if (0..self.dim).any(|a| k[a].abs() > cut) {
                Complex64::default()
            } else {
                Complex64::new(1.0, 0.0)
            }
        })
    }

    /// Fraction of the (non-mean) spectral energy carried by modes outside the
    /// 2/3-rule band. Used as an a-posteriori smoothness monitor.
    pub fn tail_fraction(&self, f: &ScalarField) -> f64 {
        let spec = self.forward(f);
        let cut = self.n as i64 / 3;
        let mut total = 0.0;
        let mut tail = 0.0;
        for (p, c) in spec.iter().enumerate() {
            let k = self.kint[p];
            if (0..self.dim).all(|a| k[a] == 0) {
                continue;
            }
            let e = c.norm_sqr();
            total += e;
            if (0..self.dim).any(|a| k[a].abs() > cut) {
                tail += e;
            }
        }
        if total == 0.0 {
            0.0
        } else {
            tail / total
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::random_band_limited;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn derivative_of_sine_is_exact() {
        for dim in [2, 3] {
            let t = Torus::new(dim, 16);
            let f = ScalarField::from_fn(dim, 16, |x| (TAU * x[0]).sin());
            let df = t.derivative(&f, 0).unwrap();
            let exact = ScalarField::from_fn(dim, 16, |x| TAU * (TAU * x[0]).cos());
            assert!(df.sub(&exact).max_abs() <= 1e-10);
            let c = ScalarField::constant(dim, 16, 3.0);
            assert!(t.derivative(&c, 1).unwrap().max_abs() <= 1e-12);
        }
    }

    #[test]
    fn derivative_rejects_bad_axis() {
        let t = Torus::new(2, 8);
        let f = ScalarField::zeros(2, 8);
        assert!(matches!(t.derivative(&f, 2), Err(Error::AxisOutOfRange { .. })));
    }

    #[test]
    fn derivative_matches_fourth_order_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f0 = random_band_limited(&mut rng, 2, 8, 2, false);
        // resample the same trigonometric polynomial on finer grids
        let spec = Torus::new(2, 8).forward(&f0);
        let eval = |n: usize| {
            ScalarField::from_fn(2, n, |x| {
                let t8 = Torus::new(2, 8);
                let mut s = 0.0;
                for (p, c) in spec.iter().enumerate() {
                    let k = t8.wavenumber(p);
                    let arg = TAU * (k[0] as f64 * x[0] + k[1] as f64 * x[1]);
                    s += c.re * arg.cos() - c.im * arg.sin();
                }
                s / 64.0
            })
        };
        let mut errs = Vec::new();
        for n in [32usize, 64] {
            let f = eval(n);
            let t = Torus::new(2, n);
            let d = t.derivative(&f, 1).unwrap();
            let h = 1.0 / n as f64;
            let mut err: f64 = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let g = |jj: isize| f.data()[i * n + ((j as isize + jj).rem_euclid(n as isize)) as usize];
                    let fd = (-g(2) + 8.0 * g(1) - 8.0 * g(-1) + g(-2)) / (12.0 * h);
                    err = err.max((fd - d.data()[i * n + j]).abs());
                }
            }
            errs.push(err);
        }
        assert!(errs[0] / errs[1] > 12.0, "{errs:?}");
    }

    #[test]
    fn poisson_eigenfunction_and_zero() {
        let t = Torus::new(2, 16);
        let f = ScalarField::from_fn(2, 16, |x| {
            -TAU * TAU * 2.0 * (TAU * x[0]).sin() * (TAU * x[1]).sin()
        });
        let psi = t.poisson_solve(&f).unwrap();
        let exact = ScalarField::from_fn(2, 16, |x| (TAU * x[0]).sin() * (TAU * x[1]).sin());
        assert!(psi.sub(&exact).max_abs() <= 1e-12);
        let z = t.poisson_solve(&ScalarField::zeros(2, 16)).unwrap();
        assert_eq!(z.max_abs(), 0.0);
        assert!(matches!(
            t.poisson_solve(&ScalarField::constant(2, 16, 1.0)),
            Err(Error::NonZeroMean(_))
        ));
    }

    #[test]
    fn poisson_inverts_laplacian_on_random_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for dim in [2, 3] {
            let t = Torus::new(dim, 16);
            let f = random_band_limited(&mut rng, dim, 16, 4, true);
            let psi = t.poisson_solve(&f).unwrap();
            assert!(psi.mean().abs() < 1e-14);
            assert!(t.laplacian(&psi).unwrap().sub(&f).max_abs() <= 1e-9);
        }
    }

    #[test]
    fn helmholtz_trivial_cases() {
        let t = Torus::new(2, 16);
        let sol = VectorField::from_fn(2, 16, |x| {
            [(TAU * x[1]).sin() + 0.5, (TAU * x[0]).cos(), 0.0]
        });
        let (v, g) = t.helmholtz_decompose(&sol).unwrap();
        assert!(v.sub(&sol).max_norm() <= 1e-12 && g.max_norm() <= 1e-12);
        let phi = ScalarField::from_fn(2, 16, |x| (TAU * x[0]).sin() * (2.0 * TAU * x[1]).cos());
        let grad = t.gradient(&phi).unwrap();
        let (v, g) = t.helmholtz_decompose(&grad).unwrap();
        assert!(v.max_norm() <= 1e-12 && g.sub(&grad).max_norm() <= 1e-12);
    }

    #[test]
    fn helmholtz_random_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for dim in [2, 3] {
            let t = Torus::new(dim, 16);
            let comps = (0..dim).map(|_| random_band_limited(&mut rng, dim, 16, 8, false)).collect();
            let w = VectorField::from_components(comps).unwrap();
            let (v, g) = t.helmholtz_decompose(&w).unwrap();
            assert!(v.add(&g).sub(&w).max_norm() <= 1e-9);
            assert!(t.divergence(&v).unwrap().max_abs() <= 1e-10);
            assert!(v.inner(&g).abs() <= 1e-9);
            let (v2, g2) = t.helmholtz_decompose(&v).unwrap();
            assert!(v2.sub(&v).max_norm() <= 1e-12 && g2.max_norm() <= 1e-12);
            let wm = w.mean();
            let vm = v.mean();
            for a in 0..dim {
                assert!((wm[a] - vm[a]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn dealias_and_tail() {
        let t = Torus::new(2, 32);
        let low = ScalarField::from_fn(2, 32, |x| (TAU * 3.0 * x[0]).sin());
        assert!(t.dealias(&low).unwrap().sub(&low).max_abs() < 1e-13);
        assert!(t.tail_fraction(&low) < 1e-25);
        let high = ScalarField::from_fn(2, 32, |x| (TAU * 14.0 * x[1]).cos());
        assert!(t.dealias(&high).unwrap().max_abs() < 1e-13);
        assert!((t.tail_fraction(&high) - 1.0).abs() < 1e-12);
    }
}
