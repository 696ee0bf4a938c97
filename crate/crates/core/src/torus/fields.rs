use crate::error::{Error, Result};

use super::coords;

/// Real samples of a scalar function on the periodic grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    dim: usize,
    n: usize,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(dim: usize, n: usize) -> Self {
        Self::constant(dim, n, 0.0)
    }

    pub fn constant(dim: usize, n: usize, value: f64) -> Self {
        ScalarField { dim, n, data: vec![value; n.pow(dim as u32)] }
    }

    pub fn from_vec(dim: usize, n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n.pow(dim as u32) {
            return Err(Error::GridMismatch(format!(
                "{} samples for a {}^{} grid",
                data.len(),
                n,
                dim
            )));
        }
        Ok(ScalarField { dim, n, data })
    }

    /// Samples `f(x)` at every grid point; unused coordinates are zero.
    pub fn from_fn(dim: usize, n: usize, f: impl Fn(&[f64; 3]) -> f64) -> Self {
        let len = n.pow(dim as u32);
        let mut x = [0.0; 3];
        let data = (0..len)
            .map(|p| {
                coords(dim, n, p, &mut x);
                f(&x)
            })
            .collect();
        ScalarField { dim, n, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_grid(&self, other: &ScalarField) -> bool {
        self.dim == other.dim && self.n == other.n
    }

    pub fn check_grid(&self, other: &ScalarField) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{}^{} vs {}^{}",
                self.n, self.dim, other.n, other.dim
            )))
        }
    }

    /// Spatial mean, equal to the integral over `Ω`.
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// L² norm over `Ω`.
    pub fn l2(&self) -> f64 {
        self.inner(self).sqrt()
    }

    /// L² inner product over `Ω`.
    pub fn inner(&self, other: &ScalarField) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField { dim: self.dim, n: self.n, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> ScalarField {
        debug_assert!(self.same_grid(other));
        ScalarField {
            dim: self.dim,
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add(&self, other: &ScalarField) -> ScalarField {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ScalarField) -> ScalarField {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &ScalarField) -> ScalarField {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> ScalarField {
        self.map(|v| v * s)
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &ScalarField) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }
}

/// A `dim`-component vector field.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    comps: Vec<ScalarField>,
}

impl VectorField {
    pub fn zeros(dim: usize, n: usize) -> Self {
        VectorField { comps: vec![ScalarField::zeros(dim, n); dim] }
    }

    pub fn from_components(comps: Vec<ScalarField>) -> Result<Self> {
        let first = comps.first().ok_or_else(|| Error::GridMismatch("no components".into()))?;
        if comps.len() != first.dim() {
            return Err(Error::GridMismatch(format!(
                "{} components in dimension {}",
                comps.len(),
                first.dim()
            )));
        }
        for c in &comps {
            first.check_grid(c)?;
        }
        Ok(VectorField { comps })
    }

    pub fn from_fn(dim: usize, n: usize, f: impl Fn(&[f64; 3]) -> [f64; 3]) -> Self {
        let comps = (0..dim).map(|a| ScalarField::from_fn(dim, n, |x| f(x)[a])).collect();
        VectorField { comps }
    }

    pub fn dim(&self) -> usize {
        self.comps.len()
    }

    pub fn n(&self) -> usize {
        self.comps[0].n()
    }

    pub fn len(&self) -> usize {
        self.comps[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.comps[0].is_empty()
    }

    pub fn comp(&self, a: usize) -> &ScalarField {
        &self.comps[a]
    }

    pub fn comp_mut(&mut self, a: usize) -> &mut ScalarField {
        &mut self.comps[a]
    }

    pub fn comps(&self) -> &[ScalarField] {
        &self.comps
    }

    pub fn at(&self, p: usize) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (a, c) in self.comps.iter().enumerate() {
            out[a] = c.data()[p];
        }
        out
    }

    pub fn add(&self, other: &VectorField) -> VectorField {
        VectorField { comps: self.comps.iter().zip(&other.comps).map(|(a, b)| a.add(b)).collect() }
    }

    pub fn sub(&self, other: &VectorField) -> VectorField {
        VectorField { comps: self.comps.iter().zip(&other.comps).map(|(a, b)| a.sub(b)).collect() }
    }

    pub fn scale(&self, s: f64) -> VectorField {
        VectorField { comps: self.comps.iter().map(|a| a.scale(s)).collect() }
    }

    /// Multiplies every component pointwise by a scalar field.
    pub fn mul_scalar(&self, f: &ScalarField) -> VectorField {
        VectorField { comps: self.comps.iter().map(|a| a.mul(f)).collect() }
    }

    pub fn axpy(&mut self, s: f64, other: &VectorField) {
        for (a, b) in self.comps.iter_mut().zip(&other.comps) {
            a.axpy(s, b);
        }
    }

    /// Pointwise `|v|²`.
    pub fn norm_sq(&self) -> ScalarField {
        let mut out = ScalarField::zeros(self.dim(), self.n());
        for c in &self.comps {
            for (o, v) in out.data_mut().iter_mut().zip(c.data()) {
                *o += v * v;
            }
        }
        out
    }

    /// Pointwise `v·w`.
    pub fn dot(&self, other: &VectorField) -> ScalarField {
        let mut out = ScalarField::zeros(self.dim(), self.n());
        for (c, d) in self.comps.iter().zip(&other.comps) {
            for ((o, a), b) in out.data_mut().iter_mut().zip(c.data()).zip(d.data()) {
                *o += a * b;
            }
        }
        out
    }

    /// L² inner product over `Ω`.
    pub fn inner(&self, other: &VectorField) -> f64 {
        self.comps.iter().zip(&other.comps).map(|(a, b)| a.inner(b)).sum()
    }

    pub fn max_norm(&self) -> f64 {
        self.norm_sq().max().sqrt()
    }

    pub fn mean(&self) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (a, c) in self.comps.iter().enumerate() {
            out[a] = c.mean();
        }
        out
    }
}

/// Symmetric `d×d` matrix stored densely in a 3×3 block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SymMat {
    pub dim: usize,
    pub a: [[f64; 3]; 3],
}

impl SymMat {
    pub fn zeros(dim: usize) -> Self {
        SymMat { dim, a: [[0.0; 3]; 3] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.a[i][i] = 1.0;
        }
        m
    }

    /// `w ⊗ w`.
    pub fn outer(dim: usize, w: &[f64; 3]) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                m.a[i][j] = w[i] * w[j];
            }
        }
        m
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.a[i][i]).sum()
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut m = *self;
        for row in m.a.iter_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        m
    }

    pub fn add(&self, o: &SymMat) -> Self {
        let mut m = *self;
        for i in 0..3 {
            for j in 0..3 {
                m.a[i][j] += o.a[i][j];
            }
        }
        m
    }

    pub fn sub(&self, o: &SymMat) -> Self {
        self.add(&o.scale(-1.0))
    }

    /// Frobenius norm, an upper bound for the operator norm.
    pub fn frobenius(&self) -> f64 {
        self.a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.a.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Symmetric tensor field stored as its upper triangle (`d(d+1)/2` components).
#[derive(Clone, Debug, PartialEq)]
pub struct TensorField {
    dim: usize,
    comps: Vec<ScalarField>,
}

impl TensorField {
    pub fn zeros(dim: usize, n: usize) -> Self {
        TensorField { dim, comps: vec![ScalarField::zeros(dim, n); dim * (dim + 1) / 2] }
    }

    /// Position of entry `(i, j)` in the upper-triangle storage.
    pub fn slot(dim: usize, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        i * dim - i * (i + 1) / 2 + j
    }

    pub fn from_fn(dim: usize, n: usize, f: impl Fn(&[f64; 3]) -> SymMat) -> Self {
        let mut t = Self::zeros(dim, n);
        let mut x = [0.0; 3];
        for p in 0..n.pow(dim as u32) {
            super::coords(dim, n, p, &mut x);
            t.set(p, &f(&x));
        }
        t
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.comps[0].n()
    }

    pub fn entry(&self, i: usize, j: usize) -> &ScalarField {
        &self.comps[Self::slot(self.dim, i, j)]
    }

    pub fn entry_mut(&mut self, i: usize, j: usize) -> &mut ScalarField {
        let s = Self::slot(self.dim, i, j);
        &mut self.comps[s]
    }

    pub fn comps(&self) -> &[ScalarField] {
        &self.comps
    }

    pub fn at(&self, p: usize) -> SymMat {
        let mut m = SymMat::zeros(self.dim);
        for i in 0..self.dim {
            for j in i..self.dim {
                let v = self.entry(i, j).data()[p];
                m.a[i][j] = v;
                m.a[j][i] = v;
            }
        }
        m
    }

    pub fn set(&mut self, p: usize, m: &SymMat) {
        for i in 0..self.dim {
            for j in i..self.dim {
                self.entry_mut(i, j).data_mut()[p] = m.a[i][j];
            }
        }
    }

    pub fn trace(&self) -> ScalarField {
        let mut out = self.entry(0, 0).clone();
        for i in 1..self.dim {
            out = out.add(self.entry(i, i));
        }
        out
    }

    /// True when `|tr U| <= tol` at every grid point.
    pub fn is_trace_free(&self, tol: f64) -> bool {
        self.trace().max_abs() <= tol
    }

    pub fn add(&self, other: &TensorField) -> TensorField {
        TensorField {
            dim: self.dim,
            comps: self.comps.iter().zip(&other.comps).map(|(a, b)| a.add(b)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> TensorField {
        TensorField { dim: self.dim, comps: self.comps.iter().map(|a| a.scale(s)).collect() }
    }

    pub fn axpy(&mut self, s: f64, other: &TensorField) {
        for (a, b) in self.comps.iter_mut().zip(&other.comps) {
            a.axpy(s, b);
        }
    }

    /// Pointwise maximum of the Frobenius norm.
    pub fn max_norm(&self) -> f64 {
        (0..self.comps[0].len()).map(|p| self.at(p).frobenius()).fold(0.0, f64::max)
    }
}
