//! Periodic grids on `Ω = [0,1)^d`, sampled fields and spectral calculus.
//!
//! Fields are plain sample arrays in row-major order (axis 0 slowest). All
//! spatial integrals are means over the grid since `|Ω| = 1`.

mod fields;
mod snapshot;
mod spectral;

pub use fields::{ScalarField, SymMat, TensorField, VectorField};
pub use snapshot::{read_snapshot, write_snapshot, Snapshot};
pub use spectral::Torus;

use crate::error::{Error, Result};

/// Space-time grid description: `n_space^dim` points on the torus and `n_time`
/// uniform samples on `[0, t_final]`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub n_space: usize,
    pub n_time: usize,
    pub t_final: f64,
}

impl GridSpec {
    pub fn new(dim: usize, n_space: usize, n_time: usize, t_final: f64) -> Result<Self> {
        let g = GridSpec { dim, n_space, n_time, t_final };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::InvalidGrid(format!(
                "dimension must be 2 or 3, got {}",
                self.dim
            )));
        }
        if self.n_space < 8 || !self.n_space.is_power_of_two() {
            return Err(Error::InvalidGrid(format!(
                "n_space must be a power of two >= 8, got {}",
                self.n_space
            )));
        }
        if self.n_time < 2 {
            return Err(Error::InvalidGrid(format!("n_time must be >= 2, got {}", self.n_time)));
        }
        if !(self.t_final > 0.0) || !self.t_final.is_finite() {
            return Err(Error::InvalidGrid(format!("t_final must be positive, got {}", self.t_final)));
        }
        Ok(())
    }

    pub fn n_points(&self) -> usize {
        self.n_space.pow(self.dim as u32)
    }

    pub fn dt(&self) -> f64 {
        self.t_final / (self.n_time - 1) as f64
    }

    /// Uniform sample times `t_j = j T / (n_time - 1)`; the last one is exactly `T`.
    pub fn times(&self) -> Vec<f64> {
        let dt = self.dt();
        (0..self.n_time)
            .map(|j| if j + 1 == self.n_time { self.t_final } else { j as f64 * dt })
            .collect()
    }

    pub fn torus(&self) -> Torus {
        Torus::new(self.dim, self.n_space)
    }
}

/// Coordinates in `[0,1)^dim` of the flat grid index `p`.
pub fn coords(dim: usize, n: usize, mut p: usize, out: &mut [f64; 3]) {
    for a in (0..dim).rev() {
        out[a] = (p % n) as f64 / n as f64;
        p /= n;
    }
}

/// Multi-index of the flat grid index `p`.
pub fn multi_index(dim: usize, n: usize, mut p: usize) -> [usize; 3] {
    let mut idx = [0usize; 3];
    for a in (0..dim).rev() {
        idx[a] = p % n;
        p /= n;
    }
    idx
}

/// Random real field whose Fourier support lies in `|k_a| <= kmax` for every axis,
/// with zero mean when `zero_mean` is set.
pub fn random_band_limited<R: rand::Rng>(
    rng: &mut R,
    dim: usize,
    n: usize,
    kmax: i32,
    zero_mean: bool,
) -> ScalarField {
    use std::f64::consts::TAU;
    let mut modes = Vec::new();
    let k3 = if dim == 3 { kmax } else { 0 };
    for k0 in -kmax..=kmax {
        for k1 in -kmax..=kmax {
            for k2 in -k3..=k3 {
                if zero_mean && k0 == 0 && k1 == 0 && k2 == 0 {
                    continue;
                }
                let amp: f64 = rng.gen_range(-1.0..1.0);
                let phase: f64 = rng.gen_range(0.0..TAU);
                modes.push(([k0 as f64, k1 as f64, k2 as f64], amp, phase));
            }
        }
    }
    let norm = 1.0 / (modes.len() as f64).sqrt();
    ScalarField::from_fn(dim, n, |x| {
        modes
            .iter()
            .map(|(k, a, ph)| {
                let arg = TAU * (k[0] * x[0] + k[1] * x[1] + k[2] * x[2]) + ph;
                a * arg.cos()
            })
            .sum::<f64>()
            * norm
    })
}
