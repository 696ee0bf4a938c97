//! Binary field snapshots.
//!
//! Layout (little endian): magic `WGFIELD\0`, `u32` dim, n_space, n_time,
//! n_components, `f64` t_final, then `n_time × n_components × n_space^dim`
//! `f64` samples, time slowest, grid row-major.

use std::io::{Read, Write};
use std::path::Path;

use super::{ScalarField, VectorField};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"WGFIELD\0";

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub dim: usize,
    pub n_space: usize,
    pub n_time: usize,
    pub n_components: usize,
    pub t_final: f64,
    pub data: Vec<f64>,
}

impl Snapshot {
    pub fn from_scalars(series: &[ScalarField], t_final: f64) -> Result<Self> {
        let first = series.first().ok_or_else(|| Error::InvalidGrid("empty series".into()))?;
        let mut data = Vec::with_capacity(series.len() * first.len());
        for f in series {
            first.check_grid(f)?;
            data.extend_from_slice(f.data());
        }
        Ok(Snapshot {
            dim: first.dim(),
            n_space: first.n(),
            n_time: series.len(),
            n_components: 1,
            t_final,
            data,
        })
    }

    pub fn from_vectors(series: &[VectorField], t_final: f64) -> Result<Self> {
        let first = series.first().ok_or_else(|| Error::InvalidGrid("empty series".into()))?;
        let mut data = Vec::with_capacity(series.len() * first.len() * first.dim());
        for v in series {
            for c in v.comps() {
                first.comp(0).check_grid(c)?;
                data.extend_from_slice(c.data());
            }
        }
        Ok(Snapshot {
            dim: first.dim(),
            n_space: first.n(),
            n_time: series.len(),
            n_components: first.dim(),
            t_final,
            data,
        })
    }

    fn points(&self) -> usize {
        self.n_space.pow(self.dim as u32)
    }

    /// Component `c` at time sample `j`.
    pub fn field(&self, j: usize, c: usize) -> Result<ScalarField> {
        if j >= self.n_time || c >= self.n_components {
            return Err(Error::InvalidGrid(format!("sample ({j},{c}) out of range")));
        }
        let np = self.points();
        let start = (j * self.n_components + c) * np;
        ScalarField::from_vec(self.dim, self.n_space, self.data[start..start + np].to_vec())
    }

    pub fn vector(&self, j: usize) -> Result<VectorField> {
        let comps = (0..self.n_components).map(|c| self.field(j, c)).collect::<Result<_>>()?;
        VectorField::from_components(comps)
    }
}

pub fn write_snapshot(path: &Path, snap: &Snapshot) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + 8 * snap.data.len());
    buf.extend_from_slice(MAGIC);
    for v in [snap.dim, snap.n_space, snap.n_time, snap.n_components] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&snap.t_final.to_le_bytes());
    for x in &snap.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 32 || &bytes[..8] != MAGIC {
        return Err(Error::InvalidGrid("not a field snapshot".into()));
    }
    let u = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (dim, n_space, n_time, n_components) = (u(0), u(1), u(2), u(3));
    let t_final = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
    let count = n_time * n_components * n_space.pow(dim as u32);
    if bytes.len() != 32 + 8 * count {
        return Err(Error::InvalidGrid(format!(
            "snapshot payload has {} bytes, expected {}",
            bytes.len() - 32,
            8 * count
        )));
    }
    let data = bytes[32..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Snapshot { dim, n_space, n_time, n_components, t_final, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = VectorField::from_fn(2, 8, |x| [x[0], -x[1], 0.0]);
        let snap = Snapshot::from_vectors(&[v.clone(), v.scale(2.0)], 0.5).unwrap();
        let path = dir.path().join("v.bin");
        write_snapshot(&path, &snap).unwrap();
        let back = read_snapshot(&path).unwrap();
        assert_eq!(back, snap);
        assert_eq!(back.vector(1).unwrap(), v.scale(2.0));
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        std::fs::write(&path, b"nonsense").unwrap();
        assert!(read_snapshot(&path).is_err());
    }
}
