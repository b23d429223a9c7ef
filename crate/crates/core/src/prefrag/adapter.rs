//! Trainable linear projection shared by the query and answer towers.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic      b"PRAW"
//! version    u32 (= 1)
//! out_dim    u32
//! row_count  u64 (= out_dim)
//! in_dim     u32
//! weights    row_count * in_dim f32, row-major
//! seed       u64
//! step_size  f64
//! epochs     u32
//! batch_size u32
//! tau        f64
//! init_noise f64
//! fingerprint u32 length + UTF-8 bytes
//! ```

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vector::normalized_f32;
use super::PrefragError;

pub const ADAPTER_MAGIC: &[u8; 4] = b"PRAW";
pub const ADAPTER_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterHyper {
    pub step_size: f64,
    pub epochs: u32,
    pub batch_size: u32,
    pub tau: f64,
    pub init_noise: f64,
}

impl Default for AdapterHyper {
    fn default() -> Self {
        AdapterHyper {
            step_size: 0.05,
            epochs: 5,
            batch_size: 16,
            tau: 1.0,
            init_noise: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionAdapter {
    /// `out_dim x in_dim`.
    pub weights: Array2<f32>,
    pub seed: u64,
    pub hyper: AdapterHyper,
}

impl ProjectionAdapter {
    /// Rectangular identity plus N(0, `hyper.init_noise`^2) noise from a
    /// ChaCha8 stream seeded with `seed`.
    pub fn init(in_dim: usize, out_dim: usize, seed: u64, hyper: AdapterHyper) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, hyper.init_noise.max(0.0)).expect("valid normal");
        let weights = Array2::from_shape_fn((out_dim, in_dim), |(r, c)| {
            let base = if r == c { 1.0 } else { 0.0 };
            (base + noise.sample(&mut rng)) as f32
        });
        ProjectionAdapter {
            weights,
            seed,
            hyper,
        }
    }

    pub fn identity(dim: usize) -> Self {
        ProjectionAdapter {
            weights: Array2::eye(dim),
            seed: 0,
            hyper: AdapterHyper {
                init_noise: 0.0,
                ..AdapterHyper::default()
            },
        }
    }

    pub fn from_f64(weights: &Array2<f64>, seed: u64, hyper: AdapterHyper) -> Self {
        ProjectionAdapter {
            weights: weights.mapv(|x| x as f32),
            seed,
            hyper,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights_f64(&self) -> Array2<f64> {
        self.weights.mapv(f64::from)
    }

    pub fn project(&self, v: &[f32]) -> Result<Vec<f64>, PrefragError> {
        if v.len() != self.in_dim() {
            return Err(PrefragError::Dimension {
                expected: self.in_dim(),
                actual: v.len(),
            });
        }
        Ok(self
            .weights
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(v).map(|(&w, &x)| w as f64 * x as f64).sum())
            .collect())
    }

    /// Projected and L2-normalized; `None` if the projection vanishes.
    pub fn project_normalized(&self, v: &[f32]) -> Result<Option<Vec<f32>>, PrefragError> {
        Ok(normalized_f32(&self.project(v)?))
    }

    pub fn write_to<W: Write>(&self, mut w: W, fingerprint: &str) -> std::io::Result<()> {
        w.write_all(ADAPTER_MAGIC)?;
        w.write_u32::<LittleEndian>(ADAPTER_VERSION)?;
        w.write_u32::<LittleEndian>(self.out_dim() as u32)?;
        w.write_u64::<LittleEndian>(self.out_dim() as u64)?;
        w.write_u32::<LittleEndian>(self.in_dim() as u32)?;
        for &x in self.weights.iter() {
            w.write_f32::<LittleEndian>(x)?;
        }
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_f64::<LittleEndian>(self.hyper.step_size)?;
        w.write_u32::<LittleEndian>(self.hyper.epochs)?;
        w.write_u32::<LittleEndian>(self.hyper.batch_size)?;
        w.write_f64::<LittleEndian>(self.hyper.tau)?;
        w.write_f64::<LittleEndian>(self.hyper.init_noise)?;
        write_str(&mut w, fingerprint)?;
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<(Self, String), PrefragError> {
        let bad = |reason: &str| PrefragError::Format {
            kind: "adapter",
            reason: reason.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != ADAPTER_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != ADAPTER_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let out_dim = r.read_u32::<LittleEndian>()? as usize;
        let rows = r.read_u64::<LittleEndian>()? as usize;
        if rows != out_dim {
            return Err(bad("row count does not match output dimension"));
        }
        let in_dim = r.read_u32::<LittleEndian>()? as usize;
        let mut data = vec![0f32; out_dim * in_dim];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        if data.iter().any(|x| !x.is_finite()) {
            return Err(bad("non-finite weight"));
        }
        let weights = Array2::from_shape_vec((out_dim, in_dim), data).map_err(|e| bad(&e.to_string()))?;
        let seed = r.read_u64::<LittleEndian>()?;
        let hyper = AdapterHyper {
            step_size: r.read_f64::<LittleEndian>()?,
            epochs: r.read_u32::<LittleEndian>()?,
            batch_size: r.read_u32::<LittleEndian>()?,
            tau: r.read_f64::<LittleEndian>()?,
            init_noise: r.read_f64::<LittleEndian>()?,
        };
        let fingerprint = read_str(&mut r)?;
        Ok((
            ProjectionAdapter {
                weights,
                seed,
                hyper,
            },
            fingerprint,
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>, fingerprint: &str) -> std::io::Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf, fingerprint)?;
        std::fs::write(path, buf)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String), PrefragError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

pub(crate) fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

pub(crate) fn read_str<R: Read>(r: &mut R) -> Result<String, PrefragError> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| PrefragError::Format {
        kind: "string",
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn init_is_seeded() {
        let h = AdapterHyper::default();
        assert_eq!(ProjectionAdapter::init(6, 4, 7, h), ProjectionAdapter::init(6, 4, 7, h));
        assert_ne!(ProjectionAdapter::init(6, 4, 7, h), ProjectionAdapter::init(6, 4, 8, h));
    }

    #[test]
    fn init_near_identity() {
        let a = ProjectionAdapter::init(5, 5, 1, AdapterHyper::default());
        for ((r, c), &w) in a.weights.indexed_iter() {
            let target = if r == c { 1.0 } else { 0.0 };
            assert!((w - target).abs() < 0.01);
        }
    }

    #[test]
    fn project_dimension_checked() {
        let a = ProjectionAdapter::identity(3);
        assert!(matches!(a.project(&[1.0, 2.0]), Err(PrefragError::Dimension { .. })));
        assert_eq!(a.project(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn truncated_file_rejected() {
        let a = ProjectionAdapter::identity(3);
        let mut buf = Vec::new();
        a.write_to(&mut buf, "fp").unwrap();
        buf.truncate(buf.len() - 3);
        assert!(ProjectionAdapter::read_from(buf.as_slice()).is_err());
        assert!(ProjectionAdapter::read_from(&b"NOPE"[..]).is_err());
    }

    proptest! {
        #[test]
        fn serialization_is_bit_exact(
            out_dim in 1usize..6,
            in_dim in 1usize..6,
            seed in any::<u64>(),
            noise in 0.0f64..2.0,
        ) {
            let hyper = AdapterHyper { init_noise: noise, ..AdapterHyper::default() };
            let a = ProjectionAdapter::init(in_dim, out_dim, seed, hyper);
            let mut buf = Vec::new();
            a.write_to(&mut buf, "abc123").unwrap();
            let (b, fp) = ProjectionAdapter::read_from(buf.as_slice()).unwrap();
            prop_assert_eq!(fp, "abc123");
            prop_assert_eq!(b.seed, a.seed);
            prop_assert_eq!(b.hyper, a.hyper);
            let bits = |m: &Array2<f32>| m.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.weights), bits(&b.weights));
        }
    }
}
