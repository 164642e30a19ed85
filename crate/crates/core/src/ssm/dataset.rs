//! Persisted train/test trajectory sets.
//!
//! Byte layout, all integers and floats little-endian:
//!
//! ```text
//! offset  size     field
//! 0       4        magic "FLDS"
//! 4       4        u32 format version (1)
//! 8       8        u64 header length L
//! 16      L        UTF-8 TOML header (seed, horizons, counts, dims, model spec)
//! ..      8·2(du+dy)  f64 standardization: u_mean, u_std, y_mean, y_std
//! ..      4·…      f32 arrays, row-major (N, T, d):
//!                  train states, train obs, test states, test obs
//! ```
//!
//! Values are rounded through `f32` at generation time, so a reloaded
//! dataset equals the in-memory one bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelSpec, Standardization, Trajectories};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FLDS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: ModelSpec,
    pub seed: u64,
    pub train: Trajectories,
    pub test: Trajectories,
    /// Fitted on the training split only.
    pub stats: Standardization,
}

#[derive(Serialize, Deserialize)]
struct Header {
    seed: u64,
    horizon: usize,
    /// Test path length when it differs from the training horizon.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    test_horizon: Option<usize>,
    n_train: usize,
    n_test: usize,
    state_dim: usize,
    obs_dim: usize,
    spec: ModelSpec,
}

/// Simulates `n_train` training paths of length `t` and `n_test` test paths
/// of length `t_test` (`t` when `None`; longer test paths evaluate
/// extrapolation). The two splits use separate streams of the seeded
/// generator.
pub fn make_dataset(
    spec: &ModelSpec,
    n_train: usize,
    n_test: usize,
    t: usize,
    t_test: Option<usize>,
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    let t_test = t_test.unwrap_or(t);
    if n_train == 0 || t == 0 || t_test == 0 {
        return Err(Error::Config("a dataset needs n_train >= 1 and horizons >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let mut train = spec.simulate(t, n_train, &mut rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut test = spec.simulate(t_test, n_test, &mut rng)?;
    train.quantize_f32();
    test.quantize_f32();
    let stats = Standardization::fit(&train)?;
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        train,
        test,
        stats,
    })
}

fn put_f32(buf: &mut Vec<u8>, a: &Array3<f64>) {
    buf.reserve(4 * a.len());
    for &x in a.iter() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("dataset truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn f64s(&mut self, n: usize) -> Result<Array1<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f32_array(&mut self, shape: (usize, usize, usize)) -> Result<Array3<f64>> {
        let raw = self.take(4 * shape.0 * shape.1 * shape.2)?;
        let v: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Array3::from_shape_vec(shape, v).expect("length checked"))
    }
}

impl Dataset {
    pub fn horizon(&self) -> usize {
        self.train.horizon()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            seed: self.seed,
            horizon: self.horizon(),
            test_horizon: Some(self.test.horizon()).filter(|&h| h != self.horizon()),
            n_train: self.train.count(),
            n_test: self.test.count(),
            state_dim: self.train.state_dim(),
            obs_dim: self.train.obs_dim(),
            spec: self.spec.clone(),
        };
        let text = toml::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
        buf.extend_from_slice(text.as_bytes());
        for a in [
            &self.stats.u_mean,
            &self.stats.u_std,
            &self.stats.y_mean,
            &self.stats.y_std,
        ] {
            for &x in a.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        for a in [&self.train.states, &self.train.obs, &self.test.states, &self.test.obs] {
            put_f32(&mut buf, a);
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let len = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
        let text = std::str::from_utf8(cur.take(len)?).map_err(|e| Error::Format(e.to_string()))?;
        let h: Header = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        let (du, dy, t) = (h.state_dim, h.obs_dim, h.horizon);
        let stats = Standardization {
            u_mean: cur.f64s(du)?,
            u_std: cur.f64s(du)?,
            y_mean: cur.f64s(dy)?,
            y_std: cur.f64s(dy)?,
        };
        let train = Trajectories::new(cur.f32_array((h.n_train, t, du))?, cur.f32_array((h.n_train, t, dy))?)?;
        let tt = h.test_horizon.unwrap_or(t);
        let test = Trajectories::new(cur.f32_array((h.n_test, tt, du))?, cur.f32_array((h.n_test, tt, dy))?)?;
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(Dataset {
            spec: h.spec,
            seed: h.seed,
            train,
            test,
            stats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
