//! Named parameter store and checkpoint serialization.
//!
//! Parameters are registered in a fixed order at model construction; the
//! checkpoint format is a version field followed by repeated
//! (name length, name, rank, dims, little-endian float32 payload) records.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct P(pub usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> P {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), self.values.len() - 1);
        P(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, p: P) -> &Tensor {
        &self.values[p.0]
    }

    pub fn get_mut(&mut self, p: P) -> &mut Tensor {
        &mut self.values[p.0]
    }

    pub fn name(&self, p: P) -> &str {
        &self.names[p.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.iter() {
            t.check_finite(name)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for (name, t) in self.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&2u32.to_le_bytes());
            buf.extend_from_slice(&(t.rows as u32).to_le_bytes());
            buf.extend_from_slice(&(t.cols as u32).to_le_bytes());
            for v in &t.data {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Load a checkpoint into an already-constructed store; names and shapes
    /// must match the registered parameters.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > bytes.len() {
                return Err(Error::Parse(format!(
                    "checkpoint truncated at byte {pos}"
                )));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        let read_u32 =
            |s: &[u8]| -> u32 { u32::from_le_bytes([s[0], s[1], s[2], s[3]]) };

        let version = read_u32(take(4)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = read_u32(take(4)?) as usize;
        if count != self.values.len() {
            return Err(Error::Parse(format!(
                "checkpoint has {count} tensors, model expects {}",
                self.values.len()
            )));
        }
        for _ in 0..count {
            let name_len = read_u32(take(4)?) as usize;
            let name = String::from_utf8(take(name_len)?.to_vec())
                .map_err(|_| Error::Parse("non-utf8 parameter name".into()))?;
            let rank = read_u32(take(4)?) as usize;
            if rank != 2 {
                return Err(Error::Parse(format!("unsupported rank {rank} for {name}")));
            }
            let rows = read_u32(take(4)?) as usize;
            let cols = read_u32(take(4)?) as usize;
            let idx = *self
                .index
                .get(&name)
                .ok_or_else(|| Error::Parse(format!("unknown parameter {name}")))?;
            let t = &mut self.values[idx];
            if t.rows != rows || t.cols != cols {
                return Err(Error::Shape(format!(
                    "{name}: checkpoint {rows}x{cols}, model {}x{}",
                    t.rows, t.cols
                )));
            }
            let payload = take(rows * cols * 4)?;
            for (i, chunk) in payload.chunks_exact(4).enumerate() {
                t.data[i] =
                    f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
            }
        }
        Ok(())
    }
}

/// Helper for registering parameters under a dotted prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder { store, rng }
    }

    /// Gaussian init scaled by 1/sqrt(fan_in).
    pub fn dense(&mut self, name: &str, rows: usize, cols: usize) -> P {
        let std = 1.0 / (rows as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let data = (0..rows * cols)
            .map(|_| normal.sample(self.rng))
            .collect();
        self.store.register(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn gaussian(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> P {
        let normal = Normal::new(0.0, std).unwrap();
        let data = (0..rows * cols)
            .map(|_| normal.sample(self.rng))
            .collect();
        self.store.register(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> P {
        self.store.register(name, Tensor::zeros(rows, cols))
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> P {
        self.store
            .register(name, Tensor::from_vec(rows, cols, vec![1.0; rows * cols]))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    /// Overwrite `dst` with the current values of `src` (shapes must match).
    pub fn copy_values(&mut self, src: P, dst: P) {
        let t = self.store.values()[src.0].clone();
        self.store.values_mut()[dst.0] = t;
    }
}

// keep Rng in scope for dense/gaussian via rand_distr
#[allow(unused)]
fn _rng_bound<R: Rng>(_r: R) {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");

        let mut rng = substream(1, "init");
        let mut store = ParamStore::new();
        {
            let mut b = ParamBuilder::new(&mut store, &mut rng);
            b.dense("a.w", 3, 4);
            b.zeros("a.b", 1, 4);
            b.ones("ln.g", 1, 4);
        }
        store.save(&path).unwrap();

        // fresh store with same layout, different values
        let mut rng2 = substream(2, "init");
        let mut store2 = ParamStore::new();
        {
            let mut b = ParamBuilder::new(&mut store2, &mut rng2);
            b.dense("a.w", 3, 4);
            b.zeros("a.b", 1, 4);
            b.ones("ln.g", 1, 4);
        }
        store2.load(&path).unwrap();
        for ((_, a), (_, b)) in store.iter().zip(store2.iter()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((*x as f32) == (*y as f32));
            }
        }
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut rng = substream(1, "init");
        let mut store = ParamStore::new();
        ParamBuilder::new(&mut store, &mut rng).dense("w", 2, 2);
        store.save(&path).unwrap();

        let mut rng2 = substream(1, "init");
        let mut other = ParamStore::new();
        ParamBuilder::new(&mut other, &mut rng2).dense("w", 3, 2);
        assert!(other.load(&path).is_err());
    }
}
