//! Binary checkpoints: `TCKP`, a version byte, a JSON metadata block and a
//! list of named arrays. Parameters are stored at `f32` precision.

use std::path::Path;

use taste_core::params::ParamStore;
use taste_core::tensor::Matrix;
use taste_core::tokenizer::QuantizerState;

use crate::array::Array;
use crate::error::{AppError, AppResult};
use crate::fsutil::write_atomic;

const MAGIC: &[u8; 4] = b"TCKP";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Array)>,
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> AppResult<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len());
    let end = end.ok_or_else(|| AppError::Data("checkpoint is truncated".into()))?;
    let out = &bytes[*at..end];
    *at = end;
    Ok(out)
}

fn take_u32(bytes: &[u8], at: &mut usize) -> AppResult<usize> {
    let b = take(bytes, at, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, arrays: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, array: Array) {
        self.arrays.push((name.into(), array));
    }

    pub fn get(&self, name: &str) -> AppResult<&Array> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| AppError::Data(format!("checkpoint lacks `{name}`")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(CHECKPOINT_VERSION);
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&a.encode());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> AppResult<Self> {
        let mut at = 0;
        if take(bytes, &mut at, 4)? != MAGIC {
            return Err(AppError::Data("not a checkpoint file".into()));
        }
        let version = take(bytes, &mut at, 1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(AppError::Data(format!("checkpoint version {version} is not supported")));
        }
        let n = take_u32(bytes, &mut at)?;
        let meta = serde_json::from_slice(take(bytes, &mut at, n)?)
            .map_err(|e| AppError::Data(format!("checkpoint metadata: {e}")))?;
        let count = take_u32(bytes, &mut at)?;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = take_u32(bytes, &mut at)?;
            let name = String::from_utf8(take(bytes, &mut at, n)?.to_vec())
                .map_err(|_| AppError::Data("checkpoint array name is not UTF-8".into()))?;
            let (a, used) = Array::decode_prefix(&bytes[at..])?;
            at += used;
            arrays.push((name, a));
        }
        if at != bytes.len() {
            return Err(AppError::Data("trailing bytes after checkpoint".into()));
        }
        Ok(Self { meta, arrays })
    }

    pub fn write(&self, path: &Path) -> AppResult<()> {
        write_atomic(path, &self.encode())
    }

    pub fn read(path: &Path) -> AppResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| AppError::Data(format!("{}: {e}", path.display())))
    }

    /// Metadata field deserialized into `T`.
    pub fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> AppResult<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| AppError::Data(format!("checkpoint metadata lacks `{key}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| AppError::Data(format!("checkpoint metadata `{key}`: {e}")))
    }

    pub fn push_store(&mut self, store: &ParamStore) {
        for (_, name, m) in store.iter() {
            self.push(name, Array::from_matrix(m));
        }
    }

    /// Assigns every parameter of `store` from the array of the same name.
    pub fn push_store_prefix(&mut self, store: &ParamStore, prefix: &str) {
        for (_, name, m) in store.iter() {
            if name.starts_with(prefix) {
                self.push(name, Array::from_matrix(m));
            }
        }
    }

    /// Whole metadata object as one typed value.
    pub fn meta_all<T: serde::de::DeserializeOwned>(&self) -> AppResult<T> {
        serde_json::from_value(self.meta.clone()).map_err(|e| AppError::Data(format!("checkpoint metadata: {e}")))
    }

    pub fn load_store(&self, store: &mut ParamStore) -> AppResult<()> {
        self.load_prefix(store, "")
    }

    /// Assigns every parameter of `store` whose name starts with `prefix`.
    pub fn load_prefix(&self, store: &mut ParamStore, prefix: &str) -> AppResult<()> {
        let names: Vec<String> = store
            .iter()
            .map(|(_, n, _)| n.to_string())
            .filter(|n| n.starts_with(prefix))
            .collect();
        for name in names {
            let m = self.get(&name)?.to_matrix()?;
            store
                .assign(&name, m)
                .map_err(|e| AppError::Data(format!("checkpoint parameter `{name}`: {e}")))?;
        }
        Ok(())
    }

    pub fn push_quantizer(&mut self, q: &QuantizerState) {
        for (r, book) in q.codebooks.iter().enumerate() {
            self.push(format!("quantizer.codebook{r}"), Array::from_matrix(book));
            let usage: Vec<usize> = q.usage[r].iter().map(|&u| u as usize).collect();
            self.push(format!("quantizer.usage{r}"), Array::from_ints(&usage));
        }
    }

    /// Rebuilds a quantizer with `layers` codebooks.
    pub fn quantizer(&self, layers: usize, decay: f64, enabled: bool) -> AppResult<QuantizerState> {
        let books = (0..layers)
            .map(|r| self.get(&format!("quantizer.codebook{r}"))?.to_matrix())
            .collect::<AppResult<Vec<Matrix>>>()?;
        let mut q = QuantizerState::from_codebooks(books, decay)?;
        for r in 0..layers {
            let usage = self.get(&format!("quantizer.usage{r}"))?.to_ints()?;
            if usage.len() != q.usage[r].len() {
                return Err(AppError::Data(format!("quantizer usage {r} has {} entries", usage.len())));
            }
            q.usage[r] = usage.into_iter().map(|u| u as u64).collect();
        }
        q.enabled = enabled;
        Ok(q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_and_corruption() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        store.add_normal("a.weight", 3, 4, 1.0, &mut rng);
        store.add_normal("b.bias", 1, 4, 1.0, &mut rng);
        let mut ck = Checkpoint::new(serde_json::json!({"kind": "test", "n": 3}));
        ck.push_store(&store);
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta_field::<u32>("n").unwrap(), 3);
        let mut other = store.clone();
        for id in other.ids().collect::<Vec<_>>() {
            other.get_mut(id).scale_assign(0.0);
        }
        back.load_store(&mut other).unwrap();
        for ((_, _, a), (_, _, b)) in store.iter().zip(other.iter()) {
            assert!(a.max_abs_diff(b) < 1e-6);
        }
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::decode(&bad).unwrap_err().to_string().contains("version 9"));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
    }

    #[test]
    fn quantizer_round_trip() {
        let mut q = QuantizerState::new(2, 4, 3, 0.99).unwrap();
        q.enabled = true;
        q.usage[1][2] = 5;
        let mut ck = Checkpoint::new(serde_json::Value::Null);
        ck.push_quantizer(&q);
        let back = ck.quantizer(2, 0.99, true).unwrap();
        assert_eq!(back.usage, q.usage);
        for (a, b) in back.codebooks.iter().zip(&q.codebooks) {
            assert!(a.max_abs_diff(b) < 1e-6);
        }
    }
}
