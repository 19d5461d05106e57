//! Named parameter storage and the checkpoint file format.
//!
//! Checkpoint layout: the magic `PNXCKPT1`, a little-endian `u64` manifest
//! length, the manifest as JSON (ordered names, shapes, trainable flags), then
//! every value as little-endian `f64` in manifest order.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::Real;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PNXCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Matrix<T>,
    /// Running statistics are stored but not optimized.
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub params: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
}

/// Matrix view of a parameter shape: trailing axis is the column count.
fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        None => (1, 1),
        Some((&cols, rest)) => (rest.iter().product(), cols),
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Register a parameter. Names are unique; re-registration is a bug.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], value: Matrix<T>, trainable: bool) -> ParamId {
        let name = name.into();
        let (r, c) = matrix_dims(shape);
        assert_eq!((value.rows(), value.cols()), (r, c), "value shape for {name}");
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            shape: shape.to_vec(),
            value,
            trainable,
        });
        id
    }

    pub fn add_filled(&mut self, name: impl Into<String>, shape: &[usize], fill: T, trainable: bool) -> ParamId {
        let (r, c) = matrix_dims(shape);
        let mut m = Matrix::zeros(r, c);
        m.as_mut_slice().iter_mut().for_each(|v| *v = fill);
        self.add(name, shape, m, trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Total scalar count of trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.as_slice().len())
            .sum()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            params: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Bitwise-comparable flat copy of every value.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|e| e.value.as_slice().iter().map(|v| v.to_f64()))
            .collect()
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let manifest = serde_json::to_vec(&self.manifest())?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        for e in &self.entries {
            for v in e.value.as_slice() {
                w.write_all(&v.to_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Overwrite every value from a checkpoint whose manifest must match exactly.
    pub fn load_checkpoint<R: Read>(&mut self, mut r: R) -> Result<()> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::ManifestMismatch("truncated header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::ManifestMismatch("bad magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)
            .map_err(|_| Error::ManifestMismatch("truncated header".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 64 << 20 {
            return Err(Error::ManifestMismatch(format!("manifest length {len}")));
        }
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)
            .map_err(|_| Error::ManifestMismatch("truncated manifest".into()))?;
        let found: Manifest = serde_json::from_slice(&buf)
            .map_err(|e| Error::ManifestMismatch(format!("unreadable manifest: {e}")))?;
        let expected = self.manifest();
        if found != expected {
            let detail = found
                .params
                .iter()
                .zip(&expected.params)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("`{}` {:?} vs expected `{}` {:?}", a.name, a.shape, b.name, b.shape))
                .unwrap_or_else(|| {
                    format!("{} entries vs expected {}", found.params.len(), expected.params.len())
                });
            return Err(Error::ManifestMismatch(detail));
        }
        let mut word = [0u8; 8];
        for e in &mut self.entries {
            for v in e.value.as_mut_slice() {
                r.read_exact(&mut word)
                    .map_err(|_| Error::ManifestMismatch("truncated values".into()))?;
                let x = f64::from_le_bytes(word);
                if !x.is_finite() {
                    return Err(Error::NonFinite(format!("checkpoint value of `{}`", e.name)));
                }
                *v = T::from_f64(x);
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::ManifestMismatch(format!("{} trailing bytes", rest.len())));
        }
        Ok(())
    }
}
