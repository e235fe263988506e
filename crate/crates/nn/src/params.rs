use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::NnError;
use crate::tensor::Tensor;

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

fn next_uid() -> u64 {
    NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
///
/// Every store carries a process-unique id so a single graph can mix
/// parameters from several models (for example a decoder feeding a frozen
/// classifier) and still route gradients back to the right store.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
    lookup: HashMap<String, ParamId>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            uid: next_uid(),
            names: self.names.clone(),
            values: self.values.clone(),
            lookup: self.lookup.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl PartialEq for ParamStore {
    /// Stores compare equal when names and values match bit for bit.
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { uid: next_uid(), names: Vec::new(), values: Vec::new(), lookup: HashMap::new() }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.values.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    /// Uniform Glorot initialisation.
    pub fn add_glorot<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Ids whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.names.iter().enumerate().filter(move |(_, n)| n.starts_with(prefix)).map(|(i, _)| ParamId(i))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }

    /// FNV-1a over names, shapes and the raw bits of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, v) in self.names.iter().zip(&self.values) {
            feed(name.as_bytes());
            feed(&(v.rows() as u64).to_le_bytes());
            feed(&(v.cols() as u64).to_le_bytes());
            for x in v.data() {
                feed(&x.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Writes `params.json` (the named index) and `params.bin` (little-endian
    /// f64 blob) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), NnError> {
        std::fs::create_dir_all(dir)?;
        let mut index = Vec::with_capacity(self.values.len());
        let mut offset = 0usize;
        let mut blob = BufWriter::new(File::create(dir.join("params.bin"))?);
        for (name, v) in self.names.iter().zip(&self.values) {
            index.push(ParamEntry { name: name.clone(), rows: v.rows(), cols: v.cols(), offset });
            for x in v.data() {
                blob.write_all(&x.to_le_bytes())?;
            }
            offset += v.len();
        }
        blob.flush()?;
        let idx = ParamIndex { dtype: "f64-le".into(), params: index };
        std::fs::write(dir.join("params.json"), serde_json::to_string_pretty(&idx)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, NnError> {
        let idx: ParamIndex = serde_json::from_str(&std::fs::read_to_string(dir.join("params.json"))?)?;
        if idx.dtype != "f64-le" {
            return Err(NnError::Format(format!("unsupported parameter dtype {}", idx.dtype)));
        }
        let mut raw = Vec::new();
        BufReader::new(File::open(dir.join("params.bin"))?).read_to_end(&mut raw)?;
        let mut store = ParamStore::new();
        for e in idx.params {
            let n = e.rows * e.cols;
            let start = e.offset * 8;
            let end = start + n * 8;
            if end > raw.len() {
                return Err(NnError::Format(format!("parameter {} runs past end of blob", e.name)));
            }
            let data = raw[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            store.add(e.name, Tensor::from_vec(e.rows, e.cols, data));
        }
        Ok(store)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct ParamIndex {
    dtype: String,
    params: Vec<ParamEntry>,
}

/// Gradient buffers aligned with one [`ParamStore`]. Entries stay `None`
/// until a parameter receives signal.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(n: usize) -> Self {
        Gradients { grads: vec![None; n] }
    }

    pub fn for_store(store: &ParamStore) -> Self {
        Self::new(store.len())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.grads[id.0] {
            Some(t) => t.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub(crate) fn accumulate_owned(&mut self, id: ParamId, g: Tensor) {
        match &mut self.grads[id.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    pub fn merge(&mut self, other: Gradients) {
        debug_assert_eq!(self.grads.len(), other.grads.len());
        for (i, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate_owned(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }

    /// Zeroes every gradient whose id is not in `keep`.
    pub fn retain(&mut self, keep: &[ParamId]) {
        let mut mask = vec![false; self.grads.len()];
        for id in keep {
            mask[id.0] = true;
        }
        for (i, g) in self.grads.iter_mut().enumerate() {
            if !mask[i] {
                *g = None;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}
