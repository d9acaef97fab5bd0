//! Background feature datasets and their FDST file format.
//!
//! ```text
//! "FDST" | version=1 | layer_id | f | n_images | n_images x (len u32 + UTF-8 id)
//! n | n x (image_index u32, i u32, j u32) | n*f f32 values
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{checked_product, write_atomic, ByteReader, ByteWriter};

const MAGIC: &[u8; 4] = b"FDST";
const VERSION: u32 = 1;

/// Where a dataset vector came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub image_id: String,
    pub i: usize,
    pub j: usize,
}

impl Provenance {
    pub fn new(image_id: impl Into<String>, i: usize, j: usize) -> Self {
        Self { image_id: image_id.into(), i, j }
    }
}

/// A flat store of `f`-dimensional feature vectors for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    layer_id: u32,
    dim: usize,
    values: Vec<f32>,
    provenance: Vec<Provenance>,
}

impl FeatureDataset {
    pub fn empty(layer_id: u32, dim: usize) -> Self {
        Self { layer_id, dim, values: Vec::new(), provenance: Vec::new() }
    }

    /// Builds a dataset from in-memory vectors with synthetic provenance.
    pub fn from_vectors(layer_id: u32, dim: usize, vectors: &[Vec<f64>]) -> Result<Self> {
        let mut ds = Self::empty(layer_id, dim);
        for (k, v) in vectors.iter().enumerate() {
            let v32: Vec<f32> = v.iter().map(|&x| x as f32).collect();
            ds.push(&v32, Provenance::new("memory", k, 0))?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, vector: &[f32], provenance: Provenance) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::dims(format!("vector of length {} in a dim-{} dataset", vector.len(), self.dim)));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite value in dataset vector"));
        }
        self.values.extend_from_slice(vector);
        self.provenance.push(provenance);
        Ok(())
    }

    pub fn layer_id(&self) -> u32 {
        self.layer_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn vector(&self, k: usize) -> &[f32] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim.max(1))
    }

    /// Vectors widened to f64, the precision the estimators work in.
    pub fn to_f64_rows(&self) -> Vec<Vec<f64>> {
        self.vectors().map(|v| v.iter().map(|&x| f64::from(x)).collect()).collect()
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    /// Appends every vector of `other`, which must share layer and dimension.
    pub fn extend(&mut self, other: &FeatureDataset) -> Result<()> {
        if other.dim != self.dim || other.layer_id != self.layer_id {
            return Err(Error::dims("cannot merge datasets of different layers or dimensions"));
        }
        self.values.extend_from_slice(&other.values);
        self.provenance.extend(other.provenance.iter().cloned());
        Ok(())
    }

    /// Keeps the vectors at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.layer_id, self.dim);
        for &k in indices {
            out.values.extend_from_slice(self.vector(k));
            out.provenance.push(self.provenance[k].clone());
        }
        out
    }
}

pub fn write_dataset(ds: &FeatureDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut ids: Vec<&str> = Vec::new();
    let mut index: HashMap<&str, u32> = HashMap::new();
    for p in &ds.provenance {
        if !index.contains_key(p.image_id.as_str()) {
            index.insert(&p.image_id, ids.len() as u32);
            ids.push(&p.image_id);
        }
    }
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(ds.layer_id);
    w.len_u32(ds.dim, "dimension")?;
    w.len_u32(ids.len(), "image count")?;
    for id in &ids {
        w.string(id)?;
    }
    w.len_u32(ds.len(), "vector count")?;
    for p in &ds.provenance {
        w.u32(index[p.image_id.as_str()]);
        w.len_u32(p.i, "cell row")?;
        w.len_u32(p.j, "cell column")?;
    }
    for &v in &ds.values {
        w.f32(v);
    }
    write_atomic(path.as_ref(), &w.finish())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let bytes = fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported FDST version {version}")));
    }
    let layer_id = r.u32()?;
    let dim = r.usize()?;
    let n_ids = r.usize()?;
    let ids = (0..n_ids).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let n = r.usize()?;
    let mut provenance = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let idx = r.usize()?;
        let id = ids.get(idx).ok_or_else(|| Error::format(format!("image index {idx} out of range")))?;
        let i = r.usize()?;
        let j = r.usize()?;
        provenance.push(Provenance::new(id.clone(), i, j));
    }
    let values = r.f32_vec(checked_product(&[n, dim])?)?;
    r.expect_end()?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite value in dataset file"));
    }
    Ok(FeatureDataset { layer_id, dim, values, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip() {
        let mut ds = FeatureDataset::empty(4, 3);
        ds.push(&[1.0, 2.0, 3.0], Provenance::new("a", 0, 1)).unwrap();
        ds.push(&[4.0, 5.0, 6.0], Provenance::new("b", 2, 2)).unwrap();
        ds.push(&[7.0, 8.0, 9.0], Provenance::new("a", 1, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.fdst");
        write_dataset(&ds, &p).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), ds);
    }

    #[test]
    fn push_checks_length() {
        let mut ds = FeatureDataset::empty(4, 3);
        assert!(ds.push(&[1.0], Provenance::new("a", 0, 0)).is_err());
    }
}
