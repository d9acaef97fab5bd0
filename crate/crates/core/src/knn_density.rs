//! k-nearest-neighbor kernel density with cosine distance.
//!
//! The score of a query `q` is `(1/k) * sum_i exp(-d_i)` over its `k`
//! smallest cosine distances `d_i = 1 - cos(q, x_i)` to the stored
//! background vectors. Search is exact and brute force; ties between equal
//! distances go to the vector inserted first.
//!
//! KNNX index files: `"KNNX" | version=1 | f | n` (u32 LE), then `n*f`
//! unit-normalized f32 values.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feature_store::{FeatureDataset, FeatureMap};
use crate::grid::Grid;
use crate::io_util::{checked_product, write_atomic, ByteReader, ByteWriter};

const MAGIC: &[u8; 4] = b"KNNX";
const VERSION: u32 = 1;
const MIN_NORM: f64 = 1e-12;

pub const DEFAULT_K: usize = 5;

/// Stored background vectors, normalized to unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnIndex {
    dim: usize,
    unit: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1 - a.b / (|a| |b|)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na < MIN_NORM || nb < MIN_NORM {
        return Err(Error::validation("cosine distance of a zero vector"));
    }
    Ok((1.0 - dot(a, b) / (na * nb)).clamp(0.0, 2.0))
}

impl KnnIndex {
    pub fn build(dataset: &FeatureDataset) -> Result<Self> {
        Self::from_rows(dataset.dim(), dataset.to_f64_rows().iter().map(|r| r.as_slice()))
    }

    pub fn from_rows<'a>(dim: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut unit = Vec::new();
        for (k, row) in rows.into_iter().enumerate() {
            if row.len() != dim {
                return Err(Error::dims(format!("row {k} has length {}, expected {dim}", row.len())));
            }
            let n = norm(row);
            if n < MIN_NORM {
                return Err(Error::validation(format!("row {k} has (near) zero norm {n:e}")));
            }
            unit.extend(row.iter().map(|v| v / n));
        }
        if unit.is_empty() {
            return Err(Error::validation("cannot build a kNN index from an empty dataset"));
        }
        Ok(Self { dim, unit })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.unit.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.unit.is_empty()
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        &self.unit[k * self.dim..(k + 1) * self.dim]
    }

    /// The `k` nearest stored vectors as `(distance, index)`, closest first.
    pub fn nearest(&self, query: &[f64], k: usize) -> Result<Vec<(f64, usize)>> {
        if query.len() != self.dim {
            return Err(Error::dims(format!("query of length {} for a dim-{} index", query.len(), self.dim)));
        }
        if k == 0 || k > self.len() {
            return Err(Error::validation(format!("k = {k} outside 1..={}", self.len())));
        }
        let qn = norm(query);
        if qn < MIN_NORM {
            return Err(Error::validation("kNN query has zero norm"));
        }
        let q: Vec<f64> = query.iter().map(|v| v / qn).collect();
        let mut dists: Vec<(f64, usize)> =
            self.unit.chunks_exact(self.dim).enumerate().map(|(i, x)| ((1.0 - dot(&q, x)).clamp(0.0, 2.0), i)).collect();
        let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < dists.len() {
            dists.select_nth_unstable_by(k - 1, by_distance);
            dists.truncate(k);
        }
        dists.sort_by(by_distance);
        Ok(dists)
    }

    /// Kernel density score in `[exp(-2), 1]`.
    pub fn score(&self, query: &[f64], k: usize) -> Result<f64> {
        let nearest = self.nearest(query, k)?;
        Ok(nearest.iter().map(|(d, _)| (-d).exp()).sum::<f64>() / k as f64)
    }
}

pub fn knn_score(query: &[f64], index: &KnnIndex, k: usize) -> Result<f64> {
    index.score(query, k)
}

/// Per-cell `-ln(score)` of a feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnScoreMap {
    pub nll: Grid,
    /// Cells whose feature vector had zero norm. They carry the largest
    /// finite value of the grid.
    pub degenerate_cells: Vec<(usize, usize)>,
}

pub fn knn_score_map(map: &FeatureMap, index: &KnnIndex, k: usize) -> Result<KnnScoreMap> {
    if map.dim() != index.dim() {
        return Err(Error::dims(format!("feature map dim {} vs index dim {}", map.dim(), index.dim())));
    }
    if k == 0 || k > index.len() {
        return Err(Error::validation(format!("k = {k} outside 1..={}", index.len())));
    }
    let cells: Vec<Vec<f64>> = map.cells().map(|c| c.iter().map(|&v| f64::from(v)).collect()).collect();
    let raw: Vec<Option<f64>> = cells
        .par_iter()
        .map(|x| if norm(x) < MIN_NORM { Ok(None) } else { index.score(x, k).map(|s| Some(-s.ln())) })
        .collect::<Result<Vec<_>>>()?;
    let fill = raw.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let fill = if fill.is_finite() { fill } else { 2.0 };
    let w = map.grid_w();
    let degenerate_cells: Vec<(usize, usize)> =
        raw.iter().enumerate().filter(|(_, v)| v.is_none()).map(|(c, _)| (c / w, c % w)).collect();
    if !degenerate_cells.is_empty() {
        log::warn!("{}: {} zero-norm cells in layer {}", map.image_id(), degenerate_cells.len(), map.layer_id());
    }
    let values = raw.into_iter().map(|v| v.unwrap_or(fill)).collect();
    Ok(KnnScoreMap { nll: Grid::new(map.grid_h(), w, values)?, degenerate_cells })
}

pub fn encode_index(index: &KnnIndex) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.len_u32(index.dim, "dimension")?;
    w.len_u32(index.len(), "vector count")?;
    for &v in &index.unit {
        w.f32(v as f32);
    }
    Ok(w.finish())
}

pub fn decode_index(bytes: &[u8]) -> Result<KnnIndex> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported KNNX version {version}")));
    }
    let dim = r.usize()?;
    let n = r.usize()?;
    if dim == 0 || n == 0 {
        return Err(Error::format("KNNX index must have positive dimension and count"));
    }
    let values = r.f32_vec(checked_product(&[n, dim])?)?;
    r.expect_end()?;
    let unit: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
    for (k, row) in unit.chunks_exact(dim).enumerate() {
        let nr = norm(row);
        if (nr - 1.0).abs() > 1e-6 {
            return Err(Error::format(format!("stored vector {k} has norm {nr}, expected 1")));
        }
    }
    Ok(KnnIndex { dim, unit })
}

pub fn write_index(index: &KnnIndex, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_index(index)?)
}

pub fn read_index(path: impl AsRef<Path>) -> Result<KnnIndex> {
    decode_index(&fs::read(path)?)
}

/// Total order on distances used by [`KnnIndex::nearest`], exposed for
/// oracle comparisons.
pub fn distance_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}
