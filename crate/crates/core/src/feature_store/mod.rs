//! Feature maps, pixel masks, and background feature datasets.
//!
//! Encoder layers turn an `H x W` image into an `h x w` grid of
//! `f`-dimensional vectors, with `h = ceil(H / d)` for the layer's downsample
//! factor `d`. Pixel masks mark which pixels belong to the background; the
//! [`labels`] module scores each grid cell by the share of background pixels
//! it sees and keeps only clean background cells for density estimation.

mod dataset;
mod ftns;
pub mod labels;
mod mask;

pub use dataset::{read_dataset, write_dataset, FeatureDataset, Provenance};
pub use ftns::{decode_feature_map, encode_feature_map, read_feature_map, write_feature_map};
pub use labels::{
    assign_feature_labels, collect_background_features, score_receptive_fields, CellLabel,
    FeatureLabelGrid, LabelThresholds, ReceptiveField,
};
pub use mask::{decode_mask, encode_mask, read_mask, write_mask, PixelMask};

use crate::error::{Error, Result};

/// Ceiling division used for all pixel-to-grid shape computations.
pub fn grid_extent(pixels: usize, downsample: usize) -> usize {
    pixels.div_ceil(downsample)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageMeta {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub image_id: String,
}

impl ImageMeta {
    pub fn new(height: usize, width: usize, channels: usize, image_id: impl Into<String>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::validation("image dimensions must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::validation(format!("image channels must be 1 or 3, got {channels}")));
        }
        Ok(Self { height, width, channels, image_id: image_id.into() })
    }
}

/// One encoder layer's `h x w x f` output for a single image.
///
/// Values are stored row-major in `(i, j, channel)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    layer_id: u32,
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    downsample: usize,
    values: Vec<f32>,
    image_id: String,
}

impl FeatureMap {
    pub fn new(
        layer_id: u32,
        grid_h: usize,
        grid_w: usize,
        dim: usize,
        downsample: usize,
        values: Vec<f32>,
        image_id: impl Into<String>,
    ) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || dim == 0 {
            return Err(Error::validation("feature map dimensions must be positive"));
        }
        if downsample == 0 {
            return Err(Error::validation("downsample factor must be positive"));
        }
        let expected = grid_h
            .checked_mul(grid_w)
            .and_then(|n| n.checked_mul(dim))
            .ok_or_else(|| Error::validation("feature map size overflows"))?;
        if values.len() != expected {
            return Err(Error::dims(format!(
                "{grid_h}x{grid_w}x{dim} map needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!("non-finite feature value at flat index {pos}")));
        }
        Ok(Self { layer_id, grid_h, grid_w, dim, downsample, values, image_id: image_id.into() })
    }

    /// Builds a map by evaluating `f(i, j)` for every cell.
    pub fn from_cells(
        layer_id: u32,
        grid_h: usize,
        grid_w: usize,
        dim: usize,
        downsample: usize,
        image_id: impl Into<String>,
        mut f: impl FnMut(usize, usize) -> Vec<f32>,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(grid_h * grid_w * dim);
        for i in 0..grid_h {
            for j in 0..grid_w {
                let v = f(i, j);
                if v.len() != dim {
                    return Err(Error::dims(format!("cell ({i},{j}) has {} values, expected {dim}", v.len())));
                }
                values.extend(v);
            }
        }
        Self::new(layer_id, grid_h, grid_w, dim, downsample, values, image_id)
    }

    pub fn layer_id(&self) -> u32 {
        self.layer_id
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn downsample(&self) -> usize {
        self.downsample
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// The feature vector of cell `(i, j)`.
    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> &[f32] {
        let start = (i * self.grid_w + j) * self.dim;
        &self.values[start..start + self.dim]
    }

    pub fn cells(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim)
    }

    /// Checks `h = ceil(H/d)` and `w = ceil(W/d)` against the source image size.
    pub fn check_source(&self, height: usize, width: usize) -> Result<()> {
        let (eh, ew) = (grid_extent(height, self.downsample), grid_extent(width, self.downsample));
        if (eh, ew) != (self.grid_h, self.grid_w) {
            return Err(Error::dims(format!(
                "layer {} of {}: grid {}x{} does not match image {height}x{width} at d={} (expected {eh}x{ew})",
                self.layer_id, self.image_id, self.grid_h, self.grid_w, self.downsample
            )));
        }
        Ok(())
    }
}
