//! From per-layer feature maps to pixel likelihood maps and binary masks.

use crate::ensemble::{FusionModel, LayerCalibration};
use crate::error::{Error, Result};
use crate::feature_store::{FeatureMap, PixelMask};
use crate::flow::FlowModel;
use crate::grid::Grid;
use crate::knn_density::{knn_score_map, KnnIndex};

/// Pixel-resolution scores, higher meaning more foreground-like.
pub type LikelihoodMap = Grid;

/// `v0 + t (v1 - v0)`, clamped to the segment so results never leave the
/// range of the two inputs.
#[inline]
fn lerp(v0: f64, v1: f64, t: f64) -> f64 {
    let v = v0 + t * (v1 - v0);
    v.clamp(v0.min(v1), v0.max(v1))
}

/// Source coordinate and blend weight along one axis, half-pixel centers.
#[inline]
fn source_coord(out: usize, src_len: usize, out_len: usize) -> (usize, usize, f64) {
    let s = ((out as f64 + 0.5) * (src_len as f64 / out_len as f64) - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear upsampling with half-pixel centers and edge clamping.
pub fn bilinear_upsample(grid: &Grid, height: usize, width: usize) -> Result<LikelihoodMap> {
    let (h, w) = grid.shape();
    if height < h || width < w {
        return Err(Error::validation(format!("cannot upsample {h}x{w} to smaller {height}x{width}")));
    }
    let cols: Vec<(usize, usize, f64)> = (0..width).map(|j| source_coord(j, w, width)).collect();
    let mut values = Vec::with_capacity(height * width);
    for i in 0..height {
        let (r0, r1, ty) = source_coord(i, h, height);
        for &(c0, c1, tx) in &cols {
            let top = lerp(grid.get(r0, c0), grid.get(r0, c1), tx);
            let bottom = lerp(grid.get(r1, c0), grid.get(r1, c1), tx);
            values.push(lerp(top, bottom, ty));
        }
    }
    Grid::new(height, width, values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    height: usize,
    width: usize,
    foreground: Vec<bool>,
    threshold: f64,
}

impl SegmentationMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn is_foreground(&self, i: usize, j: usize) -> bool {
        self.foreground[i * self.width + j]
    }

    pub fn foreground(&self) -> &[bool] {
        &self.foreground
    }

    pub fn foreground_count(&self) -> usize {
        self.foreground.iter().filter(|&&f| f).count()
    }

    /// The mask in ingestion convention (background = 1, foreground = 0).
    pub fn to_pixel_mask(&self) -> PixelMask {
        PixelMask::new(self.height, self.width, self.foreground.iter().map(|&f| !f).collect()).expect("same shape")
    }
}

/// `value >= threshold` marks foreground.
pub fn threshold_map(map: &LikelihoodMap, threshold: f64) -> SegmentationMask {
    SegmentationMask {
        height: map.height(),
        width: map.width(),
        foreground: map.values().iter().map(|&v| v >= threshold).collect(),
        threshold,
    }
}

/// How one layer's feature map is turned into an NLL grid.
#[derive(Debug, Clone, Copy)]
pub enum LayerEstimator<'a> {
    Flow(&'a FlowModel),
    Knn { index: &'a KnnIndex, k: usize },
}

impl LayerEstimator<'_> {
    pub fn nll_grid(&self, map: &FeatureMap) -> Result<Grid> {
        match self {
            LayerEstimator::Flow(model) => model.score_feature_map(map),
            LayerEstimator::Knn { index, k } => Ok(knn_score_map(map, index, *k)?.nll),
        }
    }
}

/// Everything needed to score one layer of one image.
#[derive(Debug, Clone, Copy)]
pub struct LayerInput<'a> {
    pub map: &'a FeatureMap,
    pub estimator: LayerEstimator<'a>,
    pub calibration: &'a LayerCalibration,
}

/// Raw NLL, then centered and normalized, for each layer.
pub fn normalized_layer_grids(layers: &[LayerInput<'_>]) -> Result<Vec<Grid>> {
    layers
        .iter()
        .map(|l| {
            let id = l.map.layer_id();
            let nll = l.estimator.nll_grid(l.map).map_err(|e| e.in_stage(format!("density estimation, layer {id}")))?;
            l.calibration.apply(&nll, id).map_err(|e| e.in_stage(format!("calibration, layer {id}")))
        })
        .collect()
}

/// Fuses calibrated layer grids into one pixel-resolution map.
///
/// Grids of equal shape are fused first and the result upsampled; grids of
/// different shapes are each upsampled to `height x width` and fused per
/// pixel.
pub fn fuse_to_pixels(grids: &[Grid], fusion: &FusionModel, height: usize, width: usize) -> Result<LikelihoodMap> {
    let first = grids.first().ok_or_else(|| Error::validation("no layer grids to fuse"))?;
    let same_shape = grids.iter().all(|g| g.shape() == first.shape());
    if same_shape {
        let fused = fusion.fuse(grids).map_err(|e| e.in_stage("fusion"))?;
        bilinear_upsample(&fused, height, width).map_err(|e| e.in_stage("upsampling"))
    } else {
        let up = grids
            .iter()
            .map(|g| bilinear_upsample(g, height, width))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_stage("upsampling"))?;
        fusion.fuse(&up).map_err(|e| e.in_stage("fusion"))
    }
}

/// Full per-image composition: density, calibration, fusion, upsampling,
/// thresholding.
pub fn segment_image(
    layers: &[LayerInput<'_>],
    fusion: &FusionModel,
    height: usize,
    width: usize,
    threshold: f64,
) -> Result<(LikelihoodMap, SegmentationMask)> {
    for l in layers {
        l.map.check_source(height, width).map_err(|e| e.in_stage("input check"))?;
    }
    let grids = normalized_layer_grids(layers)?;
    let map = fuse_to_pixels(&grids, fusion, height, width)?;
    let mask = threshold_map(&map, threshold);
    Ok((map, mask))
}

/// Stores a likelihood map as a single-channel FTNS feature map.
pub fn likelihood_to_feature_map(map: &LikelihoodMap, image_id: &str) -> Result<FeatureMap> {
    let values = map.values().iter().map(|&v| v as f32).collect();
    FeatureMap::new(0, map.height(), map.width(), 1, 1, values, image_id)
}
