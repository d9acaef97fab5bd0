//! Receptive-field scoring and background/foreground/mixed cell labels.

use super::{grid_extent, FeatureDataset, FeatureMap, PixelMask, Provenance};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Approximate receptive field of one grid cell: its `d x d` pixel block
/// dilated by `radius` pixels on every side, clipped to the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReceptiveField {
    pub downsample: usize,
    pub radius: usize,
}

impl ReceptiveField {
    pub fn new(downsample: usize, radius: usize) -> Self {
        Self { downsample, radius }
    }

    /// Pixel window `[r0, r1) x [c0, c1)` of cell `(i, j)`, clipped to the image.
    pub fn window(&self, i: usize, j: usize, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let d = self.downsample;
        let r0 = (i * d).saturating_sub(self.radius);
        let c0 = (j * d).saturating_sub(self.radius);
        let r1 = ((i + 1) * d + self.radius).min(height);
        let c1 = ((j + 1) * d + self.radius).min(width);
        (r0, r1, c0, c1)
    }
}

/// Fraction of background pixels inside each cell's receptive window.
///
/// `grid_shape` is the `(h, w)` of the layer being labelled and must equal
/// `(ceil(H/d), ceil(W/d))` for the mask.
pub fn score_receptive_fields(mask: &PixelMask, rf: ReceptiveField, grid_shape: (usize, usize)) -> Result<Grid> {
    if rf.downsample == 0 {
        return Err(Error::validation("downsample factor must be positive"));
    }
    let (hh, ww) = mask.shape();
    let expected = (grid_extent(hh, rf.downsample), grid_extent(ww, rf.downsample));
    if expected != grid_shape {
        return Err(Error::dims(format!(
            "mask {hh}x{ww} at d={} gives grid {}x{}, layer grid is {}x{}",
            rf.downsample, expected.0, expected.1, grid_shape.0, grid_shape.1
        )));
    }

    // Summed-area table with a zero border row/column.
    let stride = ww + 1;
    let mut sat = vec![0u64; (hh + 1) * stride];
    for i in 0..hh {
        let mut row = 0u64;
        for j in 0..ww {
            row += u64::from(mask.is_background(i, j));
            sat[(i + 1) * stride + j + 1] = sat[i * stride + j + 1] + row;
        }
    }

    Ok(Grid::from_fn(grid_shape.0, grid_shape.1, |i, j| {
        let (r0, r1, c0, c1) = rf.window(i, j, hh, ww);
        let count = sat[r1 * stride + c1] + sat[r0 * stride + c0] - sat[r0 * stride + c1] - sat[r1 * stride + c0];
        let area = ((r1 - r0) * (c1 - c0)) as f64;
        count as f64 / area
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellLabel {
    Background,
    Foreground,
    Mixed,
}

/// Cut points for cell labels; both boundaries are inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelThresholds {
    pub background: f64,
    pub foreground: f64,
}

impl Default for LabelThresholds {
    fn default() -> Self {
        Self { background: 0.95, foreground: 0.05 }
    }
}

impl LabelThresholds {
    pub fn new(background: f64, foreground: f64) -> Result<Self> {
        let t = Self { background, foreground };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.foreground && self.foreground < self.background && self.background <= 1.0) {
            return Err(Error::validation(format!(
                "need 0 <= fg_thresh < bg_thresh <= 1, got fg={} bg={}",
                self.foreground, self.background
            )));
        }
        Ok(())
    }

    pub fn label(&self, score: f64) -> CellLabel {
        if score >= self.background {
            CellLabel::Background
        } else if score <= self.foreground {
            CellLabel::Foreground
        } else {
            CellLabel::Mixed
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLabelGrid {
    scores: Grid,
    labels: Vec<CellLabel>,
}

impl FeatureLabelGrid {
    pub fn scores(&self) -> &Grid {
        &self.scores
    }

    pub fn shape(&self) -> (usize, usize) {
        self.scores.shape()
    }

    pub fn label(&self, i: usize, j: usize) -> CellLabel {
        self.labels[i * self.scores.width() + j]
    }

    pub fn labels(&self) -> &[CellLabel] {
        &self.labels
    }

    pub fn count(&self, label: CellLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

pub fn assign_feature_labels(scores: &Grid, thresholds: LabelThresholds) -> Result<FeatureLabelGrid> {
    thresholds.validate()?;
    if let Some(bad) = scores.values().iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::validation(format!("score {bad} outside [0, 1]")));
    }
    let labels = scores.values().iter().map(|&s| thresholds.label(s)).collect();
    Ok(FeatureLabelGrid { scores: scores.clone(), labels })
}

/// Gathers the vectors of every background-labelled cell across images.
///
/// All maps must come from the same layer. An all-foreground input yields an
/// empty dataset, which callers must treat as a warning state.
pub fn collect_background_features(maps: &[FeatureMap], labels: &[FeatureLabelGrid]) -> Result<FeatureDataset> {
    if maps.len() != labels.len() {
        return Err(Error::dims(format!("{} feature maps but {} label grids", maps.len(), labels.len())));
    }
    let first = maps.first().ok_or_else(|| Error::validation("no feature maps to collect from"))?;
    let (layer_id, dim) = (first.layer_id(), first.dim());
    let mut dataset = FeatureDataset::empty(layer_id, dim);
    for (map, grid) in maps.iter().zip(labels) {
        if map.layer_id() != layer_id || map.dim() != dim {
            return Err(Error::dims(format!(
                "map {} is layer {} dim {}, expected layer {layer_id} dim {dim}",
                map.image_id(),
                map.layer_id(),
                map.dim()
            )));
        }
        if map.shape() != grid.shape() {
            return Err(Error::dims(format!(
                "map {} grid {:?} vs label grid {:?}",
                map.image_id(),
                map.shape(),
                grid.shape()
            )));
        }
        for i in 0..map.grid_h() {
            for j in 0..map.grid_w() {
                if grid.label(i, j) == CellLabel::Background {
                    dataset.push(map.cell(i, j), Provenance::new(map.image_id(), i, j))?;
                }
            }
        }
    }
    if dataset.is_empty() {
        log::warn!("layer {layer_id}: no background cells among {} maps", maps.len());
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct pixel counting, one window at a time.
    fn brute_scores(mask: &PixelMask, d: usize, r: usize) -> Vec<f64> {
        let (hh, ww) = mask.shape();
        let (gh, gw) = (hh.div_ceil(d), ww.div_ceil(d));
        let mut out = Vec::new();
        for i in 0..gh {
            for j in 0..gw {
                let (mut bg, mut area) = (0, 0);
                for y in 0..hh as isize {
                    for x in 0..ww as isize {
                        let in_rows = y >= (i * d) as isize - r as isize && y < ((i + 1) * d + r) as isize;
                        let in_cols = x >= (j * d) as isize - r as isize && x < ((j + 1) * d + r) as isize;
                        if in_rows && in_cols {
                            area += 1;
                            bg += usize::from(mask.is_background(y as usize, x as usize));
                        }
                    }
                }
                out.push(bg as f64 / area as f64);
            }
        }
        out
    }

    fn corner_mask() -> PixelMask {
        PixelMask::from_fn(4, 4, |i, j| i < 2 && j < 2)
    }

    #[test]
    fn uniform_background() {
        let m = PixelMask::from_fn(8, 8, |_, _| true);
        let s = score_receptive_fields(&m, ReceptiveField::new(2, 0), (4, 4)).unwrap();
        assert!(s.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn block_pooling_scores() {
        let s = score_receptive_fields(&corner_mask(), ReceptiveField::new(2, 0), (2, 2)).unwrap();
        assert_eq!(s.values(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dilated_window_is_clipped() {
        let s = score_receptive_fields(&corner_mask(), ReceptiveField::new(2, 1), (2, 2)).unwrap();
        assert_eq!(s.get(0, 0), 4.0 / 9.0);
        assert_eq!(s.values(), brute_scores(&corner_mask(), 2, 1).as_slice());
    }

    #[test]
    fn ragged_borders_use_ceiling() {
        let m = PixelMask::from_fn(5, 3, |i, _| i != 4);
        let s = score_receptive_fields(&m, ReceptiveField::new(2, 0), (3, 2)).unwrap();
        // bottom row cells only see the single last pixel row
        assert_eq!(s.get(2, 0), 0.0);
        assert_eq!(s.get(2, 1), 0.0);
        assert_eq!(s.get(1, 1), 1.0);
        assert!(score_receptive_fields(&m, ReceptiveField::new(2, 0), (2, 2)).is_err());
    }

    #[test]
    fn label_boundaries() {
        let t = LabelThresholds::default();
        assert_eq!(t.label(1.0), CellLabel::Background);
        assert_eq!(t.label(0.95), CellLabel::Background);
        assert_eq!(t.label(0.5), CellLabel::Mixed);
        assert_eq!(t.label(0.05), CellLabel::Foreground);
        assert!(LabelThresholds::new(0.05, 0.95).is_err());
        assert!(LabelThresholds::new(0.5, 0.5).is_err());
    }

    #[test]
    fn collect_keeps_background_cells_only() {
        let map = FeatureMap::from_cells(3, 2, 2, 1, 1, "a", |i, j| vec![(i * 2 + j) as f32]).unwrap();
        let scores = Grid::new(2, 2, vec![1.0, 0.0, 0.5, 1.0]).unwrap();
        let labels = assign_feature_labels(&scores, LabelThresholds::default()).unwrap();
        let ds = collect_background_features(&[map], &[labels]).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.vector(0), &[0.0]);
        assert_eq!(ds.vector(1), &[3.0]);
        assert_eq!(ds.provenance()[1], Provenance::new("a", 1, 1));
    }

    #[test]
    fn all_foreground_gives_empty_dataset() {
        let map = FeatureMap::from_cells(3, 2, 2, 1, 1, "a", |_, _| vec![1.0]).unwrap();
        let labels = assign_feature_labels(&Grid::filled(2, 2, 0.0), LabelThresholds::default()).unwrap();
        assert!(collect_background_features(&[map], &[labels]).unwrap().is_empty());
    }

    #[test]
    fn dataset_sizes_add_across_images() {
        let mk = |id: &str, n_bg: usize| {
            let map = FeatureMap::from_cells(4, 2, 4, 2, 1, id, |_, _| vec![1.0, 2.0]).unwrap();
            let scores = Grid::from_fn(2, 4, |i, j| if i * 4 + j < n_bg { 1.0 } else { 0.0 });
            (map, assign_feature_labels(&scores, LabelThresholds::default()).unwrap())
        };
        let (m1, l1) = mk("a", 3);
        let (m2, l2) = mk("b", 5);
        assert_eq!(collect_background_features(&[m1, m2], &[l1, l2]).unwrap().len(), 8);
    }

    #[test]
    fn misaligned_shapes_rejected() {
        let map = FeatureMap::from_cells(3, 2, 2, 1, 1, "a", |_, _| vec![1.0]).unwrap();
        let labels = assign_feature_labels(&Grid::filled(3, 2, 1.0), LabelThresholds::default()).unwrap();
        assert!(matches!(collect_background_features(&[map], &[labels]), Err(Error::DimensionMismatch(_))));
    }

    fn arb_mask() -> impl Strategy<Value = (usize, usize, Vec<bool>)> {
        (1usize..12, 1usize..12).prop_flat_map(|(h, w)| (Just(h), Just(w), proptest::collection::vec(any::<bool>(), h * w)))
    }

    proptest! {
        #[test]
        fn scores_match_pixel_counting((h, w, px) in arb_mask(), d in 1usize..5, r in 0usize..3) {
            let mask = PixelMask::new(h, w, px).unwrap();
            let shape = (h.div_ceil(d), w.div_ceil(d));
            let s = score_receptive_fields(&mask, ReceptiveField::new(d, r), shape).unwrap();
            let brute = brute_scores(&mask, d, r);
            prop_assert_eq!(s.values(), brute.as_slice());
            prop_assert!(s.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn flipping_to_background_never_lowers_scores(
            (h, w, px) in arb_mask(), d in 1usize..5, r in 0usize..3, flip in any::<proptest::sample::Index>()
        ) {
            let mask = PixelMask::new(h, w, px).unwrap();
            let mut flipped = mask.clone();
            let k = flip.index(h * w);
            flipped.set_background(k / w, k % w, true);
            let shape = (h.div_ceil(d), w.div_ceil(d));
            let rf = ReceptiveField::new(d, r);
            let before = score_receptive_fields(&mask, rf, shape).unwrap();
            let after = score_receptive_fields(&flipped, rf, shape).unwrap();
            for (a, b) in after.values().iter().zip(before.values()) {
                prop_assert!(a >= b);
            }
        }

        #[test]
        fn labels_partition_cells(scores in proptest::collection::vec(0.0f64..=1.0, 1..64), fg in 0.0f64..0.5, gap in 0.01f64..0.5) {
            let n = scores.len();
            let g = Grid::new(1, n, scores).unwrap();
            let t = LabelThresholds::new((fg + gap).min(1.0), fg).unwrap();
            let l = assign_feature_labels(&g, t).unwrap();
            let total = l.count(CellLabel::Background) + l.count(CellLabel::Foreground) + l.count(CellLabel::Mixed);
            prop_assert_eq!(total, n);
        }
    }
}
