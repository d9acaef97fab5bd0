//! A synthetic corpus that stands in for encoder features of real images.
//!
//! Each layer has its own background distribution, a Gaussian mixture, and a
//! foreground distribution whose components are pushed outward and sideways
//! and whose noise is heavier tailed. Images carry a few rectangular or
//! elliptical foreground regions. A grid cell takes foreground features when
//! most of its pixels lie in a foreground region.
//!
//! A region can be *camouflaged* in a layer: that layer then draws background
//! features for it. Camouflage is decided independently per layer, so a
//! single layer misses some objects that the others still see.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::feature_store::{grid_extent, FeatureMap, PixelMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticLayer {
    pub layer_id: u32,
    pub downsample: usize,
}

/// Layers 3 to 5 at strides 4, 8, 16, plus a combined layer 6 at the
/// stride of layer 4.
pub fn default_layers() -> Vec<SyntheticLayer> {
    [(3, 4), (4, 8), (5, 16), (6, 8)]
        .into_iter()
        .map(|(layer_id, downsample)| SyntheticLayer { layer_id, downsample })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    pub n_images: usize,
    pub dim: usize,
    pub layers: Vec<SyntheticLayer>,
    pub n_components: usize,
    /// Spread of background component means.
    pub mean_scale: f64,
    /// Foreground means are scaled by `1 + radial_shift`...
    pub radial_shift: f64,
    /// ...then moved by this distance in a random direction.
    pub offset: f64,
    /// Degrees of freedom of the foreground's Student-t noise.
    pub tail_dof: f64,
    pub max_regions: usize,
    pub camouflage: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_images: 100,
            dim: 32,
            layers: default_layers(),
            n_components: 5,
            mean_scale: 2.0,
            radial_shift: 0.5,
            offset: 5.0,
            tail_dof: 3.0,
            max_regions: 3,
            camouflage: 0.15,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.dim == 0 || self.n_components == 0 {
            return Err(Error::validation("synthetic corpus sizes must be positive"));
        }
        if self.layers.is_empty() || self.layers.iter().any(|l| l.downsample == 0) {
            return Err(Error::validation("synthetic corpus needs layers with positive downsample"));
        }
        if !(0.0..=1.0).contains(&self.camouflage) {
            return Err(Error::validation(format!("camouflage probability {} outside [0, 1]", self.camouflage)));
        }
        if !(self.tail_dof > 0.0) {
            return Err(Error::validation("tail degrees of freedom must be positive"));
        }
        Ok(())
    }
}

/// Diagonal Gaussian mixture with equal weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<Vec<f64>>,
}

impl Mixture {
    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Draws one vector. With `tail_dof`, the noise is Student-t.
    pub fn sample(&self, rng: &mut impl Rng, tail_dof: Option<f64>) -> Vec<f64> {
        let k = rng.random_range(0..self.means.len());
        let scale = match tail_dof {
            Some(nu) => {
                let chi: f64 = ChiSquared::new(nu).expect("positive dof").sample(rng);
                (nu / chi.max(1e-12)).sqrt()
            }
            None => 1.0,
        };
        self.means[k]
            .iter()
            .zip(&self.stds[k])
            .map(|(m, s)| {
                let z: f64 = StandardNormal.sample(rng);
                m + s * scale * z
            })
            .collect()
    }
}

/// Background and foreground feature distributions for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDistributions {
    pub layer: SyntheticLayer,
    pub background: Mixture,
    pub foreground: Mixture,
    pub tail_dof: f64,
}

impl LayerDistributions {
    pub fn random(layer: SyntheticLayer, cfg: &SyntheticConfig, rng: &mut impl Rng) -> Self {
        let normal = |rng: &mut dyn rand::RngCore| -> f64 { StandardNormal.sample(rng) };
        let mut bg_means = Vec::with_capacity(cfg.n_components);
        let mut bg_stds = Vec::with_capacity(cfg.n_components);
        let mut fg_means = Vec::with_capacity(cfg.n_components);
        for _ in 0..cfg.n_components {
            let mean: Vec<f64> = (0..cfg.dim).map(|_| cfg.mean_scale * normal(rng)).collect();
            let std: Vec<f64> = (0..cfg.dim).map(|_| rng.random_range(0.5..1.0)).collect();
            let dir: Vec<f64> = (0..cfg.dim).map(|_| normal(rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            fg_means.push(
                mean.iter()
                    .zip(&dir)
                    .map(|(m, d)| (1.0 + cfg.radial_shift) * m + cfg.offset * d / norm)
                    .collect(),
            );
            bg_means.push(mean);
            bg_stds.push(std);
        }
        Self {
            layer,
            foreground: Mixture { means: fg_means, stds: bg_stds.clone() },
            background: Mixture { means: bg_means, stds: bg_stds },
            tail_dof: cfg.tail_dof,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Region {
    Rect { top: usize, left: usize, height: usize, width: usize },
    Ellipse { ci: f64, cj: f64, ri: f64, rj: f64 },
}

impl Region {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        match *self {
            Region::Rect { top, left, height, width } => i >= top && i < top + height && j >= left && j < left + width,
            Region::Ellipse { ci, cj, ri, rj } => {
                let di = (i as f64 + 0.5 - ci) / ri;
                let dj = (j as f64 + 0.5 - cj) / rj;
                di * di + dj * dj <= 1.0
            }
        }
    }

    fn random(height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let lo = (height.min(width) / 5).max(1);
        let hi = (height.min(width) / 2).max(lo + 1);
        let h = rng.random_range(lo..hi);
        let w = rng.random_range(lo..hi);
        let top = rng.random_range(0..=height.saturating_sub(h));
        let left = rng.random_range(0..=width.saturating_sub(w));
        if rng.random_bool(0.5) {
            Region::Rect { top, left, height: h, width: w }
        } else {
            Region::Ellipse {
                ci: top as f64 + h as f64 / 2.0,
                cj: left as f64 + w as f64 / 2.0,
                ri: h as f64 / 2.0,
                rj: w as f64 / 2.0,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub image_id: String,
    pub mask: PixelMask,
    pub regions: Vec<Region>,
    /// `camouflaged[r][l]`: region `r` looks like background in layer `l`.
    pub camouflaged: Vec<Vec<bool>>,
    /// One map per configured layer, in configuration order.
    pub maps: Vec<FeatureMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub config: SyntheticConfig,
    pub distributions: Vec<LayerDistributions>,
    pub images: Vec<SyntheticImage>,
}

/// Generates a corpus. Identical configurations give identical corpora.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let distributions: Vec<LayerDistributions> =
        cfg.layers.iter().map(|&l| LayerDistributions::random(l, cfg, &mut rng)).collect();
    let width = cfg.n_images.max(1).to_string().len().max(3);
    let images = (0..cfg.n_images)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1 + k as u64);
            generate_image(&format!("synth{k:0width$}"), cfg, &distributions, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticCorpus { config: cfg.clone(), distributions, images })
}

fn generate_image(
    image_id: &str,
    cfg: &SyntheticConfig,
    dists: &[LayerDistributions],
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticImage> {
    let n_regions = rng.random_range(0..=cfg.max_regions);
    let regions: Vec<Region> = (0..n_regions).map(|_| Region::random(cfg.height, cfg.width, rng)).collect();
    let camouflaged: Vec<Vec<bool>> =
        regions.iter().map(|_| dists.iter().map(|_| rng.random_bool(cfg.camouflage)).collect()).collect();
    let mask = PixelMask::from_fn(cfg.height, cfg.width, |i, j| !regions.iter().any(|r| r.contains(i, j)));

    let mut maps = Vec::with_capacity(dists.len());
    for (l, dist) in dists.iter().enumerate() {
        let d = dist.layer.downsample;
        let (gh, gw) = (grid_extent(cfg.height, d), grid_extent(cfg.width, d));
        let visible: Vec<&Region> = regions.iter().zip(&camouflaged).filter(|(_, c)| !c[l]).map(|(r, _)| r).collect();
        let map = FeatureMap::from_cells(dist.layer.layer_id, gh, gw, cfg.dim, d, image_id, |i, j| {
            let (i1, j1) = (((i + 1) * d).min(cfg.height), ((j + 1) * d).min(cfg.width));
            let total = (i1 - i * d) * (j1 - j * d);
            let fg = (i * d..i1)
                .flat_map(|pi| (j * d..j1).map(move |pj| (pi, pj)))
                .filter(|&(pi, pj)| visible.iter().any(|r| r.contains(pi, pj)))
                .count();
            let v = if 2 * fg > total {
                dist.foreground.sample(rng, Some(dist.tail_dof))
            } else {
                dist.background.sample(rng, None)
            };
            v.into_iter().map(|x| x as f32).collect()
        })?;
        maps.push(map);
    }
    Ok(SyntheticImage { image_id: image_id.to_string(), mask, regions, camouflaged, maps })
}
