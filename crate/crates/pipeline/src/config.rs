//! The JSON pipeline configuration and its command-line overrides.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bgdensity::ensemble::FusionMode;
use bgdensity::feature_store::LabelThresholds;
use bgdensity::flow::TrainConfig;
use bgdensity::knn_density::DEFAULT_K;
use bgdensity::synthetic::SyntheticConfig;
use bgdensity::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorChoice {
    Flow,
    Knn,
    Both,
}

/// One concrete density estimator family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Estimator {
    Flow,
    Knn,
}

impl Estimator {
    pub fn as_str(&self) -> &'static str {
        match self {
            Estimator::Flow => "flow",
            Estimator::Knn => "knn",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl EstimatorChoice {
    pub fn estimators(&self) -> Vec<Estimator> {
        match self {
            EstimatorChoice::Flow => vec![Estimator::Flow],
            EstimatorChoice::Knn => vec![Estimator::Knn],
            EstimatorChoice::Both => vec![Estimator::Flow, Estimator::Knn],
        }
    }
}

impl FromStr for EstimatorChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(EstimatorChoice::Flow),
            "knn" => Ok(EstimatorChoice::Knn),
            "both" => Ok(EstimatorChoice::Both),
            other => Err(Error::Validation(format!("estimator must be flow, knn or both, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub chain_length: usize,
    pub hidden_width: usize,
}

impl Default for FlowSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            chain_length: t.chain_length,
            hidden_width: t.hidden_width,
        }
    }
}

impl FlowSettings {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
            chain_length: self.chain_length,
            hidden_width: self.hidden_width,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelSettings {
    pub bg_threshold: f64,
    pub fg_threshold: f64,
    /// Receptive-field dilation per layer id; layers not listed use 0.
    pub rf_radius: Vec<(u32, usize)>,
}

impl Default for LabelSettings {
    fn default() -> Self {
        let t = LabelThresholds::default();
        Self { bg_threshold: t.background, fg_threshold: t.foreground, rf_radius: Vec::new() }
    }
}

impl LabelSettings {
    pub fn thresholds(&self) -> Result<LabelThresholds> {
        LabelThresholds::new(self.bg_threshold, self.fg_threshold)
    }

    pub fn radius(&self, layer_id: u32) -> usize {
        self.rf_radius.iter().find(|(l, _)| *l == layer_id).map_or(0, |(_, r)| *r)
    }
}

/// Shares of images assigned to the train, validation and fitting splits;
/// the rest form the test split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    pub train: f64,
    pub val: f64,
    pub fit: f64,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self { train: 0.5, val: 0.1, fit: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSettings {
    #[serde(with = "fusion_mode")]
    pub mode: FusionMode,
    /// Fitting uses every `pixel_stride`-th pixel along each axis.
    pub pixel_stride: usize,
    /// TPR on the fitting split that fixes the default segmentation threshold.
    pub target_tpr: f64,
}

impl Default for FusionSettings {
    fn default() -> Self {
        Self { mode: FusionMode::Logistic, pixel_stride: 4, target_tpr: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    /// Also time the fixed desk-scale scenario (random vectors, no artifacts needed).
    pub scenario: bool,
    pub scenario_vectors: usize,
    pub scenario_dim: usize,
    pub scenario_grid: usize,
    pub scenario_chain: usize,
    pub scenario_hidden: usize,
    pub repeats: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            scenario: true,
            scenario_vectors: 10_000,
            scenario_dim: 128,
            scenario_grid: 28,
            scenario_chain: 8,
            scenario_hidden: 64,
            repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSettings {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub camouflage: f64,
}

impl Default for SyntheticSettings {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        Self { n_images: s.n_images, height: s.height, width: s.width, dim: s.dim, camouflage: s.camouflage }
    }
}

impl SyntheticSettings {
    pub fn to_config(&self, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            n_images: self.n_images,
            height: self.height,
            width: self.width,
            dim: self.dim,
            camouflage: self.camouflage,
            seed,
            ..SyntheticConfig::default()
        }
    }
}

/// String form of [`FusionMode`]; the core crate stays free of serde.
mod fusion_mode {
    use bgdensity::ensemble::FusionMode;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(mode: &FusionMode, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(mode.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<FusionMode, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub features_dir: PathBuf,
    pub masks_dir: PathBuf,
    pub out_dir: PathBuf,
    pub layers: Vec<u32>,
    pub estimator: EstimatorChoice,
    pub flow: FlowSettings,
    pub k: usize,
    /// Keep every n-th background vector in the kNN index; 1 keeps all.
    pub knn_stride: usize,
    pub labels: LabelSettings,
    pub fusion: FusionSettings,
    pub splits: SplitSettings,
    pub seed: u64,
    /// Worker threads for per-image work.
    pub workers: usize,
    pub bench: BenchSettings,
    pub synthetic: SyntheticSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            features_dir: PathBuf::from("features"),
            masks_dir: PathBuf::from("masks"),
            out_dir: PathBuf::from("out"),
            layers: vec![3, 4, 5, 6],
            estimator: EstimatorChoice::Flow,
            flow: FlowSettings::default(),
            k: DEFAULT_K,
            knn_stride: 1,
            labels: LabelSettings::default(),
            fusion: FusionSettings::default(),
            splits: SplitSettings::default(),
            seed: 0,
            workers: 1,
            bench: BenchSettings::default(),
            synthetic: SyntheticSettings::default(),
        }
    }
}

/// Flag values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub layers: Option<Vec<u32>>,
    pub estimator: Option<EstimatorChoice>,
    pub fusion: Option<FusionMode>,
    pub out_dir: Option<PathBuf>,
}

impl PipelineConfig {
    /// Parses a config; relative paths are resolved against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| Error::Validation(format!("invalid config: {e}")))?;
        for p in [&mut cfg.features_dir, &mut cfg.masks_dir, &mut cfg.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::from(e).in_stage(format!("reading {}", path.display())))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(l) = &o.layers {
            self.layers = l.clone();
        }
        if let Some(e) = o.estimator {
            self.estimator = e;
        }
        if let Some(f) = o.fusion {
            self.fusion.mode = f;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Validation("layer list must not be empty".into()));
        }
        let mut sorted = self.layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.layers.len() {
            return Err(Error::Validation(format!("duplicate layers in {:?}", self.layers)));
        }
        let s = self.splits;
        if [s.train, s.val, s.fit].iter().any(|f| !(0.0..=1.0).contains(f)) || s.train + s.val + s.fit > 1.0 + 1e-12 {
            return Err(Error::Validation(format!(
                "split fractions must lie in [0, 1] and sum to at most 1, got {} + {} + {}",
                s.train, s.val, s.fit
            )));
        }
        if self.k == 0 {
            return Err(Error::Validation("k must be positive".into()));
        }
        if self.knn_stride == 0 {
            return Err(Error::Validation("knn_stride must be positive".into()));
        }
        if self.workers == 0 {
            return Err(Error::Validation("workers must be positive".into()));
        }
        if self.fusion.pixel_stride == 0 || !(0.0..=1.0).contains(&self.fusion.target_tpr) {
            return Err(Error::Validation("fusion pixel_stride must be positive and target_tpr in [0, 1]".into()));
        }
        self.labels.thresholds()?;
        self.flow.train_config(self.seed).validate()
    }

    /// Seed for the flow of one layer, distinct across layers.
    pub fn layer_seed(&self, layer_id: u32) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(u64::from(layer_id))
    }
}

/// Parses `3,4,5,6`.
pub fn parse_layers(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(|p| p.trim().parse::<u32>().map_err(|_| Error::Validation(format!("bad layer id {p:?} in {s:?}"))))
        .collect()
}
