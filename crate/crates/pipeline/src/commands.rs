//! The pipeline stages. Each reads the artifacts of earlier stages from the
//! output directory and writes its own, overwriting atomically.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! splits.csv                     image_id,split
//! prepare_summary.csv            layer,split,background,mixed,foreground
//! datasets/l<L>_<split>.fdst     background vectors (train and val)
//! models/flow_l<L>.nvpf          models/knn_l<L>.knnx
//! logs/flow_l<L>.csv             epoch,train_nll,val_nll
//! <est>/calibration.csv          layer_id,train_mean,val_mean,val_std
//! <est>/fusion.txt               <est>/threshold.txt   <est>/fit_report.txt
//! <est>/segment/<id>.ftns|.msk   fused map and mask
//! <est>/segment/<id>_l<L>.ftns   per-layer normalized map at pixel resolution
//! <est>/eval/l<L>.txt|fused.txt  metric reports
//! eval_table.txt                 all rows, one estimator block each
//! bench.txt
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bgdensity::ensemble::{
    fit_logistic, read_calibrations, read_fusion, write_calibrations, write_fusion, FusionMode, FusionModel,
    FusionSample, LayerCalibration, LogisticConfig,
};
use bgdensity::feature_store::{
    assign_feature_labels, collect_background_features, read_dataset, read_feature_map, score_receptive_fields,
    write_dataset, write_feature_map, write_mask, CellLabel, FeatureDataset, FeatureMap, PixelMask, ReceptiveField,
};
use bgdensity::flow::{read_model, train_with_validation, write_model, FlowModel};
use bgdensity::knn_density::{read_index, write_index, KnnIndex};
use bgdensity::metrics::{auroc, threshold_at_tpr, MetricsReport, ScoredPixels};
use bgdensity::segmentation::{
    bilinear_upsample, fuse_to_pixels, likelihood_to_feature_map, normalized_layer_grids, threshold_map,
    LayerEstimator, LayerInput, LikelihoodMap,
};
use bgdensity::synthetic::{generate, SyntheticLayer};
use bgdensity::{write_atomic, Error, Grid, Result};
use rayon::prelude::*;

use crate::config::{Estimator, PipelineConfig};
use crate::corpus::{
    assign_splits, at_path, feature_path, list_images, load_feature_map, load_mask, mask_path, Split, Splits,
};

/// Training NLLs for the centering constant use at most this many vectors;
/// validation background cells are all used.
const CALIBRATION_SAMPLE: usize = 2048;

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::from(e).in_stage(format!("creating {}", p.display())))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    if let Some(parent) = p.parent() {
        create_dir(parent)?;
    }
    write_atomic(p, text.as_bytes()).map_err(at_path(p))
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| Error::from(e).in_stage(format!("reading {}", p.display())))
}

/// Paths of every artifact, derived from the configuration.
#[derive(Debug, Clone)]
pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Self { out: cfg.out_dir.clone() }
    }

    pub fn splits(&self) -> PathBuf {
        self.out.join("splits.csv")
    }

    pub fn prepare_summary(&self) -> PathBuf {
        self.out.join("prepare_summary.csv")
    }

    pub fn dataset(&self, layer: u32, split: Split) -> PathBuf {
        self.out.join("datasets").join(format!("l{layer}_{split}.fdst"))
    }

    pub fn flow_model(&self, layer: u32) -> PathBuf {
        self.out.join("models").join(format!("flow_l{layer}.nvpf"))
    }

    pub fn knn_index(&self, layer: u32) -> PathBuf {
        self.out.join("models").join(format!("knn_l{layer}.knnx"))
    }

    pub fn model(&self, est: Estimator, layer: u32) -> PathBuf {
        match est {
            Estimator::Flow => self.flow_model(layer),
            Estimator::Knn => self.knn_index(layer),
        }
    }

    pub fn training_log(&self, layer: u32) -> PathBuf {
        self.out.join("logs").join(format!("flow_l{layer}.csv"))
    }

    pub fn estimator_dir(&self, est: Estimator) -> PathBuf {
        self.out.join(est.as_str())
    }

    pub fn calibration(&self, est: Estimator) -> PathBuf {
        self.estimator_dir(est).join("calibration.csv")
    }

    pub fn fusion(&self, est: Estimator) -> PathBuf {
        self.estimator_dir(est).join("fusion.txt")
    }

    pub fn threshold(&self, est: Estimator) -> PathBuf {
        self.estimator_dir(est).join("threshold.txt")
    }

    pub fn fit_report(&self, est: Estimator) -> PathBuf {
        self.estimator_dir(est).join("fit_report.txt")
    }

    pub fn segment_dir(&self, est: Estimator) -> PathBuf {
        self.estimator_dir(est).join("segment")
    }

    pub fn likelihood(&self, est: Estimator, id: &str) -> PathBuf {
        self.segment_dir(est).join(format!("{id}.ftns"))
    }

    pub fn predicted_mask(&self, est: Estimator, id: &str) -> PathBuf {
        self.segment_dir(est).join(format!("{id}.msk"))
    }

    pub fn layer_likelihood(&self, est: Estimator, id: &str, layer: u32) -> PathBuf {
        feature_path(&self.segment_dir(est), id, layer)
    }

    pub fn eval_report(&self, est: Estimator, row: &EvalRowKind) -> PathBuf {
        let name = match row {
            EvalRowKind::Layer(l) => format!("l{l}.txt"),
            EvalRowKind::Fused => "fused.txt".to_string(),
        };
        self.estimator_dir(est).join("eval").join(name)
    }

    pub fn eval_table(&self) -> PathBuf {
        self.out.join("eval_table.txt")
    }

    pub fn bench(&self) -> PathBuf {
        self.out.join("bench.txt")
    }
}

fn worker_pool(cfg: &PipelineConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Validation(format!("cannot start {} workers: {e}", cfg.workers)))
}

/// Runs `f` on every id in the worker pool, keeping input order.
fn per_image<T: Send>(cfg: &PipelineConfig, ids: &[String], f: impl Fn(&str) -> Result<T> + Sync) -> Result<Vec<T>> {
    let pool = worker_pool(cfg)?;
    pool.install(|| ids.par_iter().map(|id| f(id).map_err(|e| e.in_stage(format!("image {id}")))).collect())
}

/// The configured layers' maps of one image, plus its ground-truth mask.
pub fn load_image(cfg: &PipelineConfig, id: &str) -> Result<(Vec<FeatureMap>, PixelMask)> {
    let mask = load_mask(&cfg.masks_dir, id)?;
    let maps = cfg
        .layers
        .iter()
        .map(|&l| {
            let m = load_feature_map(&cfg.features_dir, id, l)?;
            m.check_source(mask.height(), mask.width())?;
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((maps, mask))
}

pub fn read_splits(layout: &Layout) -> Result<Splits> {
    Splits::parse_csv(&read_text(&layout.splits())?)
}

// ---------------------------------------------------------------- prepare

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellCounts {
    pub layer: u32,
    pub split: Split,
    pub background: usize,
    pub mixed: usize,
    pub foreground: usize,
}

/// Assigns splits, labels every cell of the train and validation images and
/// writes their background datasets.
pub fn prepare(cfg: &PipelineConfig) -> Result<Vec<CellCounts>> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let ids = list_images(&cfg.masks_dir)?;
    let s = cfg.splits;
    let splits = assign_splits(&ids, cfg.seed, s.train, s.val, s.fit);
    for split in [Split::Train, Split::Val] {
        if splits.ids(split).is_empty() {
            return Err(Error::Validation(format!(
                "the {split} split is empty with {} images; raise its fraction",
                ids.len()
            )));
        }
    }
    write_text(&layout.splits(), &splits.to_csv())?;
    let thresholds = cfg.labels.thresholds()?;

    let mut counts = Vec::new();
    for split in [Split::Train, Split::Val] {
        let per_image_labels = per_image(cfg, splits.ids(split), |id| {
            let (maps, mask) = load_image(cfg, id)?;
            let labels = maps
                .iter()
                .map(|m| {
                    let rf = ReceptiveField::new(m.downsample(), cfg.labels.radius(m.layer_id()));
                    assign_feature_labels(&score_receptive_fields(&mask, rf, m.shape())?, thresholds)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((maps, labels))
        })?;
        for (li, &layer) in cfg.layers.iter().enumerate() {
            let maps: Vec<FeatureMap> = per_image_labels.iter().map(|(m, _)| m[li].clone()).collect();
            let labels: Vec<_> = per_image_labels.iter().map(|(_, l)| l[li].clone()).collect();
            let ds = collect_background_features(&maps, &labels)?;
            if ds.is_empty() {
                return Err(Error::Validation(format!(
                    "layer {layer}: no background cells in the {split} split. Masks mark background with 1; \
                     check them or lower labels.bg_threshold"
                )));
            }
            let tally = |c: CellLabel| labels.iter().map(|g| g.count(c)).sum();
            counts.push(CellCounts {
                layer,
                split,
                background: tally(CellLabel::Background),
                mixed: tally(CellLabel::Mixed),
                foreground: tally(CellLabel::Foreground),
            });
            let p = layout.dataset(layer, split);
            create_dir(p.parent().unwrap())?;
            write_dataset(&ds, &p).map_err(at_path(&p))?;
        }
    }
    let mut summary = String::from("layer,split,background,mixed,foreground\n");
    for c in &counts {
        writeln!(summary, "{},{},{},{},{}", c.layer, c.split, c.background, c.mixed, c.foreground).unwrap();
    }
    write_text(&layout.prepare_summary(), &summary)?;
    Ok(counts)
}

// ---------------------------------------------------------------- models

/// Per-layer estimators and calibrations of one family, aligned with the
/// configured layer list.
pub struct ScoringModels {
    pub estimator: Estimator,
    pub layers: Vec<u32>,
    flows: Vec<FlowModel>,
    knns: Vec<KnnIndex>,
    pub calibrations: Vec<LayerCalibration>,
    k: usize,
}

impl ScoringModels {
    pub fn load(cfg: &PipelineConfig, est: Estimator) -> Result<Self> {
        let layout = Layout::new(cfg);
        let mut models = Self::load_uncalibrated(cfg, est)?;
        let p = layout.calibration(est);
        let cals = read_calibrations(&p).map_err(at_path(&p))?;
        models.calibrations = cfg
            .layers
            .iter()
            .map(|&l| {
                cals.iter().find(|c| c.layer_id == l).copied().ok_or_else(|| {
                    Error::Validation(format!("{} has no entry for layer {l}; rerun train", p.display()))
                })
            })
            .collect::<Result<_>>()?;
        Ok(models)
    }

    fn load_uncalibrated(cfg: &PipelineConfig, est: Estimator) -> Result<Self> {
        let layout = Layout::new(cfg);
        let mut flows = Vec::new();
        let mut knns = Vec::new();
        for &l in &cfg.layers {
            let p = layout.model(est, l);
            match est {
                Estimator::Flow => flows.push(read_model(&p).map_err(at_path(&p))?),
                Estimator::Knn => knns.push(read_index(&p).map_err(at_path(&p))?),
            }
        }
        Ok(Self { estimator: est, layers: cfg.layers.clone(), flows, knns, calibrations: Vec::new(), k: cfg.k })
    }

    fn layer_estimator(&self, li: usize) -> LayerEstimator<'_> {
        match self.estimator {
            Estimator::Flow => LayerEstimator::Flow(&self.flows[li]),
            Estimator::Knn => LayerEstimator::Knn { index: &self.knns[li], k: self.k },
        }
    }

    pub fn raw_nll(&self, li: usize, map: &FeatureMap) -> Result<Grid> {
        self.layer_estimator(li).nll_grid(map)
    }

    /// Calibrated grid of every layer, at feature resolution.
    pub fn normalized_grids(&self, maps: &[FeatureMap]) -> Result<Vec<Grid>> {
        let inputs: Vec<LayerInput<'_>> = maps
            .iter()
            .enumerate()
            .map(|(li, map)| LayerInput { map, estimator: self.layer_estimator(li), calibration: &self.calibrations[li] })
            .collect();
        normalized_layer_grids(&inputs)
    }
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub estimator: Estimator,
    pub layer: u32,
    pub epochs: usize,
    pub best_epoch: usize,
    pub calibration: LayerCalibration,
}

fn strided_sample(ds: &FeatureDataset, cap: usize) -> Vec<Vec<f64>> {
    let step = ds.len().div_ceil(cap).max(1);
    (0..ds.len())
        .step_by(step)
        .map(|k| ds.vector(k).iter().map(|&v| f64::from(v)).collect())
        .collect()
}

/// Fits every configured estimator on every layer and estimates the
/// calibration constants.
pub fn train(cfg: &PipelineConfig) -> Result<Vec<TrainSummary>> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    create_dir(&layout.out.join("models"))?;
    let mut summaries = Vec::new();
    for est in cfg.estimator.estimators() {
        let mut epochs = Vec::new();
        for &layer in &cfg.layers {
            let stage = format!("train {est} layer {layer}");
            let load = |s: Split| {
                let p = layout.dataset(layer, s);
                read_dataset(&p).map_err(at_path(&p))
            };
            let (train_ds, val_ds) = (load(Split::Train)?, load(Split::Val)?);
            let p = layout.model(est, layer);
            match est {
                Estimator::Flow => {
                    let tc = cfg.flow.train_config(cfg.layer_seed(layer));
                    let (model, log) = train_with_validation(&train_ds, &val_ds, &tc).map_err(|e| e.in_stage(&stage))?;
                    log::info!(
                        "{stage}: {} epochs, best {} (val NLL {:.4})",
                        log.epochs.len(),
                        log.best_epoch,
                        log.best_val_nll()
                    );
                    epochs.push((log.epochs.len(), log.best_epoch));
                    write_model(&model, &p).map_err(at_path(&p))?;
                    write_text(&layout.training_log(layer), &log.to_csv())?;
                }
                Estimator::Knn => {
                    let kept: Vec<usize> = (0..train_ds.len()).step_by(cfg.knn_stride).collect();
                    let index = KnnIndex::build(&train_ds.select(&kept)).map_err(|e| e.in_stage(&stage))?;
                    if cfg.k > index.len() {
                        return Err(Error::Validation(format!(
                            "{stage}: k = {} exceeds the {} stored vectors",
                            cfg.k,
                            index.len()
                        )));
                    }
                    epochs.push((0, 0));
                    write_index(&index, &p).map_err(at_path(&p))?;
                }
            }
        }
        // Calibration reads the models back from disk so that it sees exactly
        // what later stages will use.
        let models = ScoringModels::load_uncalibrated(cfg, est)?;
        let mut cals = Vec::new();
        for (li, &layer) in cfg.layers.iter().enumerate() {
            let nlls = |split: Split, cap: usize| -> Result<Vec<f64>> {
                let p = layout.dataset(layer, split);
                let rows = strided_sample(&read_dataset(&p).map_err(at_path(&p))?, cap);
                match est {
                    Estimator::Flow => rows.iter().map(|x| models.flows[li].nll(x)).collect(),
                    Estimator::Knn => rows.iter().map(|x| models.knns[li].score(x, cfg.k).map(|s| -s.ln())).collect(),
                }
            };
            let train_nll = nlls(Split::Train, CALIBRATION_SAMPLE)?;
            let val_nll = nlls(Split::Val, usize::MAX)?;
            let calibration = LayerCalibration::fit(layer, &train_nll, &val_nll)
                .map_err(|e| e.in_stage(format!("calibrate {est} layer {layer}")))?;
            cals.push(calibration);
            let (epochs, best_epoch) = epochs[li];
            summaries.push(TrainSummary { estimator: est, layer, epochs, best_epoch, calibration });
        }
        let p = layout.calibration(est);
        create_dir(p.parent().unwrap())?;
        write_calibrations(&cals, &p).map_err(at_path(&p))?;
    }
    Ok(summaries)
}

// ---------------------------------------------------------------- fusion

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub estimator: Estimator,
    pub fusion: FusionModel,
    pub layer_auroc: Vec<(u32, f64)>,
    pub fused_auroc: f64,
    pub threshold: f64,
    pub converged: bool,
}

impl FitReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("estimator={}\nmode={}\n", self.estimator, self.fusion.mode().as_str());
        for (l, a) in &self.layer_auroc {
            writeln!(out, "layer={l}, fit_auroc={a}").unwrap();
        }
        writeln!(out, "layer=fused, fit_auroc={}", self.fused_auroc).unwrap();
        writeln!(out, "threshold={}\nconverged={}", self.threshold, self.converged).unwrap();
        out
    }
}

fn pool_pixels(maps: &[LikelihoodMap], masks: &[PixelMask]) -> Result<ScoredPixels> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (m, k) in maps.iter().zip(masks) {
        let px = ScoredPixels::from_map(m, k)?;
        scores.extend_from_slice(px.scores());
        labels.extend_from_slice(px.labels());
    }
    ScoredPixels::new(scores, labels)
}

/// Fits the fusion on the fitting split and fixes the default threshold.
pub fn fit_fusion(cfg: &PipelineConfig) -> Result<Vec<FitReport>> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let splits = read_splits(&layout)?;
    let ids = splits.ids(Split::Fit);
    if ids.is_empty() {
        return Err(Error::Validation("the fit split is empty; raise splits.fit".into()));
    }
    let stride = cfg.fusion.pixel_stride;
    let mut reports = Vec::new();
    for est in cfg.estimator.estimators() {
        let models = ScoringModels::load(cfg, est)?;
        // Per image: the ground truth and every layer at pixel resolution.
        let images = per_image(cfg, ids, |id| {
            let (maps, mask) = load_image(cfg, id)?;
            let grids = models.normalized_grids(&maps)?;
            let up = grids
                .iter()
                .map(|g| bilinear_upsample(g, mask.height(), mask.width()))
                .collect::<Result<Vec<_>>>()?;
            Ok((grids, up, mask))
        })?;

        let (fusion, converged) = match cfg.fusion.mode {
            FusionMode::Min => (FusionModel::Min, true),
            FusionMode::Max => (FusionModel::Max, true),
            FusionMode::Logistic => {
                let mut samples = Vec::new();
                for (_, up, mask) in &images {
                    for i in (0..mask.height()).step_by(stride) {
                        for j in (0..mask.width()).step_by(stride) {
                            let v: Vec<f64> = up.iter().map(|g| g.get(i, j)).collect();
                            samples.push(FusionSample::new(v, !mask.is_background(i, j)));
                        }
                    }
                }
                let fit = fit_logistic(&samples, &LogisticConfig::default())
                    .map_err(|e| e.in_stage(format!("fit-fusion {est}")))?;
                log::info!("{est}: logistic fit after {} iterations, converged={}", fit.iterations, fit.converged);
                (fit.model, fit.converged)
            }
        };
        let masks: Vec<PixelMask> = images.iter().map(|(_, _, m)| m.clone()).collect();
        let mut layer_auroc = Vec::new();
        for (li, &l) in cfg.layers.iter().enumerate() {
            let maps: Vec<LikelihoodMap> = images.iter().map(|(_, up, _)| up[li].clone()).collect();
            layer_auroc.push((l, auroc(&pool_pixels(&maps, &masks)?)?));
        }
        let fused: Vec<LikelihoodMap> = images
            .iter()
            .map(|(grids, _, m)| fuse_to_pixels(grids, &fusion, m.height(), m.width()))
            .collect::<Result<_>>()?;
        let fused_px = pool_pixels(&fused, &masks)?;
        let report = FitReport {
            estimator: est,
            layer_auroc,
            fused_auroc: auroc(&fused_px)?,
            threshold: threshold_at_tpr(&fused_px, cfg.fusion.target_tpr)?,
            fusion,
            converged,
        };
        write_fusion(&report.fusion, layout.fusion(est)).map_err(at_path(&layout.fusion(est)))?;
        write_text(&layout.threshold(est), &format!("{}\n", report.threshold))?;
        write_text(&layout.fit_report(est), &report.to_text())?;
        reports.push(report);
    }
    Ok(reports)
}

// ---------------------------------------------------------------- segment

pub fn read_threshold(p: &Path) -> Result<f64> {
    let text = read_text(p)?;
    text.trim()
        .parse::<f64>()
        .ok()
        .filter(|t| t.is_finite())
        .ok_or_else(|| Error::Format(format!("{} does not hold a finite threshold", p.display())))
}

/// Segments `ids`, or the test split when `ids` is `None`, and returns the
/// ids processed.
pub fn segment(cfg: &PipelineConfig, ids: Option<&[String]>) -> Result<Vec<String>> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let available = list_images(&cfg.masks_dir)?;
    let ids: Vec<String> = match ids {
        Some(ids) => {
            for id in ids {
                if !available.contains(id) {
                    return Err(Error::Validation(format!(
                        "unknown image id {id:?}; available: {}",
                        available.join(", ")
                    )));
                }
            }
            ids.to_vec()
        }
        None => read_splits(&layout)?.ids(Split::Test).to_vec(),
    };
    for est in cfg.estimator.estimators() {
        let models = ScoringModels::load(cfg, est)?;
        let fusion = read_fusion(layout.fusion(est)).map_err(at_path(&layout.fusion(est)))?;
        let tau = read_threshold(&layout.threshold(est))?;
        create_dir(&layout.segment_dir(est))?;
        per_image(cfg, &ids, |id| {
            let (maps, mask) = load_image(cfg, id)?;
            let (h, w) = mask.shape();
            let grids = models.normalized_grids(&maps)?;
            let fused = fuse_to_pixels(&grids, &fusion, h, w)?;
            let seg = threshold_map(&fused, tau);
            let p = layout.likelihood(est, id);
            write_feature_map(&likelihood_to_feature_map(&fused, id)?, &p).map_err(at_path(&p))?;
            let p = layout.predicted_mask(est, id);
            write_mask(&seg.to_pixel_mask(), &p).map_err(at_path(&p))?;
            for (g, &l) in grids.iter().zip(&cfg.layers) {
                let up = bilinear_upsample(g, h, w)?;
                let fm = FeatureMap::new(
                    l,
                    h,
                    w,
                    1,
                    1,
                    up.values().iter().map(|&v| v as f32).collect(),
                    id,
                )?;
                let p = layout.layer_likelihood(est, id, l);
                write_feature_map(&fm, &p).map_err(at_path(&p))?;
            }
            Ok(())
        })?;
    }
    Ok(ids)
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalRowKind {
    Layer(u32),
    Fused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub estimator: Estimator,
    pub kind: EvalRowKind,
    pub report: MetricsReport,
}

impl EvalRow {
    pub fn label(&self, layers: &[u32]) -> String {
        let name = match self.estimator {
            Estimator::Flow => "Flow",
            Estimator::Knn => "kNN",
        };
        match self.kind {
            EvalRowKind::Layer(l) => format!("{name} layer {l}"),
            EvalRowKind::Fused => {
                let ls: Vec<String> = layers.iter().map(u32::to_string).collect();
                format!("{name} Ensemble {}", ls.join("+"))
            }
        }
    }
}

fn map_to_grid(map: &FeatureMap) -> Result<Grid> {
    Grid::new(map.grid_h(), map.grid_w(), map.values().iter().map(|&v| f64::from(v)).collect())
}

/// Scores the segmented test images against their ground truth.
pub fn evaluate(cfg: &PipelineConfig) -> Result<Vec<EvalRow>> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let ids = read_splits(&layout)?.ids(Split::Test).to_vec();
    if ids.is_empty() {
        return Err(Error::Validation("the test split is empty; lower the other split fractions".into()));
    }
    let mut rows = Vec::new();
    for est in cfg.estimator.estimators() {
        let per = per_image(cfg, &ids, |id| {
            let mp = mask_path(&cfg.masks_dir, id);
            if !mp.exists() {
                return Err(Error::Validation(format!("missing ground truth {}", mp.display())));
            }
            let truth = load_mask(&cfg.masks_dir, id)?;
            let read = |p: PathBuf| -> Result<Grid> {
                if !p.exists() {
                    return Err(Error::Validation(format!("missing {}; run segment first", p.display())));
                }
                map_to_grid(&read_feature_map(&p).map_err(at_path(&p))?)
            };
            let fused = read(layout.likelihood(est, id))?;
            let layers =
                cfg.layers.iter().map(|&l| read(layout.layer_likelihood(est, id, l))).collect::<Result<Vec<_>>>()?;
            Ok((truth, fused, layers))
        })?;
        let masks: Vec<PixelMask> = per.iter().map(|(m, _, _)| m.clone()).collect();
        let mut kinds: Vec<EvalRowKind> = cfg.layers.iter().map(|&l| EvalRowKind::Layer(l)).collect();
        kinds.push(EvalRowKind::Fused);
        for (ki, kind) in kinds.into_iter().enumerate() {
            let maps: Vec<Grid> = per
                .iter()
                .map(|(_, f, ls)| if kind == EvalRowKind::Fused { f.clone() } else { ls[ki].clone() })
                .collect();
            let report = MetricsReport::compute(&pool_pixels(&maps, &masks)?)?;
            write_text(&layout.eval_report(est, &kind), &format!("{}\n", report.to_kv()))?;
            rows.push(EvalRow { estimator: est, kind, report });
        }
    }
    write_text(&layout.eval_table(), &format_table(&rows, &cfg.layers))?;
    Ok(rows)
}

/// Rows of estimator and layer, columns of the four metrics in percent.
pub fn format_table(rows: &[EvalRow], layers: &[u32]) -> String {
    let mut out = format!("{:<28} {:>10} {:>7} {:>7} {:>7}\n", "Method", "FPR@95%TPR", "AR", "AP", "AUROC");
    for r in rows {
        let m = &r.report;
        writeln!(
            out,
            "{:<28} {:>10.1} {:>7.1} {:>7.1} {:>7.3}",
            r.label(layers),
            100.0 * m.fpr_at_95tpr,
            100.0 * m.average_recall,
            100.0 * m.average_precision,
            m.auroc
        )
        .unwrap();
    }
    out.push_str("AR is the mean TPR over 101 evenly spaced thresholds between the lowest and highest score.\n");
    out
}

// ---------------------------------------------------------------- bench

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub label: String,
    pub flow_ms_per_image: Option<f64>,
    pub knn_ms_per_image: Option<f64>,
    pub flow_bytes: Option<u64>,
    pub knn_bytes: Option<u64>,
}

impl BenchRow {
    pub fn to_line(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        let b = |v: Option<u64>| v.map_or("-".to_string(), |x| x.to_string());
        format!(
            "{}: flow_ms_per_image={}, knn_ms_per_image={}, flow_bytes={}, knn_bytes={}",
            self.label,
            f(self.flow_ms_per_image),
            f(self.knn_ms_per_image),
            b(self.flow_bytes),
            b(self.knn_bytes)
        )
    }
}

/// Median wall time of `repeats` runs, in milliseconds.
pub fn time_ms(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut times = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

fn file_len(p: &Path) -> Result<u64> {
    Ok(fs::metadata(p).map_err(|e| Error::from(e).in_stage(p.display().to_string()))?.len())
}

/// Times per-image scoring with the trained artifacts of each layer, then
/// the fixed desk-scale scenario if enabled.
pub fn bench(cfg: &PipelineConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut rows = Vec::new();
    let splits = read_splits(&layout)?;
    let ids = splits.ids(Split::Test);
    let ids = if ids.is_empty() { splits.ids(Split::Val) } else { ids };
    for &layer in &cfg.layers {
        let mut row =
            BenchRow { label: format!("layer {layer}"), flow_ms_per_image: None, knn_ms_per_image: None, flow_bytes: None, knn_bytes: None };
        let maps = ids.iter().map(|id| load_feature_map(&cfg.features_dir, id, layer)).collect::<Result<Vec<_>>>()?;
        let flow_path = layout.flow_model(layer);
        if flow_path.exists() {
            let model = read_model(&flow_path).map_err(at_path(&flow_path))?;
            let t = time_ms(cfg.bench.repeats, || maps.iter().try_for_each(|m| model.score_feature_map(m).map(drop)))?;
            row.flow_ms_per_image = Some(t / maps.len() as f64);
            row.flow_bytes = Some(file_len(&flow_path)?);
        }
        let knn_path = layout.knn_index(layer);
        if knn_path.exists() {
            let index = read_index(&knn_path).map_err(at_path(&knn_path))?;
            let t = time_ms(cfg.bench.repeats, || {
                maps.iter().try_for_each(|m| LayerEstimator::Knn { index: &index, k: cfg.k }.nll_grid(m).map(drop))
            })?;
            row.knn_ms_per_image = Some(t / maps.len() as f64);
            row.knn_bytes = Some(file_len(&knn_path)?);
        }
        if row.flow_bytes.is_none() && row.knn_bytes.is_none() {
            return Err(Error::Validation(format!("no trained artifacts for layer {layer}; run train first")));
        }
        rows.push(row);
    }
    if cfg.bench.scenario {
        rows.push(crate::bench::scenario(&cfg.bench, cfg.k, cfg.seed)?);
    }
    let text: String = rows.iter().map(|r| r.to_line() + "\n").collect();
    write_text(&layout.bench(), &text)?;
    Ok(rows)
}

// ---------------------------------------------------------------- synthetic

/// Downsample factors of the synthetic layers.
pub fn synthetic_layer(layer_id: u32) -> Result<SyntheticLayer> {
    let downsample = match layer_id {
        3 => 4,
        4 | 6 => 8,
        5 => 16,
        other => {
            return Err(Error::Validation(format!("the synthetic corpus has layers 3, 4, 5, 6; got {other}")))
        }
    };
    Ok(SyntheticLayer { layer_id, downsample })
}

/// Writes a synthetic corpus and a ready-to-run `config.json` into `dir`.
pub fn gen_synthetic(cfg: &PipelineConfig, dir: &Path) -> Result<PipelineConfig> {
    cfg.validate()?;
    let mut sc = cfg.synthetic.to_config(cfg.seed);
    sc.layers = cfg.layers.iter().map(|&l| synthetic_layer(l)).collect::<Result<_>>()?;
    let corpus = generate(&sc)?;
    let features = dir.join("features");
    let masks = dir.join("masks");
    create_dir(&features)?;
    create_dir(&masks)?;
    for img in &corpus.images {
        let p = mask_path(&masks, &img.image_id);
        write_mask(&img.mask, &p).map_err(at_path(&p))?;
        for m in &img.maps {
            let p = feature_path(&features, &img.image_id, m.layer_id());
            write_feature_map(m, &p).map_err(at_path(&p))?;
        }
    }
    let run_cfg = PipelineConfig {
        features_dir: PathBuf::from("features"),
        masks_dir: PathBuf::from("masks"),
        out_dir: PathBuf::from("run"),
        ..cfg.clone()
    };
    write_text(&dir.join("config.json"), &run_cfg.to_json())?;
    Ok(PipelineConfig { features_dir: features, masks_dir: masks, out_dir: dir.join("run"), ..cfg.clone() })
}
