//! Per-layer NLL calibration and multi-layer fusion.
//!
//! NLL values of different layers live on different scales, so each layer's
//! grid is first centered on the mean training NLL of that layer, then
//! standardized with the mean and standard deviation of the centered NLL on
//! a validation set. Calibrated grids are fused per cell by minimum (all
//! layers must agree), maximum (any layer suffices), or a logistic regression
//! fitted on labelled cells.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::io_util::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerCalibration {
    pub layer_id: u32,
    /// Mean NLL of the layer's training features.
    pub train_mean_nll: f64,
    /// Mean of the centered validation NLL.
    pub val_mean: f64,
    /// Population standard deviation of the centered validation NLL.
    pub val_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl LayerCalibration {
    pub fn new(layer_id: u32, train_mean_nll: f64, val_mean: f64, val_std: f64) -> Result<Self> {
        let c = Self { layer_id, train_mean_nll, val_mean, val_std };
        c.validate()?;
        Ok(c)
    }

    /// Estimates the constants from the NLL of training features and the
    /// NLL values observed on validation data.
    pub fn fit(layer_id: u32, train_nll: &[f64], val_nll: &[f64]) -> Result<Self> {
        if train_nll.is_empty() || val_nll.is_empty() {
            return Err(Error::validation(format!("layer {layer_id}: calibration needs training and validation NLLs")));
        }
        let train_mean_nll = train_nll.iter().sum::<f64>() / train_nll.len() as f64;
        let centered: Vec<f64> = val_nll.iter().map(|v| v - train_mean_nll).collect();
        let (val_mean, val_std) = mean_std(&centered);
        Self::new(layer_id, train_mean_nll, val_mean, val_std)
    }

    fn validate(&self) -> Result<()> {
        if !(self.train_mean_nll.is_finite() && self.val_mean.is_finite() && self.val_std.is_finite()) {
            return Err(Error::validation(format!("layer {}: non-finite calibration constants", self.layer_id)));
        }
        if self.val_std <= 0.0 {
            return Err(Error::validation(format!("layer {}: validation std must be positive", self.layer_id)));
        }
        Ok(())
    }

    /// Centers then normalizes a raw NLL grid of this layer.
    pub fn apply(&self, nll: &Grid, layer_id: u32) -> Result<Grid> {
        normalize_nll(&center_nll(nll, layer_id, self)?, self)
    }
}

/// `N - L(Z_l)` elementwise.
pub fn center_nll(nll: &Grid, layer_id: u32, calibration: &LayerCalibration) -> Result<Grid> {
    if layer_id != calibration.layer_id {
        return Err(Error::validation(format!(
            "grid of layer {layer_id} with calibration of layer {}",
            calibration.layer_id
        )));
    }
    let m = calibration.train_mean_nll;
    Ok(nll.map(|v| v - m))
}

/// `(N - mu_l) / sigma_l` elementwise.
pub fn normalize_nll(centered: &Grid, calibration: &LayerCalibration) -> Result<Grid> {
    if !(calibration.val_std > 0.0) {
        return Err(Error::validation("validation std must be positive"));
    }
    let (mu, sigma) = (calibration.val_mean, calibration.val_std);
    Ok(centered.map(|v| (v - mu) / sigma))
}

fn check_shapes(grids: &[Grid]) -> Result<(usize, usize)> {
    let first = grids.first().ok_or_else(|| Error::validation("fusion needs at least one layer"))?;
    for g in grids {
        if g.shape() != first.shape() {
            return Err(Error::dims(format!("fusing grids of shape {:?} and {:?}", first.shape(), g.shape())));
        }
    }
    Ok(first.shape())
}

fn fuse_with(grids: &[Grid], init: f64, f: fn(f64, f64) -> f64) -> Result<Grid> {
    let (h, w) = check_shapes(grids)?;
    let mut out = vec![init; h * w];
    for g in grids {
        for (o, &v) in out.iter_mut().zip(g.values()) {
            *o = f(*o, v);
        }
    }
    Grid::new(h, w, out)
}

/// Elementwise minimum: a cell scores high only if every layer does.
pub fn fuse_min(grids: &[Grid]) -> Result<Grid> {
    fuse_with(grids, f64::INFINITY, f64::min)
}

/// Elementwise maximum: a cell scores high if any layer does.
pub fn fuse_max(grids: &[Grid]) -> Result<Grid> {
    fuse_with(grids, f64::NEG_INFINITY, f64::max)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionMode {
    Min,
    Max,
    Logistic,
}

impl FusionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::Min => "min",
            FusionMode::Max => "max",
            FusionMode::Logistic => "logistic",
        }
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "min" => Ok(FusionMode::Min),
            "max" => Ok(FusionMode::Max),
            "logistic" => Ok(FusionMode::Logistic),
            other => Err(Error::validation(format!("unknown fusion mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FusionModel {
    Min,
    Max,
    /// `sigmoid(w . v + b)` with one weight per layer.
    Logistic { weights: Vec<f64>, bias: f64 },
}

impl FusionModel {
    pub fn mode(&self) -> FusionMode {
        match self {
            FusionModel::Min => FusionMode::Min,
            FusionModel::Max => FusionMode::Max,
            FusionModel::Logistic { .. } => FusionMode::Logistic,
        }
    }

    /// The unfitted logistic model, which outputs 0.5 everywhere.
    pub fn zero_logistic(layers: usize) -> Self {
        FusionModel::Logistic { weights: vec![0.0; layers], bias: 0.0 }
    }

    /// Fused score of one cell from its per-layer values.
    pub fn fuse_values(&self, values: &[f64]) -> Result<f64> {
        match self {
            FusionModel::Min => Ok(values.iter().copied().fold(f64::INFINITY, f64::min)),
            FusionModel::Max => Ok(values.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
            FusionModel::Logistic { weights, bias } => {
                if weights.len() != values.len() {
                    return Err(Error::dims(format!("{} layer values for {} weights", values.len(), weights.len())));
                }
                Ok(sigmoid(weights.iter().zip(values).map(|(w, v)| w * v).sum::<f64>() + bias))
            }
        }
    }

    pub fn fuse(&self, grids: &[Grid]) -> Result<Grid> {
        match self {
            FusionModel::Min => fuse_min(grids),
            FusionModel::Max => fuse_max(grids),
            FusionModel::Logistic { .. } => fuse_logistic(grids, self),
        }
    }
}

/// Per-cell logistic fusion; output strictly inside (0, 1).
pub fn fuse_logistic(grids: &[Grid], model: &FusionModel) -> Result<Grid> {
    let FusionModel::Logistic { weights, .. } = model else {
        return Err(Error::validation("fuse_logistic needs a logistic fusion model"));
    };
    if weights.len() != grids.len() {
        return Err(Error::dims(format!("{} layer grids for {} fusion weights", grids.len(), weights.len())));
    }
    let (h, w) = check_shapes(grids)?;
    let mut cell = vec![0.0; grids.len()];
    let mut out = Vec::with_capacity(h * w);
    for c in 0..h * w {
        for (v, g) in cell.iter_mut().zip(grids) {
            *v = g.values()[c];
        }
        out.push(model.fuse_values(&cell)?);
    }
    Grid::new(h, w, out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticConfig {
    /// L2 penalty on the weights (not the bias).
    pub l2: f64,
    pub max_iterations: usize,
    /// Stop once the gradient max-norm falls below this.
    pub tolerance: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self { l2: 1e-3, max_iterations: 500, tolerance: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub model: FusionModel,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

/// One labelled fitting sample: normalized per-layer values and whether the
/// cell is foreground (the positive class).
#[derive(Debug, Clone, PartialEq)]
pub struct FusionSample {
    pub values: Vec<f64>,
    pub foreground: bool,
}

impl FusionSample {
    pub fn new(values: Vec<f64>, foreground: bool) -> Self {
        Self { values, foreground }
    }
}

struct Objective<'a> {
    samples: &'a [FusionSample],
    l2: f64,
}

impl Objective<'_> {
    fn value(&self, w: &[f64], b: f64) -> f64 {
        let n = self.samples.len() as f64;
        let data: f64 = self
            .samples
            .iter()
            .map(|s| {
                let z = w.iter().zip(&s.values).map(|(a, v)| a * v).sum::<f64>() + b;
                softplus(z) - if s.foreground { z } else { 0.0 }
            })
            .sum();
        data / n + 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>()
    }

    /// Gradient as `(dw, db)`.
    fn gradient(&self, w: &[f64], b: f64) -> (Vec<f64>, f64) {
        let n = self.samples.len() as f64;
        let mut gw = vec![0.0; w.len()];
        let mut gb = 0.0;
        for s in self.samples {
            let z = w.iter().zip(&s.values).map(|(a, v)| a * v).sum::<f64>() + b;
            let r = sigmoid(z) - f64::from(u8::from(s.foreground));
            for (g, v) in gw.iter_mut().zip(&s.values) {
                *g += r * v;
            }
            gb += r;
        }
        for (g, wv) in gw.iter_mut().zip(w) {
            *g = *g / n + self.l2 * wv;
        }
        (gw, gb / n)
    }

    /// Hessian over `(w, b)`, row-major `(L + 1) x (L + 1)`.
    fn hessian(&self, w: &[f64], b: f64) -> Vec<f64> {
        let n = w.len() + 1;
        let mut h = vec![0.0; n * n];
        let mut x = vec![1.0; n];
        for s in self.samples {
            x[..w.len()].copy_from_slice(&s.values);
            let z = w.iter().zip(&s.values).map(|(a, v)| a * v).sum::<f64>() + b;
            let p = sigmoid(z);
            let c = p * (1.0 - p);
            for i in 0..n {
                for j in 0..=i {
                    h[i * n + j] += c * x[i] * x[j];
                }
            }
        }
        let m = self.samples.len() as f64;
        for i in 0..n {
            for j in 0..=i {
                h[i * n + j] /= m;
                h[j * n + i] = h[i * n + j];
            }
        }
        for i in 0..w.len() {
            h[i * n + i] += self.l2;
        }
        h
    }
}

/// Solves `a x = rhs` for symmetric positive definite `a` (row-major `n x n`)
/// by Cholesky factorization; `None` if `a` is not positive definite.
fn cholesky_solve(a: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let n = rhs.len();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (rhs[i] - (0..i).map(|k| l[i * n + k] * y[k]).sum::<f64>()) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k * n + i] * x[k]).sum::<f64>()) / l[i * n + i];
    }
    Some(x)
}

/// Fits `P(foreground | v) = sigmoid(w . v + b)` by damped Newton steps with
/// backtracking line search, starting from zero. Newton steps are
/// insensitive to the very different scales that normalized NLLs can take.
///
/// Hitting the iteration cap is not an error: the last iterate is returned
/// with `converged == false`.
pub fn fit_logistic(samples: &[FusionSample], config: &LogisticConfig) -> Result<LogisticFit> {
    let first = samples.first().ok_or_else(|| Error::validation("no fitting samples"))?;
    let layers = first.values.len();
    if layers == 0 || samples.iter().any(|s| s.values.len() != layers) {
        return Err(Error::dims("fitting samples must share a non-zero layer count"));
    }
    if samples.iter().any(|s| s.values.iter().any(|v| !v.is_finite())) {
        return Err(Error::validation("non-finite fitting sample"));
    }
    let n_pos = samples.iter().filter(|s| s.foreground).count();
    if n_pos == 0 || n_pos == samples.len() {
        return Err(Error::validation("logistic fit needs both foreground and background samples"));
    }

    let obj = Objective { samples, l2: config.l2 };
    let n = layers + 1;
    let mut w = vec![0.0; layers];
    let mut b = 0.0;
    let mut f = obj.value(&w, b);
    let mut iterations = 0;
    let mut grad_norm;
    loop {
        let (gw, gb) = obj.gradient(&w, b);
        grad_norm = gw.iter().fold(gb.abs(), |m, g| m.max(g.abs()));
        if grad_norm < config.tolerance || iterations >= config.max_iterations {
            break;
        }
        let g: Vec<f64> = gw.iter().copied().chain(std::iter::once(gb)).collect();
        let hess = obj.hessian(&w, b);
        // Levenberg damping until the system is positive definite.
        let mut damping = 0.0;
        let dir = loop {
            let mut a = hess.clone();
            for i in 0..n {
                a[i * n + i] += damping;
            }
            match cholesky_solve(&a, &g) {
                Some(d) if d.iter().all(|v| v.is_finite()) => break d,
                _ => damping = if damping == 0.0 { 1e-10 } else { damping * 10.0 },
            }
            if damping > 1e10 {
                break g.clone();
            }
        };
        let slope: f64 = g.iter().zip(&dir).map(|(a, d)| a * d).sum();
        let mut t = 1.0;
        loop {
            let w_new: Vec<f64> = w.iter().zip(&dir).map(|(a, d)| a - t * d).collect();
            let b_new = b - t * dir[layers];
            let f_new = obj.value(&w_new, b_new);
            if f_new <= f - 1e-4 * t * slope || t < 1e-12 {
                w = w_new;
                b = b_new;
                f = f_new;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
    }
    let converged = grad_norm < config.tolerance;
    if !converged {
        log::warn!("logistic fusion did not converge in {iterations} iterations (grad {grad_norm:e})");
    }
    Ok(LogisticFit { model: FusionModel::Logistic { weights: w, bias: b }, iterations, converged, grad_norm })
}

/// Plain-text `layer_id,train_mean,val_mean,val_std` lines.
pub fn write_calibrations(cals: &[LayerCalibration], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for c in cals {
        writeln!(out, "{},{},{},{}", c.layer_id, c.train_mean_nll, c.val_mean, c.val_std).unwrap();
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

pub fn parse_calibrations(text: &str) -> Result<Vec<LayerCalibration>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() != 4 {
                return Err(Error::format(format!("calibration line {line:?} needs 4 fields")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format(format!("bad number {s:?}")));
            let layer = parts[0].parse::<u32>().map_err(|_| Error::format(format!("bad layer id {:?}", parts[0])))?;
            LayerCalibration::new(layer, num(parts[1])?, num(parts[2])?, num(parts[3])?)
        })
        .collect()
}

pub fn read_calibrations(path: impl AsRef<Path>) -> Result<Vec<LayerCalibration>> {
    parse_calibrations(&fs::read_to_string(path)?)
}

/// A `mode` line, followed for logistic fusion by `w_1,...,w_n,b`.
pub fn format_fusion(model: &FusionModel) -> String {
    let mut out = format!("{}\n", model.mode().as_str());
    if let FusionModel::Logistic { weights, bias } = model {
        let fields: Vec<String> = weights.iter().chain(std::iter::once(bias)).map(|v| v.to_string()).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_fusion(text: &str) -> Result<FusionModel> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let mode: FusionMode = lines.next().ok_or_else(|| Error::format("empty fusion file"))?.parse()?;
    match mode {
        FusionMode::Min => Ok(FusionModel::Min),
        FusionMode::Max => Ok(FusionModel::Max),
        FusionMode::Logistic => {
            let line = lines.next().ok_or_else(|| Error::format("logistic fusion file lacks weights"))?;
            let mut vals = line
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|_| Error::format(format!("bad number {s:?}"))))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() < 2 {
                return Err(Error::format("logistic fusion needs at least one weight and a bias"));
            }
            let bias = vals.pop().unwrap();
            Ok(FusionModel::Logistic { weights: vals, bias })
        }
    }
}

pub fn write_fusion(model: &FusionModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), format_fusion(model).as_bytes())
}

pub fn read_fusion(path: impl AsRef<Path>) -> Result<FusionModel> {
    parse_fusion(&fs::read_to_string(path)?)
}
