//! Property checks with independent oracles. Shared by this crate's
//! integration tests and the workspace acceptance suite, so each check
//! returns a short detail string instead of panicking.

#![allow(dead_code)]

use bgdensity::ensemble::{fit_logistic, fuse_max, fuse_min, FusionSample, LayerCalibration, LogisticConfig};
use bgdensity::feature_store::FeatureDataset;
use bgdensity::flow::{standard_normal_log_density, train_with_validation, FlowModel, TrainConfig};
use bgdensity::knn_density::{knn_score, KnnIndex};
use bgdensity::metrics::{auroc, average_precision, average_recall, fpr_at_tpr, ScoredPixels, AR_THRESHOLDS};
use bgdensity::Grid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// A flow whose every parameter is perturbed, with a random standardization,
/// so that no coupling is the identity.
pub fn random_model(dim: usize, chain: usize, hidden: usize, seed: u64, spread: f64) -> FlowModel {
    let mut model = FlowModel::init(dim, chain, hidden, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let params: Vec<f64> = model.parameters().iter().map(|p| p + spread * normal(&mut rng)).collect();
    model.set_parameters(&params).unwrap();
    let shift = normals(&mut rng, dim);
    let scale = (0..dim).map(|_| rng.random_range(0.5..2.0)).collect();
    model.set_standardization(shift, scale).unwrap();
    model
}

// ------------------------------------------------------------------ flow

pub fn flow_identity_closed_form() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &dim in &[2usize, 3, 8, 64] {
        let model = FlowModel::init(dim, 8, 16, dim as u64).map_err(|e| e.to_string())?;
        for _ in 0..20 {
            let x: Vec<f64> = normals(&mut rng, dim).iter().map(|v| 3.0 * v).collect();
            let got = model.log_prob(&x).map_err(|e| e.to_string())?;
            let want = standard_normal_log_density(&x);
            ensure(got == want, || format!("f={dim}: log p {got} != closed form {want}"))?;
        }
    }
    Ok("fresh flows give the standard normal log-density bit for bit".into())
}

pub fn flow_round_trip(dims: &[usize], models: usize) -> Check {
    let mut worst: f64 = 0.0;
    let mut worst_ld: f64 = 0.0;
    for &dim in dims {
        for m in 0..models {
            let seed = (dim * 1000 + m) as u64;
            let model = random_model(dim, 8, 32, seed, 0.1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..3 {
                let x = normals(&mut rng, dim);
                let (z, ld) = model.forward(&x).map_err(|e| e.to_string())?;
                let (back, ild) = model.inverse_with_logdet(&z).map_err(|e| e.to_string())?;
                let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst = worst.max(err);
                worst_ld = worst_ld.max((ld + ild).abs() / ld.abs().max(1.0));
            }
        }
    }
    ensure(worst < 1e-9, || format!("max round-trip error {worst:e}"))?;
    ensure(worst_ld < 1e-9, || format!("forward and inverse log-dets disagree by {worst_ld:e}"))?;
    Ok(format!("max |x - f^-1(f(x))| = {worst:.2e} over f in {dims:?}, {models} models each"))
}

/// `ln|det a|` by Gaussian elimination with partial pivoting.
fn log_abs_det(mut a: Vec<f64>, n: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i * n + c].abs().total_cmp(&a[j * n + c].abs())).unwrap();
        if p != c {
            for k in 0..n {
                a.swap(c * n + k, p * n + k);
            }
        }
        let pivot = a[c * n + c];
        total += pivot.abs().ln();
        for r in c + 1..n {
            let f = a[r * n + c] / pivot;
            for k in c..n {
                a[r * n + k] -= f * a[c * n + k];
            }
        }
    }
    total
}

pub fn flow_logdet_fd(max_dim: usize) -> Check {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for dim in 2..=max_dim {
        for m in 0..5 {
            let model = random_model(dim, 6, 16, (dim * 31 + m) as u64, 0.2);
            let mut rng = ChaCha8Rng::seed_from_u64(m as u64);
            let x = normals(&mut rng, dim);
            let (_, analytic) = model.forward(&x).map_err(|e| e.to_string())?;
            let mut jac = vec![0.0; dim * dim];
            for k in 0..dim {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let (zp, _) = model.forward(&xp).map_err(|e| e.to_string())?;
                let (zm, _) = model.forward(&xm).map_err(|e| e.to_string())?;
                for r in 0..dim {
                    jac[r * dim + k] = (zp[r] - zm[r]) / (2.0 * h);
                }
            }
            let numeric = log_abs_det(jac, dim);
            let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    ensure(worst < 1e-4, || format!("log-det relative error {worst:e}"))?;
    Ok(format!("log|det J| matches finite differences, worst relative error {worst:.2e}"))
}

pub fn flow_gradients_fd() -> Check {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (dim, seed) in [(2usize, 3u64), (4, 4), (5, 5)] {
        let model = random_model(dim, 3, 8, seed, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch: Vec<Vec<f64>> = (0..6).map(|_| normals(&mut rng, dim)).collect();
        let analytic = model.gradients(&batch).map_err(|e| e.to_string())?.flatten();
        let params = model.parameters();
        let mut probe = model.clone();
        for (i, &g) in analytic.iter().enumerate() {
            let mut p = params.clone();
            p[i] += h;
            probe.set_parameters(&p).unwrap();
            let up = probe.mean_nll(&batch).map_err(|e| e.to_string())?;
            p[i] -= 2.0 * h;
            probe.set_parameters(&p).unwrap();
            let down = probe.mean_nll(&batch).map_err(|e| e.to_string())?;
            let fd = (up - down) / (2.0 * h);
            // Relative error with a small absolute floor for vanishing gradients.
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-4);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    ensure(worst < 1e-4, || format!("gradient relative error {worst:e}"))?;
    Ok(format!("{checked} parameter gradients match central differences, worst relative error {worst:.2e}"))
}

pub fn flow_correctness() -> Check {
    let parts = [
        flow_identity_closed_form()?,
        flow_round_trip(&[2, 8, 64], 100)?,
        flow_logdet_fd(6)?,
        flow_gradients_fd()?,
    ];
    Ok(parts.join("; "))
}

// ------------------------------------------------------------ density

/// Two interleaved arcs of isotropic Gaussians.
pub struct MoonMixture {
    pub means: Vec<[f64; 2]>,
    pub std: f64,
}

impl MoonMixture {
    pub fn new() -> Self {
        let mut means = Vec::new();
        for k in 0..5 {
            let t = std::f64::consts::PI * k as f64 / 4.0;
            means.push([t.cos(), t.sin()]);
            means.push([1.0 - t.cos(), 0.5 - t.sin()]);
        }
        Self { means, std: 0.3 }
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        let v = self.std * self.std;
        let norm = 1.0 / (2.0 * std::f64::consts::PI * v * self.means.len() as f64);
        self.means
            .iter()
            .map(|m| (-((x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2)) / (2.0 * v)).exp())
            .sum::<f64>()
            * norm
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let m = self.means[rng.random_range(0..self.means.len())];
        vec![m[0] + self.std * normal(rng), m[1] + self.std * normal(rng)]
    }
}

/// Midpoint-rule grid over a box that holds all but a negligible share of
/// the mixture's mass.
pub struct QuadratureGrid {
    pub points: Vec<[f64; 2]>,
    pub cell_area: f64,
}

impl QuadratureGrid {
    pub fn new(lo: [f64; 2], hi: [f64; 2], step: f64) -> Self {
        let nx = ((hi[0] - lo[0]) / step).round() as usize;
        let ny = ((hi[1] - lo[1]) / step).round() as usize;
        let points = (0..nx)
            .flat_map(|i| (0..ny).map(move |j| [lo[0] + (i as f64 + 0.5) * step, lo[1] + (j as f64 + 0.5) * step]))
            .collect();
        Self { points, cell_area: step * step }
    }
}

fn dataset(rows: &[Vec<f64>]) -> FeatureDataset {
    FeatureDataset::from_vectors(0, rows[0].len(), rows).unwrap()
}

/// Trains on draws from `sample` and returns the flow and a held-out set.
pub fn train_flow(
    sample: impl Fn(&mut ChaCha8Rng) -> Vec<f64>,
    n: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(FlowModel, Vec<Vec<f64>>), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| sample(&mut rng)).collect();
    let n_val = n / 10;
    let (val, train) = rows.split_at(n_val);
    let held_out: Vec<Vec<f64>> = (0..n / 2).map(|_| sample(&mut rng)).collect();
    let (model, _) = train_with_validation(&dataset(train), &dataset(val), cfg).map_err(|e| e.to_string())?;
    Ok((model, held_out))
}

pub fn moon_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 256,
        max_epochs: 150,
        patience: 15,
        chain_length: 8,
        hidden_width: 32,
        ..TrainConfig::default()
    }
}

pub fn density_quality() -> Check {
    let moons = MoonMixture::new();
    let (model, held_out) = train_flow(|r| moons.sample(r), 20_000, &moon_train_config(), 11)?;
    let nll = model.mean_nll(&held_out).map_err(|e| e.to_string())?;

    let grid = QuadratureGrid::new([-2.5, -2.5], [3.5, 3.0], 0.02);
    let mut entropy = 0.0;
    let mut mass_true = 0.0;
    let mut mass_flow = 0.0;
    for p in &grid.points {
        let d = moons.density(p);
        if d > 0.0 {
            entropy -= d * d.ln() * grid.cell_area;
        }
        mass_true += d * grid.cell_area;
        mass_flow += model.log_prob(p).map_err(|e| e.to_string())?.exp() * grid.cell_area;
    }
    ensure((mass_true - 1.0).abs() < 1e-3, || format!("quadrature box misses mass: {mass_true}"))?;
    ensure((mass_flow - 1.0).abs() <= 0.01, || format!("flow density integrates to {mass_flow}"))?;
    let gap = nll - entropy;
    ensure(gap.abs() <= 0.15, || format!("held-out NLL {nll:.4} vs cross-entropy {entropy:.4} (gap {gap:.4})"))?;
    Ok(format!("held-out NLL {nll:.4}, quadrature entropy {entropy:.4}, gap {gap:.4}; flow mass {mass_flow:.4}"))
}

// ------------------------------------------------------------ metrics

pub fn oracle_auroc(s: &[f64], y: &[bool]) -> f64 {
    let mut num = 0.0;
    let (mut p, mut n) = (0.0, 0.0);
    for (i, &yi) in y.iter().enumerate() {
        if yi {
            p += 1.0;
        } else {
            n += 1.0;
        }
        if !yi {
            continue;
        }
        for (j, &yj) in y.iter().enumerate() {
            if !yj {
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / (p * n)
}

/// `(tpr, fpr, precision)` for the rule `score >= t`.
fn rates_at(s: &[f64], y: &[bool], t: f64) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut p, mut n) = (0.0, 0.0, 0.0, 0.0);
    for (&si, &yi) in s.iter().zip(y) {
        if yi {
            p += 1.0;
        } else {
            n += 1.0;
        }
        if si >= t {
            if yi {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
    }
    (tp / p, fp / n, if tp + fp > 0.0 { tp / (tp + fp) } else { 1.0 })
}

fn distinct_desc(s: &[f64]) -> Vec<f64> {
    let mut t = s.to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

pub fn oracle_fpr_at_tpr(s: &[f64], y: &[bool], target: f64) -> f64 {
    distinct_desc(s)
        .into_iter()
        .map(|t| rates_at(s, y, t))
        .filter(|r| r.0 >= target)
        .map(|r| r.1)
        .fold(f64::INFINITY, f64::min)
}

pub fn oracle_ap(s: &[f64], y: &[bool]) -> f64 {
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in distinct_desc(s) {
        let (r, _, p) = rates_at(s, y, t);
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

pub fn oracle_ar(s: &[f64], y: &[bool]) -> f64 {
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return 1.0;
    }
    let last = AR_THRESHOLDS - 1;
    (0..AR_THRESHOLDS)
        .map(|i| if i == last { hi } else { lo + (hi - lo) * (i as f64 / last as f64) })
        .map(|t| rates_at(s, y, t).0)
        .sum::<f64>()
        / AR_THRESHOLDS as f64
}

pub fn random_instance(rng: &mut ChaCha8Rng, max_n: usize) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..=max_n);
    // Coarse score levels in some instances force many ties.
    let levels = if rng.random_bool(0.5) { rng.random_range(2..20) } else { 0 };
    let pos_rate = rng.random_range(0.05..0.95);
    let mut y: Vec<bool> = (0..n).map(|_| rng.random_bool(pos_rate)).collect();
    y[0] = true;
    y[1] = false;
    let s = y
        .iter()
        .map(|&yi| {
            let v: f64 = normal(rng) + if yi { 0.8 } else { 0.0 };
            if levels > 0 {
                (v * levels as f64 / 4.0).round()
            } else {
                v
            }
        })
        .collect();
    (s, y)
}

pub fn metrics_oracle(instances: usize) -> Check {
    let ex = ScoredPixels::new(vec![0.1, 0.4, 0.35, 0.8], vec![false, false, true, true]).unwrap();
    let a = auroc(&ex).unwrap();
    ensure(a == 0.75, || format!("pairwise example gives {a}, expected 0.75"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let (s, y) = random_instance(&mut rng, 1000);
        let data = ScoredPixels::new(s.clone(), y.clone()).unwrap();
        let pairs = [
            ("auroc", auroc(&data).unwrap(), oracle_auroc(&s, &y)),
            ("fpr95", fpr_at_tpr(&data, 0.95).unwrap(), oracle_fpr_at_tpr(&s, &y, 0.95)),
            ("ap", average_precision(&data).unwrap(), oracle_ap(&s, &y)),
            ("ar", average_recall(&data).unwrap(), oracle_ar(&s, &y)),
        ];
        for (name, got, want) in pairs {
            let err = (got - want).abs();
            worst = worst.max(err);
            ensure(err <= 1e-9, || format!("instance {k} (n={}): {name} {got} vs oracle {want}", s.len()))?;
        }
    }
    Ok(format!("pairwise example 0.75 exact; {instances} random instances within {worst:.1e} of O(n^2) oracles"))
}

// ------------------------------------------------------------ kNN

/// Cosine distance straight from the definition.
fn direct_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

fn direct_score(query: &[f64], stored: &[Vec<f64>], k: usize) -> f64 {
    let mut d: Vec<f64> = stored.iter().map(|x| direct_distance(query, x)).collect();
    d.sort_by(f64::total_cmp);
    d[..k].iter().map(|v| (-v).exp()).sum::<f64>() / k as f64
}

/// Full sort of every `(distance, index)` pair, computed the way the index
/// stores its vectors (unit rows, query normalized first).
fn full_sort_neighbors(index: &KnnIndex, query: &[f64], k: usize) -> Vec<(f64, usize)> {
    let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    let q: Vec<f64> = query.iter().map(|v| v / qn).collect();
    let mut all: Vec<(f64, usize)> = (0..index.len())
        .map(|i| {
            let dot: f64 = q.iter().zip(index.vector(i)).map(|(a, b)| a * b).sum();
            ((1.0 - dot).clamp(0.0, 2.0), i)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    all
}

pub fn knn_exactness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    // Direct formula.
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let dim = 2 + trial % 15;
        let stored: Vec<Vec<f64>> = (0..300).map(|_| normals(&mut rng, dim)).collect();
        let index = KnnIndex::from_rows(dim, stored.iter().map(Vec::as_slice)).map_err(|e| e.to_string())?;
        for k in [1, 5, 17] {
            let q = normals(&mut rng, dim);
            let err = (knn_score(&q, &index, k).unwrap() - direct_score(&q, &stored, k)).abs();
            worst = worst.max(err);
        }
    }
    ensure(worst <= 1e-12, || format!("score deviates from the direct formula by {worst:e}"))?;

    // Scale invariance: exact for powers of two, to rounding otherwise.
    let dim = 12;
    let stored: Vec<Vec<f64>> = (0..500).map(|_| normals(&mut rng, dim)).collect();
    let index = KnnIndex::from_rows(dim, stored.iter().map(Vec::as_slice)).unwrap();
    let q = normals(&mut rng, dim);
    let base = knn_score(&q, &index, 5).unwrap();
    for alpha in [2.0, 0.5, 1024.0, 2f64.powi(-20)] {
        let scaled_q: Vec<f64> = q.iter().map(|v| v * alpha).collect();
        ensure(knn_score(&scaled_q, &index, 5).unwrap() == base, || format!("query scale {alpha} changes score"))?;
        let scaled: Vec<Vec<f64>> =
            stored.iter().enumerate().map(|(i, r)| r.iter().map(|v| v * if i % 2 == 0 { alpha } else { 1.0 }).collect()).collect();
        let idx2 = KnnIndex::from_rows(dim, scaled.iter().map(Vec::as_slice)).unwrap();
        ensure(knn_score(&q, &idx2, 5).unwrap() == base, || format!("stored scale {alpha} changes score"))?;
    }
    for alpha in [3.0, 0.1, 7.3e5] {
        let scaled_q: Vec<f64> = q.iter().map(|v| v * alpha).collect();
        let err = (knn_score(&scaled_q, &index, 5).unwrap() - base).abs();
        ensure(err <= 1e-15, || format!("query scale {alpha} changes score by {err:e}"))?;
    }

    // Selection against a full sort, including exact duplicates for ties.
    let mut compared = 0;
    for &(n, dim) in &[(10usize, 3usize), (1000, 8), (10_000, 16)] {
        let mut rows: Vec<Vec<f64>> = (0..n).map(|_| normals(&mut rng, dim)).collect();
        for i in (0..n).step_by(7) {
            rows[i] = rows[i / 2].iter().map(|v| v * 3.0).collect();
        }
        let index = KnnIndex::from_rows(dim, rows.iter().map(Vec::as_slice)).unwrap();
        for k in [1, 5, n.min(50), n] {
            for _ in 0..3 {
                let q = if rng.random_bool(0.5) { rows[rng.random_range(0..n)].clone() } else { normals(&mut rng, dim) };
                let got = index.nearest(&q, k).unwrap();
                let want = full_sort_neighbors(&index, &q, k);
                ensure(got == want, || format!("n={n} k={k}: selection differs from full sort"))?;
                compared += 1;
            }
        }
    }
    Ok(format!(
        "direct formula within {worst:.1e}; power-of-two rescaling exact; {compared} queries match the full-sort oracle up to n = 10000"
    ))
}

// ------------------------------------------------------------ ensemble

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

pub fn ensemble_calibration() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Calibrate a trained flow per layer and normalize its validation NLLs.
    let cfg = TrainConfig { learning_rate: 1e-3, max_epochs: 5, chain_length: 2, hidden_width: 8, ..TrainConfig::default() };
    let mut worst: f64 = 0.0;
    for layer in 3..=6u32 {
        let dim = layer as usize;
        let shift = normals(&mut rng, dim);
        let sample = |r: &mut ChaCha8Rng| -> Vec<f64> { shift.iter().map(|m| m + 0.5 * normal(r)).collect() };
        let (model, held_out) = train_flow(sample, 1500, &cfg, u64::from(layer))?;
        let train_nll: Vec<f64> = (0..200).map(|_| model.nll(&sample(&mut rng)).unwrap()).collect();
        let val_nll: Vec<f64> = held_out.iter().map(|x| model.nll(x).unwrap()).collect();
        let cal = LayerCalibration::fit(layer, &train_nll, &val_nll).map_err(|e| e.to_string())?;
        let grid = Grid::new(1, val_nll.len(), val_nll).unwrap();
        let norm = cal.apply(&grid, layer).map_err(|e| e.to_string())?;
        let (m, s) = mean_std(norm.values());
        worst = worst.max(m.abs()).max((s - 1.0).abs());
    }
    ensure(worst <= 1e-9, || format!("normalized validation NLL off by {worst:e}"))?;

    // Logistic fit on separable two-layer data.
    let samples: Vec<FusionSample> = (0..400)
        .map(|i| {
            let fg = i % 4 == 0;
            let a = normal(&mut rng).abs() * 0.5;
            let b = normal(&mut rng);
            let v = if fg { vec![1.0 + a, b] } else { vec![-1.0 - a, b + 0.5] };
            FusionSample::new(v, fg)
        })
        .collect();
    let fit = fit_logistic(&samples, &LogisticConfig::default()).map_err(|e| e.to_string())?;
    let scores: Vec<f64> = samples.iter().map(|s| fit.model.fuse_values(&s.values).unwrap()).collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.foreground).collect();
    let train_auc = auroc(&ScoredPixels::new(scores, labels).unwrap()).unwrap();
    ensure(train_auc == 1.0, || format!("separable training AUROC {train_auc}"))?;

    // Min/max bounds.
    for t in 0..50 {
        let (h, w) = (1 + t % 5, 1 + t % 7);
        let grids: Vec<Grid> =
            (0..1 + t % 4).map(|_| Grid::new(h, w, normals(&mut rng, h * w)).unwrap()).collect();
        let lo = fuse_min(&grids).unwrap();
        let hi = fuse_max(&grids).unwrap();
        for g in &grids {
            for ((a, b), c) in lo.values().iter().zip(g.values()).zip(hi.values()) {
                ensure(a <= b && b <= c, || format!("min/max bound violated: {a} {b} {c}"))?;
            }
        }
    }
    Ok(format!(
        "normalized validation NLL mean/std within {worst:.1e} of 0/1; separable logistic AUROC 1.0 after {} iterations; min <= layer <= max on 50 grids",
        fit.iterations
    ))
}
