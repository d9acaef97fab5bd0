//! Threshold-free evaluation of foreground scores.
//!
//! Foreground pixels are the positive class and higher scores mean "more
//! foreground"; a pixel is classified positive when `score >= threshold`.
//! Tied scores always move together: AUROC counts tied pairs as one half,
//! and the precision-recall and ROC sweeps treat a tie group as a single
//! operating point.
//!
//! Average recall has no universally agreed definition. Here it is the mean
//! TPR over 101 thresholds spaced evenly from the minimum to the maximum
//! score, both inclusive.

use std::fmt;

use crate::error::{Error, Result};
use crate::feature_store::PixelMask;
use crate::segmentation::LikelihoodMap;

/// Number of thresholds in the average-recall grid.
pub const AR_THRESHOLDS: usize = 101;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPixels {
    scores: Vec<f64>,
    positive: Vec<bool>,
}

impl ScoredPixels {
    pub fn new(scores: Vec<f64>, positive: Vec<bool>) -> Result<Self> {
        if scores.len() != positive.len() {
            return Err(Error::dims(format!("{} scores for {} labels", scores.len(), positive.len())));
        }
        if scores.is_empty() {
            return Err(Error::validation("no scored pixels"));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::validation("NaN score"));
        }
        Ok(Self { scores, positive })
    }

    /// Pools a likelihood map with its ground-truth mask.
    pub fn from_map(map: &LikelihoodMap, mask: &PixelMask) -> Result<Self> {
        if map.shape() != mask.shape() {
            return Err(Error::dims(format!("map {:?} vs mask {:?}", map.shape(), mask.shape())));
        }
        Self::new(map.values().to_vec(), mask.pixels().iter().map(|&bg| !bg).collect())
    }

    pub fn extend(&mut self, other: &ScoredPixels) {
        self.scores.extend_from_slice(&other.scores);
        self.positive.extend_from_slice(&other.positive);
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.positive
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_pos(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }

    pub fn n_neg(&self) -> usize {
        self.len() - self.n_pos()
    }

    fn require_both_classes(&self) -> Result<(usize, usize)> {
        let (p, n) = (self.n_pos(), self.n_neg());
        if p == 0 || n == 0 {
            return Err(Error::validation(format!("metric needs both classes, got {p} positive and {n} negative")));
        }
        Ok((p, n))
    }

    /// Tie groups `(score, positives, negatives)` in descending score order.
    fn descending_groups(&self) -> Vec<(f64, usize, usize)> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut groups: Vec<(f64, usize, usize)> = Vec::new();
        for k in idx {
            let s = self.scores[k];
            let pos = usize::from(self.positive[k]);
            match groups.last_mut() {
                Some(g) if g.0 == s => {
                    g.1 += pos;
                    g.2 += 1 - pos;
                }
                _ => groups.push((s, pos, 1 - pos)),
            }
        }
        groups
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from rank statistics.
pub fn auroc(data: &ScoredPixels) -> Result<f64> {
    let (p, n) = data.require_both_classes()?;
    // Twice the Mann-Whitney U, kept in integers.
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    for &(_, pos, neg) in data.descending_groups().iter().rev() {
        twice_u += 2 * pos as u128 * neg_below + pos as u128 * neg as u128;
        neg_below += neg as u128;
    }
    Ok(twice_u as f64 / (2.0 * p as f64 * n as f64))
}

/// Smallest FPR over thresholds whose TPR reaches `target_tpr`.
pub fn fpr_at_tpr(data: &ScoredPixels, target_tpr: f64) -> Result<f64> {
    Ok(operating_point(data, target_tpr)?.1)
}

/// Largest threshold whose TPR reaches `target_tpr`.
pub fn threshold_at_tpr(data: &ScoredPixels, target_tpr: f64) -> Result<f64> {
    Ok(operating_point(data, target_tpr)?.0)
}

fn operating_point(data: &ScoredPixels, target_tpr: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&target_tpr) {
        return Err(Error::validation(format!("target TPR {target_tpr} outside [0, 1]")));
    }
    let (p, n) = data.require_both_classes()?;
    let (mut tp, mut fp) = (0usize, 0usize);
    for (s, pos, neg) in data.descending_groups() {
        tp += pos;
        fp += neg;
        if tp as f64 / p as f64 >= target_tpr {
            return Ok((s, fp as f64 / n as f64));
        }
    }
    unreachable!("the lowest threshold reaches TPR 1")
}

/// Step-wise area under the precision-recall curve,
/// `sum_n (R_n - R_{n-1}) P_n` over descending tie groups.
pub fn average_precision(data: &ScoredPixels) -> Result<f64> {
    let (p, _) = data.require_both_classes()?;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    for (_, pos, neg) in data.descending_groups() {
        tp += pos;
        fp += neg;
        if pos > 0 {
            ap += (pos as f64 / p as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

/// The average-recall threshold grid for a score range.
pub fn ar_thresholds(min: f64, max: f64) -> Vec<f64> {
    let last = AR_THRESHOLDS - 1;
    (0..AR_THRESHOLDS)
        .map(|i| if i == last { max } else { min + (max - min) * (i as f64 / last as f64) })
        .collect()
}

/// Mean TPR over [`AR_THRESHOLDS`] evenly spaced thresholds. With a zero
/// score range this is the TPR of the single operating point, 1.0.
pub fn average_recall(data: &ScoredPixels) -> Result<f64> {
    let (p, _) = data.require_both_classes()?;
    let min = data.scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = data.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Ok(1.0);
    }
    let mut pos: Vec<f64> = data.scores.iter().zip(&data.positive).filter(|(_, &y)| y).map(|(&s, _)| s).collect();
    pos.sort_by(f64::total_cmp);
    let total: usize = ar_thresholds(min, max)
        .iter()
        .map(|&t| pos.len() - pos.partition_point(|&s| s < t))
        .sum();
    Ok(total as f64 / (AR_THRESHOLDS * p) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub auroc: f64,
    pub fpr_at_95tpr: f64,
    pub average_precision: f64,
    pub average_recall: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl MetricsReport {
    pub fn compute(data: &ScoredPixels) -> Result<Self> {
        Ok(Self {
            auroc: auroc(data)?,
            fpr_at_95tpr: fpr_at_tpr(data, 0.95)?,
            average_precision: average_precision(data)?,
            average_recall: average_recall(data)?,
            n_pos: data.n_pos(),
            n_neg: data.n_neg(),
        })
    }

    /// `auroc=..., fpr_at_95tpr=..., ap=..., ar=..., n_pos=..., n_neg=...`
    pub fn to_kv(&self) -> String {
        format!(
            "auroc={}, fpr_at_95tpr={}, ap={}, ar={}, n_pos={}, n_neg={}",
            self.auroc, self.fpr_at_95tpr, self.average_precision, self.average_recall, self.n_pos, self.n_neg
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "FPR@95%TPR {:5.1}%  AR {:5.1}%  AP {:5.1}%  AUROC {:.3}  ({} fg / {} bg px; AR = mean TPR over 101 uniform thresholds)",
            100.0 * self.fpr_at_95tpr,
            100.0 * self.average_recall,
            100.0 * self.average_precision,
            self.auroc,
            self.n_pos,
            self.n_neg
        )
    }
}

/// Pools every pixel of every image, then computes all metrics.
pub fn evaluate(maps: &[LikelihoodMap], masks: &[PixelMask]) -> Result<MetricsReport> {
    if maps.len() != masks.len() {
        return Err(Error::dims(format!("{} maps for {} masks", maps.len(), masks.len())));
    }
    let mut pooled: Option<ScoredPixels> = None;
    for (m, k) in maps.iter().zip(masks) {
        let px = ScoredPixels::from_map(m, k)?;
        match pooled.as_mut() {
            Some(p) => p.extend(&px),
            None => pooled = Some(px),
        }
    }
    let pooled = pooled.ok_or_else(|| Error::validation("nothing to evaluate"))?;
    MetricsReport::compute(&pooled)
}

/// Averages per-image reports, skipping images with a single class.
pub fn evaluate_per_image(maps: &[LikelihoodMap], masks: &[PixelMask]) -> Result<MetricsReport> {
    if maps.len() != masks.len() {
        return Err(Error::dims(format!("{} maps for {} masks", maps.len(), masks.len())));
    }
    let mut reports = Vec::new();
    for (m, k) in maps.iter().zip(masks) {
        let px = ScoredPixels::from_map(m, k)?;
        if px.n_pos() > 0 && px.n_neg() > 0 {
            reports.push(MetricsReport::compute(&px)?);
        }
    }
    if reports.is_empty() {
        return Err(Error::validation("no image contains both classes"));
    }
    let n = reports.len() as f64;
    let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        auroc: avg(|r| r.auroc),
        fpr_at_95tpr: avg(|r| r.fpr_at_95tpr),
        average_precision: avg(|r| r.average_precision),
        average_recall: avg(|r| r.average_recall),
        n_pos: reports.iter().map(|r| r.n_pos).sum(),
        n_neg: reports.iter().map(|r| r.n_neg).sum(),
    })
}
