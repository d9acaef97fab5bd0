//! Affine coupling layers.
//!
//! A layer splits its input into kept coordinates `x_k` and changed
//! coordinates `x_c`, then computes
//!
//! ```text
//! y_k = x_k
//! y_c = x_c * exp(s(x_k)) + t(x_k)
//! s(x_k) = cap * tanh(scale_net(x_k)),   cap = exp(log_cap) > 0
//! ```
//!
//! The Jacobian is triangular, so `log|det J| = sum(s)`.

use rand::Rng;

use super::mlp::{Mlp, MlpCache};
use crate::error::{Error, Result};

/// Initial value of the per-coordinate log-scale cap.
pub const INITIAL_SCALE_CAP: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    keep_mask: Vec<bool>,
    kept: Vec<usize>,
    changed: Vec<usize>,
    pub(crate) scale_net: Mlp,
    pub(crate) translate_net: Mlp,
    /// `ln(cap)` for each changed coordinate.
    pub(crate) log_cap: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
pub(crate) struct CouplingCache {
    input: Vec<f64>,
    x_keep: Vec<f64>,
    scale_cache: MlpCache,
    translate_cache: MlpCache,
    tanh: Vec<f64>,
    s: Vec<f64>,
    exp_s: Vec<f64>,
}

/// Parameter gradients of one coupling layer, same layout as the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingGradient {
    pub scale_net: Vec<f64>,
    pub translate_net: Vec<f64>,
    pub log_cap: Vec<f64>,
}

impl CouplingGradient {
    pub(crate) fn zeros_like(layer: &CouplingLayer) -> Self {
        Self {
            scale_net: vec![0.0; layer.scale_net.params().len()],
            translate_net: vec![0.0; layer.translate_net.params().len()],
            log_cap: vec![0.0; layer.log_cap.len()],
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.scale_net.iter_mut().zip(&other.scale_net) {
            *a += b;
        }
        for (a, b) in self.translate_net.iter_mut().zip(&other.translate_net) {
            *a += b;
        }
        for (a, b) in self.log_cap.iter_mut().zip(&other.log_cap) {
            *a += b;
        }
    }

    pub(crate) fn scale(&mut self, k: f64) {
        for v in self.scale_net.iter_mut().chain(&mut self.translate_net).chain(&mut self.log_cap) {
            *v *= k;
        }
    }
}

/// Alternating even/odd mask: parity 0 keeps even coordinates.
pub fn alternating_mask(dim: usize, parity: usize) -> Vec<bool> {
    (0..dim).map(|c| c % 2 == parity % 2).collect()
}

impl CouplingLayer {
    /// A layer with randomly initialized hidden weights and zeroed output
    /// layers, so it starts as the identity map.
    pub fn init<R: Rng>(keep_mask: Vec<bool>, hidden: usize, rng: &mut R) -> Result<Self> {
        let (kept, changed) = split(&keep_mask)?;
        let scale_net = Mlp::init(kept.len(), hidden, changed.len(), rng);
        let translate_net = Mlp::init(kept.len(), hidden, changed.len(), rng);
        let log_cap = vec![INITIAL_SCALE_CAP.ln(); changed.len()];
        Ok(Self { keep_mask, kept, changed, scale_net, translate_net, log_cap })
    }

    pub(crate) fn from_parts(keep_mask: Vec<bool>, scale_net: Mlp, translate_net: Mlp, log_cap: Vec<f64>) -> Result<Self> {
        let (kept, changed) = split(&keep_mask)?;
        if scale_net.input() != kept.len()
            || translate_net.input() != kept.len()
            || scale_net.output() != changed.len()
            || translate_net.output() != changed.len()
            || log_cap.len() != changed.len()
        {
            return Err(Error::dims("coupling sub-network shapes do not match the mask"));
        }
        Ok(Self { keep_mask, kept, changed, scale_net, translate_net, log_cap })
    }

    pub fn dim(&self) -> usize {
        self.keep_mask.len()
    }

    pub fn keep_mask(&self) -> &[bool] {
        &self.keep_mask
    }

    pub fn changed_indices(&self) -> &[usize] {
        &self.changed
    }

    pub fn kept_indices(&self) -> &[usize] {
        &self.kept
    }

    pub fn scale_net(&self) -> &Mlp {
        &self.scale_net
    }

    pub fn translate_net(&self) -> &Mlp {
        &self.translate_net
    }

    pub fn scale_net_mut(&mut self) -> &mut Mlp {
        &mut self.scale_net
    }

    pub fn translate_net_mut(&mut self) -> &mut Mlp {
        &mut self.translate_net
    }

    pub fn scale_caps(&self) -> Vec<f64> {
        self.log_cap.iter().map(|v| v.exp()).collect()
    }

    pub fn set_scale_caps(&mut self, caps: &[f64]) {
        assert_eq!(caps.len(), self.log_cap.len());
        assert!(caps.iter().all(|&c| c > 0.0), "scale caps must be positive");
        self.log_cap = caps.iter().map(|c| c.ln()).collect();
    }

    pub fn param_count(&self) -> usize {
        self.scale_net.params().len() + self.translate_net.params().len() + self.log_cap.len()
    }

    fn gather_kept(&self, x: &[f64]) -> Vec<f64> {
        self.kept.iter().map(|&c| x[c]).collect()
    }

    /// Bounded log-scales and translations for the kept coordinates.
    fn scale_shift(&self, x_keep: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let raw = self.scale_net.forward(x_keep);
        let s = raw.iter().zip(&self.log_cap).map(|(r, lc)| lc.exp() * r.tanh()).collect();
        (s, self.translate_net.forward(x_keep))
    }

    /// Returns `(y, log|det J|)`. `index` is only used for error reporting.
    pub fn forward(&self, x: &[f64], index: usize) -> Result<(Vec<f64>, f64)> {
        let (s, t) = self.scale_shift(&self.gather_kept(x));
        let mut y = x.to_vec();
        let mut logdet = 0.0;
        for (k, &c) in self.changed.iter().enumerate() {
            y[c] = x[c] * s[k].exp() + t[k];
            logdet += s[k];
        }
        if !logdet.is_finite() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: index });
        }
        Ok((y, logdet))
    }

    /// Returns `(x, log|det J_inverse|)`; the log-det is minus the forward one.
    pub fn inverse(&self, y: &[f64], index: usize) -> Result<(Vec<f64>, f64)> {
        let (s, t) = self.scale_shift(&self.gather_kept(y));
        let mut x = y.to_vec();
        let mut logdet = 0.0;
        for (k, &c) in self.changed.iter().enumerate() {
            x[c] = (y[c] - t[k]) * (-s[k]).exp();
            logdet -= s[k];
        }
        if !logdet.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: index });
        }
        Ok((x, logdet))
    }

    pub(crate) fn forward_cached(&self, x: &[f64], index: usize) -> Result<(Vec<f64>, f64, CouplingCache)> {
        let x_keep = self.gather_kept(x);
        let (raw, scale_cache) = self.scale_net.forward_cached(&x_keep);
        let (t, translate_cache) = self.translate_net.forward_cached(&x_keep);
        let tanh: Vec<f64> = raw.iter().map(|r| r.tanh()).collect();
        let s: Vec<f64> = tanh.iter().zip(&self.log_cap).map(|(th, lc)| lc.exp() * th).collect();
        let exp_s: Vec<f64> = s.iter().map(|v| v.exp()).collect();
        let mut y = x.to_vec();
        let mut logdet = 0.0;
        for (k, &c) in self.changed.iter().enumerate() {
            y[c] = x[c] * exp_s[k] + t[k];
            logdet += s[k];
        }
        if !logdet.is_finite() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: index });
        }
        let cache = CouplingCache { input: x.to_vec(), x_keep, scale_cache, translate_cache, tanh, s, exp_s };
        Ok((y, logdet, cache))
    }

    /// Backward pass for a loss `L(y) - logdet_weight * logdet`.
    ///
    /// `grad_y` is `dL/dy`; returns the gradient with respect to the layer
    /// input and accumulates parameter gradients into `grad`.
    pub(crate) fn backward(
        &self,
        cache: &CouplingCache,
        grad_y: &[f64],
        logdet_weight: f64,
        grad: &mut CouplingGradient,
    ) -> Vec<f64> {
        let b = self.changed.len();
        let mut grad_x = grad_y.to_vec();
        let mut g_raw = vec![0.0; b];
        let mut g_t = vec![0.0; b];
        for (k, &c) in self.changed.iter().enumerate() {
            let gy = grad_y[c];
            g_t[k] = gy;
            grad_x[c] = gy * cache.exp_s[k];
            let g_s = gy * cache.input[c] * cache.exp_s[k] - logdet_weight;
            let cap = self.log_cap[k].exp();
            g_raw[k] = g_s * cap * (1.0 - cache.tanh[k] * cache.tanh[k]);
            // ds/dlog_cap = s
            grad.log_cap[k] += g_s * cache.s[k];
        }
        let mut g_keep = vec![0.0; self.kept.len()];
        self.scale_net.backward(&cache.x_keep, &cache.scale_cache, &g_raw, &mut grad.scale_net, &mut g_keep);
        self.translate_net.backward(&cache.x_keep, &cache.translate_cache, &g_t, &mut grad.translate_net, &mut g_keep);
        for (k, &c) in self.kept.iter().enumerate() {
            grad_x[c] += g_keep[k];
        }
        grad_x
    }

    pub(crate) fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.scale_net.params());
        out.extend_from_slice(self.translate_net.params());
        out.extend_from_slice(&self.log_cap);
    }

    pub(crate) fn read_params(&mut self, src: &[f64]) -> usize {
        let a = self.scale_net.params().len();
        let b = self.translate_net.params().len();
        let c = self.log_cap.len();
        self.scale_net.params_mut().copy_from_slice(&src[..a]);
        self.translate_net.params_mut().copy_from_slice(&src[a..a + b]);
        self.log_cap.copy_from_slice(&src[a + b..a + b + c]);
        a + b + c
    }
}

fn split(mask: &[bool]) -> Result<(Vec<usize>, Vec<usize>)> {
    let kept: Vec<usize> = (0..mask.len()).filter(|&c| mask[c]).collect();
    let changed: Vec<usize> = (0..mask.len()).filter(|&c| !mask[c]).collect();
    if kept.is_empty() || changed.is_empty() {
        return Err(Error::validation("coupling mask needs at least one kept and one changed coordinate"));
    }
    Ok((kept, changed))
}
