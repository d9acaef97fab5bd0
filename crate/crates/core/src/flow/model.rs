use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::coupling::{alternating_mask, CouplingGradient, CouplingLayer};
use crate::error::{Error, Result};
use crate::feature_store::FeatureMap;
use crate::grid::Grid;

/// `ln(2 pi)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Samples per work unit when batches are evaluated in parallel. Partial
/// results are always reduced in chunk order, so outputs do not depend on
/// the number of threads.
const CHUNK: usize = 64;

/// Real NVP flow: per-coordinate standardization followed by a chain of
/// affine coupling layers, with a standard normal prior on the output.
///
/// Consecutive layers use complementary even/odd masks.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    dim: usize,
    hidden: usize,
    shift: Vec<f64>,
    scale: Vec<f64>,
    layers: Vec<CouplingLayer>,
}

/// Gradient of the mean NLL with respect to every trainable parameter,
/// mirroring [`FlowModel::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGradient {
    pub layers: Vec<CouplingGradient>,
}

impl FlowGradient {
    /// Flattened in the same order as [`FlowModel::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend_from_slice(&g.scale_net);
            out.extend_from_slice(&g.translate_net);
            out.extend_from_slice(&g.log_cap);
        }
        out
    }

    fn zeros_like(model: &FlowModel) -> Self {
        Self { layers: model.layers.iter().map(CouplingGradient::zeros_like).collect() }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
    }

    fn scale(&mut self, k: f64) {
        for g in &mut self.layers {
            g.scale(k);
        }
    }
}

impl FlowModel {
    /// A flow of `chain_length` coupling layers that starts out as the
    /// identity map. Hidden weights are seeded by `seed`.
    pub fn init(dim: usize, chain_length: usize, hidden: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::validation(format!("flow dimension must be at least 2, got {dim}")));
        }
        if chain_length == 0 || hidden == 0 {
            return Err(Error::validation("chain length and hidden width must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..chain_length)
            .map(|l| CouplingLayer::init(alternating_mask(dim, l), hidden, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim, hidden, shift: vec![0.0; dim], scale: vec![1.0; dim], layers })
    }

    pub(crate) fn from_parts(dim: usize, hidden: usize, shift: Vec<f64>, scale: Vec<f64>, layers: Vec<CouplingLayer>) -> Result<Self> {
        let model = Self { dim, hidden, shift, scale, layers };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.layers.is_empty() {
            return Err(Error::validation("flow needs dim >= 2 and at least one layer"));
        }
        if self.shift.len() != self.dim || self.scale.len() != self.dim {
            return Err(Error::dims("standardization vectors do not match the flow dimension"));
        }
        if self.scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) || self.shift.iter().any(|s| !s.is_finite()) {
            return Err(Error::validation("standardization constants must be finite with positive scales"));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.dim() != self.dim {
                return Err(Error::dims(format!("layer {l} has dimension {}", layer.dim())));
            }
            if layer.keep_mask() != alternating_mask(self.dim, l).as_slice() {
                return Err(Error::validation(format!("layer {l} does not follow the alternating mask pattern")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn chain_length(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CouplingLayer] {
        &mut self.layers
    }

    pub fn standardization(&self) -> (&[f64], &[f64]) {
        (&self.shift, &self.scale)
    }

    /// Sets the per-coordinate `(x - shift) / scale` applied before the
    /// coupling chain.
    pub fn set_standardization(&mut self, shift: Vec<f64>, scale: Vec<f64>) -> Result<()> {
        let (old_shift, old_scale) = (std::mem::replace(&mut self.shift, shift), std::mem::replace(&mut self.scale, scale));
        if let Err(e) = self.validate() {
            self.shift = old_shift;
            self.scale = old_scale;
            return Err(e);
        }
        Ok(())
    }

    fn log_scale_sum(&self) -> f64 {
        self.scale.iter().map(|s| s.ln()).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::dims(format!("input of length {} for a dim-{} flow", x.len(), self.dim)));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("flow input must be finite"));
        }
        Ok(())
    }

    /// Maps data space to latent space, returning `(z, log|det J|)` including
    /// the standardization step.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_input(x)?;
        let mut z: Vec<f64> = x.iter().zip(&self.shift).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect();
        let mut logdet = -self.log_scale_sum();
        for (l, layer) in self.layers.iter().enumerate() {
            let (y, ld) = layer.forward(&z, l)?;
            z = y;
            logdet += ld;
        }
        Ok((z, logdet))
    }

    /// Maps latent space back to data space.
    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.inverse_with_logdet(z)?.0)
    }

    /// Inverse map together with `log|det dx/dz|`, the negated forward
    /// log-determinant at the same point.
    pub fn inverse_with_logdet(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        if z.len() != self.dim || z.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("latent input must be finite with the flow dimension"));
        }
        let mut x = z.to_vec();
        let mut logdet = 0.0;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (y, ld) = layer.inverse(&x, l)?;
            x = y;
            logdet += ld;
        }
        let x = x.iter().zip(&self.shift).zip(&self.scale).map(|((v, m), s)| v * s + m).collect();
        Ok((x, logdet + self.log_scale_sum()))
    }

    /// Exact log-density `log p_Z(f(x)) + log|det df/dx|` in nats.
    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        let (z, logdet) = self.forward(x)?;
        let out = standard_normal_log_density(&z) + logdet;
        if !out.is_finite() {
            return Err(Error::NonFinite { layer: self.layers.len() });
        }
        Ok(out)
    }

    pub fn nll(&self, x: &[f64]) -> Result<f64> {
        Ok(-self.log_prob(x)?)
    }

    /// Mean NLL over `rows`, reduced in a fixed order.
    pub fn mean_nll<R: AsRef<[f64]> + Sync>(&self, rows: &[R]) -> Result<f64> {
        if rows.is_empty() {
            return Err(Error::validation("mean NLL of an empty set"));
        }
        let partial: Vec<f64> = rows
            .par_chunks(CHUNK)
            .map(|chunk| chunk.iter().map(|x| self.nll(x.as_ref())).sum::<Result<f64>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(partial.iter().sum::<f64>() / rows.len() as f64)
    }

    /// Exact gradient of the mean NLL over `batch`.
    pub fn gradients<R: AsRef<[f64]> + Sync>(&self, batch: &[R]) -> Result<FlowGradient> {
        Ok(self.nll_and_gradients(batch)?.1)
    }

    /// Mean NLL and its gradient over `batch`.
    pub fn nll_and_gradients<R: AsRef<[f64]> + Sync>(&self, batch: &[R]) -> Result<(f64, FlowGradient)> {
        if batch.is_empty() {
            return Err(Error::validation("gradient of an empty batch"));
        }
        let partial: Vec<(f64, FlowGradient)> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut grad = FlowGradient::zeros_like(self);
                let mut nll = 0.0;
                for x in chunk {
                    nll += self.accumulate_sample(x.as_ref(), &mut grad)?;
                }
                Ok((nll, grad))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = FlowGradient::zeros_like(self);
        let mut nll = 0.0;
        for (n, g) in &partial {
            nll += n;
            total.add_assign(g);
        }
        let inv = 1.0 / batch.len() as f64;
        total.scale(inv);
        Ok((nll * inv, total))
    }

    /// Adds one sample's NLL gradient to `grad` and returns its NLL.
    fn accumulate_sample(&self, x: &[f64], grad: &mut FlowGradient) -> Result<f64> {
        self.check_input(x)?;
        let mut z: Vec<f64> = x.iter().zip(&self.shift).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect();
        let mut logdet = -self.log_scale_sum();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (y, ld, cache) = layer.forward_cached(&z, l)?;
            z = y;
            logdet += ld;
            caches.push(cache);
        }
        let nll = -(standard_normal_log_density(&z) + logdet);
        // d/dz of 0.5 |z|^2
        let mut g = z;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            g = layer.backward(&caches[l], &g, 1.0, &mut grad.layers[l]);
        }
        Ok(nll)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(CouplingLayer::param_count).sum()
    }

    /// All trainable parameters, layer by layer: scale net, translate net,
    /// log scale caps.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            layer.write_params(&mut out);
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::dims(format!("expected {} parameters, got {}", self.param_count(), params.len())));
        }
        let mut at = 0;
        for layer in &mut self.layers {
            at += layer.read_params(&params[at..]);
        }
        Ok(())
    }

    /// Per-cell NLL of a feature map.
    pub fn score_feature_map(&self, map: &FeatureMap) -> Result<Grid> {
        if map.dim() != self.dim {
            return Err(Error::dims(format!("feature map dim {} vs flow dim {}", map.dim(), self.dim)));
        }
        let cells: Vec<Vec<f64>> = map.cells().map(|c| c.iter().map(|&v| f64::from(v)).collect()).collect();
        let values: Vec<f64> = cells
            .par_chunks(CHUNK)
            .map(|chunk| chunk.iter().map(|x| self.nll(x)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?
            .concat();
        Grid::new(map.grid_h(), map.grid_w(), values)
    }
}

pub fn standard_normal_log_density(z: &[f64]) -> f64 {
    -0.5 * (z.len() as f64 * LN_2PI + z.iter().map(|v| v * v).sum::<f64>())
}
