//! Two-hidden-layer ReLU perceptron with a hand-written backward pass.

use rand::Rng;

/// `input -> hidden -> hidden -> output`, ReLU after both hidden layers,
/// linear output.
///
/// Parameters live in one flat vector laid out as
/// `W1 (hidden x input) | b1 | W2 (hidden x hidden) | b2 | W3 (output x hidden) | b3`,
/// weight matrices row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    input: usize,
    hidden: usize,
    output: usize,
    params: Vec<f64>,
}

/// Post-activation hidden values saved by the forward pass.
#[derive(Debug, Clone)]
pub(crate) struct MlpCache {
    h1: Vec<f64>,
    h2: Vec<f64>,
}

impl Mlp {
    pub fn param_count(input: usize, hidden: usize, output: usize) -> usize {
        hidden * input + hidden + hidden * hidden + hidden + output * hidden + output
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self { input, hidden, output, params: vec![0.0; Self::param_count(input, hidden, output)] }
    }

    /// Hidden weights uniform in `+-1/sqrt(fan_in)`, all biases zero, and a
    /// zero output layer so the network starts out computing 0.
    pub fn init<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let mut mlp = Self::zeros(input, hidden, output);
        let (w1, _, w2, _, _, _) = mlp.offsets();
        let a1 = 1.0 / (input as f64).sqrt();
        for p in &mut mlp.params[w1..w1 + hidden * input] {
            *p = rng.random_range(-a1..a1);
        }
        let a2 = 1.0 / (hidden as f64).sqrt();
        for p in &mut mlp.params[w2..w2 + hidden * hidden] {
            *p = rng.random_range(-a2..a2);
        }
        mlp
    }

    pub fn from_params(input: usize, hidden: usize, output: usize, params: Vec<f64>) -> Option<Self> {
        (params.len() == Self::param_count(input, hidden, output)).then_some(Self { input, hidden, output, params })
    }

    pub fn input(&self) -> usize {
        self.input
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn output(&self) -> usize {
        self.output
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Output-layer bias, `b3`.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let (_, _, _, _, _, b3) = self.offsets();
        &mut self.params[b3..]
    }

    /// Offsets of `(W1, b1, W2, b2, W3, b3)` in the flat vector.
    fn offsets(&self) -> (usize, usize, usize, usize, usize, usize) {
        let (i, h, o) = (self.input, self.hidden, self.output);
        let w1 = 0;
        let b1 = w1 + h * i;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + o * h;
        debug_assert_eq!(b3 + o, self.params.len());
        (w1, b1, w2, b2, w3, b3)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).0
    }

    pub(crate) fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        debug_assert_eq!(x.len(), self.input);
        let (w1, b1, w2, b2, w3, b3) = self.offsets();
        let p = &self.params;
        let h1 = dense(&p[w1..b1], &p[b1..w2], x, true);
        let h2 = dense(&p[w2..b2], &p[b2..w3], &h1, true);
        let out = dense(&p[w3..b3], &p[b3..], &h2, false);
        (out, MlpCache { h1, h2 })
    }

    /// Accumulates `d loss / d params` into `grad` and `d loss / d x` into
    /// `grad_x`, given `grad_out = d loss / d output`.
    pub(crate) fn backward(&self, x: &[f64], cache: &MlpCache, grad_out: &[f64], grad: &mut [f64], grad_x: &mut [f64]) {
        let (w1, b1, w2, b2, w3, b3) = self.offsets();
        let p = &self.params;
        let (h, i, o) = (self.hidden, self.input, self.output);

        // output layer
        let mut g_h2 = vec![0.0; h];
        for r in 0..o {
            let g = grad_out[r];
            if g == 0.0 {
                continue;
            }
            grad[b3 + r] += g;
            let row = w3 + r * h;
            for c in 0..h {
                grad[row + c] += g * cache.h2[c];
                g_h2[c] += g * p[row + c];
            }
        }
        // second hidden layer, through the ReLU
        let mut g_h1 = vec![0.0; h];
        for r in 0..h {
            if cache.h2[r] <= 0.0 {
                continue;
            }
            let g = g_h2[r];
            grad[b2 + r] += g;
            let row = w2 + r * h;
            for c in 0..h {
                grad[row + c] += g * cache.h1[c];
                g_h1[c] += g * p[row + c];
            }
        }
        // first hidden layer
        for r in 0..h {
            if cache.h1[r] <= 0.0 {
                continue;
            }
            let g = g_h1[r];
            grad[b1 + r] += g;
            let row = w1 + r * i;
            for c in 0..i {
                grad[row + c] += g * x[c];
                grad_x[c] += g * p[row + c];
            }
        }
    }
}

fn dense(w: &[f64], b: &[f64], x: &[f64], relu: bool) -> Vec<f64> {
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(r, &bias)| {
            let row = &w[r * n..(r + 1) * n];
            let z = bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            if relu {
                z.max(0.0)
            } else {
                z
            }
        })
        .collect()
}
