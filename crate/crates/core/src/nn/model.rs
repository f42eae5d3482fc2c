use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::loss::softmax;
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Fully connected classifier: hidden layers use `activation`, the output
/// layer emits logits that are turned into probabilities with softmax.
///
/// Layer `l` maps `layer_dims[l]` inputs to `layer_dims[l + 1]` outputs; its
/// weight matrix is stored row-major with shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
}

/// Per-layer outputs kept for backpropagation. `outputs[0]` is the input,
/// `outputs[l + 1]` the post-activation output of layer `l` (logits for the last).
pub(crate) struct ForwardCache {
    pub outputs: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &[f64] {
        self.outputs.last().expect("non-empty cache")
    }
}

pub(crate) fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::InvalidArchitecture(format!(
            "need at least input and output widths, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::InvalidArchitecture(format!(
            "zero-width layer in {layer_dims:?}"
        )));
    }
    if *layer_dims.last().unwrap() < 2 {
        return Err(Error::InvalidArchitecture(format!(
            "class count must be at least 2, got {}",
            layer_dims.last().unwrap()
        )));
    }
    Ok(())
}

impl MlpModel {
    /// Xavier-uniform initialization: every weight of layer `l` is drawn
    /// uniformly from `±sqrt(6 / (fan_in + fan_out))`; biases start at zero.
    /// Weights are filled layer by layer in row-major order from one stream
    /// seeded with `seed`.
    pub fn init(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut rng = Stream::new(seed);
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.uniform_range(-bound, bound))
                .collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            activation,
        })
    }

    pub fn from_parts(
        layer_dims: Vec<usize>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
        activation: Activation,
    ) -> Result<Self> {
        validate_dims(&layer_dims)?;
        let layers = layer_dims.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::Shape(format!(
                "expected {layers} weight and bias blocks, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for (l, pair) in layer_dims.windows(2).enumerate() {
            if weights[l].len() != pair[0] * pair[1] || biases[l].len() != pair[1] {
                return Err(Error::Shape(format!(
                    "layer {l}: expected {}x{} weights and {} biases",
                    pair[1], pair[0], pair[1]
                )));
            }
        }
        let model = Self {
            layer_dims,
            weights,
            biases,
            activation,
        };
        if !model.is_finite() {
            return Err(Error::Domain("model parameters must be finite".into()));
        }
        Ok(model)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    /// All parameters, weights first then biases, layer by layer.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .flatten()
            .chain(self.biases.iter_mut().flatten())
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().flatten().chain(self.biases.iter().flatten())
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(self.biases.iter())
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub(crate) fn forward_cached(&self, x: &[f64]) -> ForwardCache {
        let layers = self.weights.len();
        let mut outputs = Vec::with_capacity(layers + 1);
        outputs.push(x.to_vec());
        for l in 0..layers {
            let (n_in, n_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let input = &outputs[l];
            let w = &self.weights[l];
            let mut out = self.biases[l].clone();
            for (o, acc) in out.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *acc += row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
            }
            if l + 1 < layers {
                for v in &mut out {
                    *v = self.activation.apply(*v);
                }
            }
            debug_assert_eq!(out.len(), n_out);
            outputs.push(out);
        }
        ForwardCache { outputs }
    }

    /// Accumulates `scale * dL/dθ` into `grads`, given `dL/dlogits`.
    pub(crate) fn backprop(
        &self,
        cache: &ForwardCache,
        dlogits: &[f64],
        scale: f64,
        grads: &mut crate::nn::Gradients,
    ) {
        let layers = self.weights.len();
        let mut delta: Vec<f64> = dlogits.iter().map(|d| d * scale).collect();
        for l in (0..layers).rev() {
            let n_in = self.layer_dims[l];
            let input = &cache.outputs[l];
            let gw = &mut grads.weights[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut gw[o * n_in..(o + 1) * n_in];
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            for (g, &d) in grads.biases[l].iter_mut().zip(&delta) {
                *g += d;
            }
            if l == 0 {
                break;
            }
            let w = &self.weights[l];
            let mut prev = vec![0.0; n_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * n_in..(o + 1) * n_in];
                for (p, &wv) in prev.iter_mut().zip(row) {
                    *p += wv * d;
                }
            }
            for (p, &y) in prev.iter_mut().zip(input) {
                *p *= self.activation.derivative_from_output(y);
            }
            delta = prev;
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).outputs.pop().unwrap()
    }

    pub(crate) fn check_rows<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<()> {
        let d = self.input_dim();
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::Shape(format!(
                    "row {i} has width {}, expected width {d}",
                    r.len()
                )));
            }
            if let Some(col) = r.iter().position(|v| !v.is_finite()) {
                return Err(Error::NumericInput { row: i, col });
            }
        }
        Ok(())
    }

    /// Softmax class probabilities, one row per input row.
    pub fn forward_proba<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<Vec<Vec<f64>>> {
        self.check_rows(rows)?;
        Ok(rows.iter().map(|r| softmax(&self.logits(r.as_ref()))).collect())
    }

    pub fn predict<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<Vec<usize>> {
        Ok(self
            .forward_proba(rows)?
            .iter()
            .map(|p| crate::nn::argmax(p))
            .collect())
    }
}
