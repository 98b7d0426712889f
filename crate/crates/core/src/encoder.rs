//! MLP embedding network with unit-normalized outputs, analytic gradients and
//! SGD with momentum.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::NORM_EPS;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and the activation.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden_dims: vec![64],
            embed_dim: 32,
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("encoder input_dim must be positive"));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::config("encoder needs at least one hidden layer"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::config("hidden layer widths must be positive"));
        }
        if self.embed_dim < 2 {
            return Err(Error::config("embed_dim must be at least 2"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every layer in order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.embed_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `fan_in × fan_out`; a batch row `h` maps to `h · weight + bias`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Layer weights and biases. Also used for gradients and optimizer velocity,
/// which share the parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
}

impl EncoderParams {
    pub fn zeros(config: &EncoderConfig) -> Self {
        Self {
            layers: config
                .layer_shapes()
                .into_iter()
                .map(|(i, o)| Layer { weight: Array2::zeros((i, o)), bias: Array1::zeros(o) })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer { weight: Array2::zeros(l.weight.raw_dim()), bias: Array1::zeros(l.bias.len()) })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All values in declaration order: layer 0 weight (row-major), layer 0
    /// bias, layer 1 weight, ...
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::DimensionMismatch { expected: self.num_params(), got: values.len() });
        }
        let mut it = values.iter();
        for l in &mut self.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn check_shapes(&self, config: &EncoderConfig) -> Result<()> {
        let shapes = config.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::DimensionMismatch { expected: shapes.len(), got: self.layers.len() });
        }
        for ((i, o), l) in shapes.into_iter().zip(&self.layers) {
            if l.weight.dim() != (i, o) || l.bias.len() != o {
                return Err(Error::DimensionMismatch { expected: i * o + o, got: l.weight.len() + l.bias.len() });
            }
        }
        Ok(())
    }
}

/// Weights ~ N(0, 1) / sqrt(fan_in), biases zero.
pub fn init(config: &EncoderConfig) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = rng::from_seed(config.seed);
    let mut params = EncoderParams::zeros(config);
    for l in &mut params.layers {
        let scale = 1.0 / (l.weight.nrows() as f64).sqrt();
        l.weight.mapv_inplace(|_| scale * rng.sample::<f64, _>(StandardNormal));
    }
    Ok(params)
}

/// Config plus parameters: a complete, runnable network.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        let params = init(&config)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: EncoderConfig, params: EncoderParams) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    pub fn embed(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        forward(&self.config, &self.params, x)
    }
}

/// Intermediate values of one forward pass, consumed by `backward`.
pub struct ForwardCache {
    /// Inputs of every layer (`inputs[0]` is the batch).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of every hidden layer.
    pre: Vec<Array2<f64>>,
    /// Final layer output before normalization.
    raw: Array2<f64>,
    /// Normalized embeddings.
    out: Array2<f64>,
}

impl ForwardCache {
    pub fn embeddings(&self) -> &Array2<f64> {
        &self.out
    }
}

pub fn forward_cached(config: &EncoderConfig, params: &EncoderParams, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
    if x.ncols() != config.input_dim {
        return Err(Error::DimensionMismatch { expected: config.input_dim, got: x.ncols() });
    }
    let n_layers = params.layers.len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pre = Vec::with_capacity(n_layers - 1);
    let mut h = x.to_owned();
    for (li, layer) in params.layers.iter().enumerate() {
        let z = h.dot(&layer.weight) + &layer.bias;
        inputs.push(h);
        if li + 1 == n_layers {
            h = z;
        } else {
            h = z.mapv(|v| config.activation.apply(v));
            pre.push(z);
        }
    }
    let raw = h;
    let mut out = raw.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt().max(NORM_EPS);
        row.mapv_inplace(|v| v / n);
    }
    Ok(ForwardCache { inputs, pre, raw, out })
}

/// Unit-norm embeddings of every row of `x`.
pub fn forward(config: &EncoderConfig, params: &EncoderParams, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    Ok(forward_cached(config, params, x)?.out)
}

/// Parameter gradients given `adjoint = dL/d(embeddings)`.
pub fn backward(
    config: &EncoderConfig,
    params: &EncoderParams,
    cache: &ForwardCache,
    adjoint: ArrayView2<'_, f64>,
) -> Result<EncoderParams> {
    if adjoint.dim() != cache.out.dim() {
        return Err(Error::DimensionMismatch { expected: cache.out.len(), got: adjoint.len() });
    }
    // Through y = z / max(|z|, eps).
    let mut delta = Array2::<f64>::zeros(cache.raw.raw_dim());
    for ((mut d, z), (y, g)) in delta
        .axis_iter_mut(Axis(0))
        .zip(cache.raw.axis_iter(Axis(0)))
        .zip(cache.out.axis_iter(Axis(0)).zip(adjoint.axis_iter(Axis(0))))
    {
        let norm = z.dot(&z).sqrt();
        if norm > NORM_EPS {
            let yg = y.dot(&g);
            d.assign(&((&g - &(&y * yg)) / norm));
        } else {
            d.assign(&(&g / NORM_EPS));
        }
    }

    let mut grads = params.zeros_like();
    for li in (0..params.layers.len()).rev() {
        let input = &cache.inputs[li];
        grads.layers[li].weight = input.t().dot(&delta);
        grads.layers[li].bias = delta.sum_axis(Axis(0));
        if li > 0 {
            let mut back = delta.dot(&params.layers[li].weight.t());
            let pre = &cache.pre[li - 1];
            let post = &cache.inputs[li];
            ndarray::Zip::from(&mut back)
                .and(pre)
                .and(post)
                .for_each(|b, &p, &q| *b *= config.activation.derivative(p, q));
            delta = back;
        }
    }
    Ok(grads)
}

/// Forward then backward in one call.
pub fn grad(
    config: &EncoderConfig,
    params: &EncoderParams,
    x: ArrayView2<'_, f64>,
    adjoint: ArrayView2<'_, f64>,
) -> Result<EncoderParams> {
    let cache = forward_cached(config, params, x)?;
    backward(config, params, &cache, adjoint)
}

/// SGD with momentum: `v <- m v + g; p <- p - lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: EncoderParams,
}

impl Sgd {
    pub fn new(params: &EncoderParams, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        Ok(Self { lr, momentum, velocity: params.zeros_like() })
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &EncoderParams) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        for ((p, g), v) in params.layers.iter_mut().zip(&grads.layers).zip(&mut self.velocity.layers) {
            ndarray::Zip::from(&mut p.weight)
                .and(&g.weight)
                .and(&mut v.weight)
                .for_each(|p, &g, v| {
                    *v = self.momentum * *v + g;
                    *p -= self.lr * *v;
                });
            ndarray::Zip::from(&mut p.bias)
                .and(&g.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, v| {
                    *v = self.momentum * *v + g;
                    *p -= self.lr * *v;
                });
        }
        Ok(())
    }
}
