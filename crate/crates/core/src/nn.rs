//! Small dense feed-forward networks with exact reverse-mode gradients.
//!
//! Parameters are stored flat, layer by layer: the weight matrix of a layer
//! (`fan_out x fan_in`, row-major) followed by its bias vector. Batches are
//! row-major `batch x width` buffers.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Dropout applied to the output of one hidden layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    /// Zero-based hidden layer index; `0` is the first hidden layer.
    pub hidden_layer: usize,
    /// Drop probability in `[0, 1)`.
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    layer_sizes: Vec<usize>,
    activation: Activation,
    dropout: Option<DropoutSpec>,
}

impl MlpArchitecture {
    pub fn new(
        layer_sizes: Vec<usize>,
        activation: Activation,
        dropout: Option<DropoutSpec>,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArchitecture(format!(
                "need at least an input and an output layer, got {} layer(s)",
                layer_sizes.len()
            )));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArchitecture(
                "layer sizes must be positive".into(),
            ));
        }
        if let Some(d) = dropout {
            let hidden = layer_sizes.len() - 2;
            if d.hidden_layer >= hidden {
                return Err(Error::InvalidArchitecture(format!(
                    "dropout addresses hidden layer {} but there are {hidden} hidden layer(s)",
                    d.hidden_layer
                )));
            }
            if !(0.0..1.0).contains(&d.p) {
                return Err(Error::InvalidArchitecture(format!(
                    "drop probability {} outside [0, 1)",
                    d.p
                )));
            }
        }
        Ok(Self {
            layer_sizes,
            activation,
            dropout,
        })
    }

    /// `input -> hidden... -> output` with ReLU and no dropout.
    pub fn dense(layer_sizes: &[usize]) -> Result<Self> {
        Self::new(layer_sizes.to_vec(), Activation::Relu, None)
    }

    pub fn with_dropout(&self, dropout: Option<DropoutSpec>) -> Result<Self> {
        Self::new(self.layer_sizes.clone(), self.activation, dropout)
    }

    pub fn with_activation(&self, activation: Activation) -> Self {
        Self {
            activation,
            ..self.clone()
        }
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dropout(&self) -> Option<DropoutSpec> {
        self.dropout
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of affine layers.
    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    /// Offset of each layer's weight block in the flat parameter vector.
    fn layer_offsets(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let start = offset;
            offset += (w[0] + 1) * w[1];
            (start, w[0], w[1])
        })
    }
}

/// Flattened network parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// How dropout behaves during a forward pass.
///
/// `Train` and `McDropout` sample masks identically; they are kept apart so
/// callers can say what the pass is for.
#[derive(Debug)]
pub enum ForwardMode<'a> {
    Deterministic,
    Train(&'a mut SeededRng),
    McDropout(&'a mut SeededRng),
}

impl ForwardMode<'_> {
    pub fn reborrow(&mut self) -> ForwardMode<'_> {
        match self {
            ForwardMode::Deterministic => ForwardMode::Deterministic,
            ForwardMode::Train(rng) => ForwardMode::Train(rng),
            ForwardMode::McDropout(rng) => ForwardMode::McDropout(rng),
        }
    }

    fn rng(&mut self) -> Option<&mut SeededRng> {
        match self {
            ForwardMode::Deterministic => None,
            ForwardMode::Train(rng) | ForwardMode::McDropout(rng) => Some(rng),
        }
    }
}

/// Cached intermediate values of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    layer_sizes: Vec<usize>,
    batch: usize,
    inputs: Vec<f64>,
    /// Pre-activations per affine layer.
    pre: Vec<Vec<f64>>,
    /// Layer outputs after the nonlinearity and dropout; the last entry is the
    /// network output.
    post: Vec<Vec<f64>>,
    /// Scaled dropout mask (`0` or `1/(1-p)`) and the hidden layer it applies to.
    mask: Option<(usize, Vec<f64>)>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn num_layers(&self) -> usize {
        self.pre.len()
    }

    pub fn pre_activations(&self, layer: usize) -> &[f64] {
        &self.pre[layer]
    }

    /// Output of affine layer `layer` after activation and dropout.
    pub fn activations(&self, layer: usize) -> &[f64] {
        &self.post[layer]
    }

    pub fn dropout_mask(&self) -> Option<(usize, &[f64])> {
        self.mask.as_ref().map(|(l, m)| (*l, m.as_slice()))
    }

    pub fn output(&self) -> &[f64] {
        self.post.last().unwrap()
    }
}

/// Default initializer: every weight and bias of a layer drawn from
/// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_params(arch: &MlpArchitecture, rng: &mut SeededRng) -> ParamVector {
    let mut params = Vec::with_capacity(arch.num_params());
    for w in arch.layer_sizes.windows(2) {
        let bound = 1.0 / (w[0] as f64).sqrt();
        for _ in 0..(w[0] + 1) * w[1] {
            params.push(rng.random_range(-bound..=bound));
        }
    }
    ParamVector(params)
}

fn check_params(arch: &MlpArchitecture, params: &[f64]) -> Result<()> {
    if params.len() != arch.num_params() {
        return Err(Error::DimensionMismatch {
            context: "parameter vector",
            expected: arch.num_params(),
            found: params.len(),
        });
    }
    Ok(())
}

/// Forward pass for a single input.
pub fn forward(
    arch: &MlpArchitecture,
    params: &[f64],
    x: &[f64],
    mode: ForwardMode<'_>,
) -> Result<(Vec<f64>, ForwardTrace)> {
    if x.len() != arch.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "network input",
            expected: arch.input_dim(),
            found: x.len(),
        });
    }
    forward_batch(arch, params, x, mode)
}

/// Forward pass for a row-major batch of inputs.
///
/// Returns the row-major `batch x output_dim` outputs and the trace.
pub fn forward_batch(
    arch: &MlpArchitecture,
    params: &[f64],
    inputs: &[f64],
    mut mode: ForwardMode<'_>,
) -> Result<(Vec<f64>, ForwardTrace)> {
    check_params(arch, params)?;
    let in_dim = arch.input_dim();
    if inputs.len() % in_dim != 0 {
        return Err(Error::DimensionMismatch {
            context: "input batch",
            expected: in_dim,
            found: inputs.len() % in_dim,
        });
    }
    let batch = inputs.len() / in_dim;
    let num_layers = arch.num_layers();
    let mut pre = Vec::with_capacity(num_layers);
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(num_layers);
    let mut mask = None;

    for (layer, (offset, fan_in, fan_out)) in arch.layer_offsets().enumerate() {
        let weights = &params[offset..offset + fan_in * fan_out];
        let bias = &params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
        let input = if layer == 0 {
            inputs
        } else {
            post[layer - 1].as_slice()
        };
        let mut z = vec![0.0; batch * fan_out];
        for (row_in, row_out) in input.chunks_exact(fan_in).zip(z.chunks_exact_mut(fan_out)) {
            for (j, out) in row_out.iter_mut().enumerate() {
                let w_row = &weights[j * fan_in..(j + 1) * fan_in];
                *out = bias[j] + w_row.iter().zip(row_in).map(|(w, a)| w * a).sum::<f64>();
            }
        }
        let is_output = layer + 1 == num_layers;
        let mut a = if is_output {
            z.clone()
        } else {
            z.iter().map(|&v| arch.activation.apply(v)).collect()
        };
        if let (Some(spec), Some(rng)) = (arch.dropout, mode.rng()) {
            if !is_output && spec.hidden_layer == layer {
                let keep_scale = 1.0 / (1.0 - spec.p);
                let m: Vec<f64> = (0..a.len())
                    .map(|_| {
                        if rng.random::<f64>() < spec.p {
                            0.0
                        } else {
                            keep_scale
                        }
                    })
                    .collect();
                for (v, s) in a.iter_mut().zip(&m) {
                    *v *= s;
                }
                mask = Some((layer, m));
            }
        }
        pre.push(z);
        post.push(a);
    }

    let output = post.last().unwrap().clone();
    Ok((
        output,
        ForwardTrace {
            layer_sizes: arch.layer_sizes.clone(),
            batch,
            inputs: inputs.to_vec(),
            pre,
            post,
            mask,
        },
    ))
}

/// Gradient of `sum(output_grad * output)` with respect to the parameters.
pub fn backward(
    arch: &MlpArchitecture,
    params: &[f64],
    trace: &ForwardTrace,
    output_grad: &[f64],
) -> Result<ParamVector> {
    let mut grad = ParamVector::zeros(arch.num_params());
    backward_into(arch, params, trace, output_grad, &mut grad)?;
    Ok(grad)
}

/// Like [`backward`] but accumulates into `grad`.
pub fn backward_into(
    arch: &MlpArchitecture,
    params: &[f64],
    trace: &ForwardTrace,
    output_grad: &[f64],
    grad: &mut [f64],
) -> Result<()> {
    check_params(arch, params)?;
    if trace.layer_sizes != arch.layer_sizes {
        return Err(Error::InvalidArchitecture(
            "trace was produced by a different architecture".into(),
        ));
    }
    if grad.len() != params.len() {
        return Err(Error::DimensionMismatch {
            context: "gradient buffer",
            expected: params.len(),
            found: grad.len(),
        });
    }
    let batch = trace.batch;
    if output_grad.len() != batch * arch.output_dim() {
        return Err(Error::DimensionMismatch {
            context: "output gradient",
            expected: batch * arch.output_dim(),
            found: output_grad.len(),
        });
    }

    let offsets: Vec<_> = arch.layer_offsets().collect();
    let num_layers = offsets.len();
    // Gradient with respect to the current layer's pre-activations.
    let mut delta = output_grad.to_vec();
    for layer in (0..num_layers).rev() {
        let (offset, fan_in, fan_out) = offsets[layer];
        let input = if layer == 0 {
            trace.inputs.as_slice()
        } else {
            trace.post[layer - 1].as_slice()
        };
        let (gw, gb) = grad[offset..offset + (fan_in + 1) * fan_out].split_at_mut(fan_in * fan_out);
        for (row_d, row_in) in delta.chunks_exact(fan_out).zip(input.chunks_exact(fan_in)) {
            for (j, &d) in row_d.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[j] += d;
                for (g, &a) in gw[j * fan_in..(j + 1) * fan_in].iter_mut().zip(row_in) {
                    *g += d * a;
                }
            }
        }
        if layer == 0 {
            break;
        }
        // Propagate to the previous layer's outputs, then through its
        // dropout mask and nonlinearity.
        let weights = &params[offset..offset + fan_in * fan_out];
        let mut prev = vec![0.0; batch * fan_in];
        for (row_d, row_p) in delta.chunks_exact(fan_out).zip(prev.chunks_exact_mut(fan_in)) {
            for (j, &d) in row_d.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, &w) in row_p.iter_mut().zip(&weights[j * fan_in..(j + 1) * fan_in]) {
                    *p += d * w;
                }
            }
        }
        let below = layer - 1;
        let z = &trace.pre[below];
        let a = &trace.post[below];
        match &trace.mask {
            Some((masked, m)) if *masked == below => {
                for i in 0..prev.len() {
                    // a = act(z) * m, so act(z) = a / m when m != 0.
                    if m[i] == 0.0 {
                        prev[i] = 0.0;
                    } else {
                        let raw = a[i] / m[i];
                        prev[i] *= m[i] * arch.activation.derivative(z[i], raw);
                    }
                }
            }
            _ => {
                for i in 0..prev.len() {
                    prev[i] *= arch.activation.derivative(z[i], a[i]);
                }
            }
        }
        delta = prev;
    }
    Ok(())
}

/// Central-difference gradient of `loss` at `params` with step `h`.
pub fn finite_diff_grad<F>(mut loss: F, params: &[f64], h: f64) -> ParamVector
where
    F: FnMut(&[f64]) -> f64,
{
    let mut theta = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + h;
        let up = loss(&theta);
        theta[i] = orig - h;
        let down = loss(&theta);
        theta[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    ParamVector(grad)
}

/// Coordinate-wise relative error `|a-b| / max(|a|, |b|, 1e-6)`, maximised
/// over coordinates. The floor keeps coordinates whose true value is
/// essentially zero from reporting round-off as a relative error.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
