//! Small dense networks with explicit forward/backward passes and Adam.
//!
//! Weights are `in_dim x out_dim`, activations apply elementwise, and the
//! backward pass returns parameter gradients plus the gradient with respect
//! to the input batch so heads can feed encoders.

use crate::error::{AnlError, Result};
use crate::math::{Mat64, Vec64};
use crate::rng::SeededRng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative at the pre-activation value. The kink at relu zero takes
    /// the left limit (0), a consistent subgradient.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Mat64,
    pub bias: Vec64,
    pub activation: Activation,
}

/// Fully connected network. Layer weights are drawn uniformly from
/// +-sqrt(6 / (fan_in + fan_out)); biases start at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    input_dim: usize,
    layers: Vec<Layer>,
}

impl DenseNet {
    pub fn new(input_dim: usize, spec: &[(usize, Activation)], rng: &mut SeededRng) -> Result<Self> {
        if input_dim == 0 || spec.is_empty() {
            return Err(AnlError::Config(
                "network needs a positive input dim and at least one layer".into(),
            ));
        }
        let mut layers = Vec::with_capacity(spec.len());
        let mut fan_in = input_dim;
        for &(fan_out, activation) in spec {
            if fan_out == 0 {
                return Err(AnlError::Config("layer width must be positive".into()));
            }
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            layers.push(Layer {
                weight: Mat64::new(fan_in, fan_out, data)?,
                bias: Vec64::zeros(fan_out),
                activation,
            });
            fan_in = fan_out;
        }
        Ok(DenseNet { input_dim, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.bias.len())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Batch forward pass; the cache feeds `backward`.
    pub fn forward(&self, batch: &Mat64) -> Result<(Mat64, ForwardCache)> {
        if batch.cols() != self.input_dim {
            return Err(AnlError::dim(
                "DenseNet::forward",
                format!("batch cols {} vs input dim {}", batch.cols(), self.input_dim),
            ));
        }
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_acts = Vec::with_capacity(self.layers.len());
        let mut current = batch.clone();
        for layer in &self.layers {
            let mut z = current.matmul(&layer.weight)?;
            let b = layer.bias.as_slice();
            for i in 0..z.rows() {
                let row = z.row_mut(i);
                for (v, bj) in row.iter_mut().zip(b) {
                    *v += bj;
                }
            }
            let mut a = z.clone();
            for i in 0..a.rows() {
                for v in a.row_mut(i) {
                    *v = layer.activation.apply(*v);
                }
            }
            layer_inputs.push(current);
            pre_acts.push(z);
            current = a;
        }
        Ok((
            current,
            ForwardCache {
                layer_inputs,
                pre_acts,
            },
        ))
    }

    /// Convenience forward without keeping the cache.
    pub fn infer(&self, batch: &Mat64) -> Result<Mat64> {
        Ok(self.forward(batch)?.0)
    }

    /// Backpropagate `d_output` (gradient of the loss with respect to the
    /// network output) through the cached pass.
    pub fn backward(&self, cache: &ForwardCache, d_output: &Mat64) -> Result<GradTape> {
        if cache.pre_acts.len() != self.layers.len() {
            return Err(AnlError::dim("DenseNet::backward", "cache depth mismatch"));
        }
        let last = cache
            .pre_acts
            .last()
            .ok_or_else(|| AnlError::domain("DenseNet::backward", "empty network"))?;
        if d_output.rows() != last.rows() || d_output.cols() != last.cols() {
            return Err(AnlError::dim(
                "DenseNet::backward",
                format!(
                    "d_output {}x{} vs output {}x{}",
                    d_output.rows(),
                    d_output.cols(),
                    last.rows(),
                    last.cols()
                ),
            ));
        }
        let mut grads = vec![
            LayerGrad {
                d_weight: Mat64::zeros(0, 0),
                d_bias: Vec64::zeros(0),
            };
            self.layers.len()
        ];
        let mut upstream = d_output.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre_acts[l];
            let x = &cache.layer_inputs[l];
            let mut dz = upstream;
            for i in 0..dz.rows() {
                let zr = z.row(i);
                let dr = dz.row_mut(i);
                for (v, zj) in dr.iter_mut().zip(zr) {
                    *v *= layer.activation.derivative(*zj);
                }
            }
            let d_weight = x.matmul_ta(&dz)?;
            let mut d_bias = vec![0.0; layer.bias.len()];
            for i in 0..dz.rows() {
                for (acc, v) in d_bias.iter_mut().zip(dz.row(i)) {
                    *acc += v;
                }
            }
            upstream = dz.matmul_tb(&layer.weight)?;
            grads[l] = LayerGrad {
                d_weight,
                d_bias: Vec64::new(d_bias)?,
            };
        }
        Ok(GradTape {
            layers: grads,
            d_input: upstream,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum()
    }

    /// Parameters flattened layer by layer, weights row-major then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    /// Overwrite parameters from a flat buffer in `to_flat` order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(AnlError::dim(
                "DenseNet::assign_flat",
                format!("{} values for {} params", flat.len(), self.param_count()),
            ));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let wn = l.weight.rows() * l.weight.cols();
            let (rows, cols) = (l.weight.rows(), l.weight.cols());
            l.weight = Mat64::new(rows, cols, flat[off..off + wn].to_vec())?;
            off += wn;
            let bn = l.bias.len();
            l.bias = Vec64::new(flat[off..off + bn].to_vec())?;
            off += bn;
        }
        Ok(())
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text =
            serde_json::to_string_pretty(self).map_err(|e| AnlError::json(path, e))?;
        std::fs::write(path, text).map_err(|e| AnlError::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| AnlError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| AnlError::json(path, e))
    }
}

/// Activations recorded during `forward`, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; element 0 is the original batch.
    layer_inputs: Vec<Mat64>,
    /// Pre-activation values of each layer.
    pre_acts: Vec<Mat64>,
}

#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub d_weight: Mat64,
    pub d_bias: Vec64,
}

/// Gradients of one backward pass: per-layer parameter gradients plus the
/// gradient with respect to the input batch.
#[derive(Debug, Clone)]
pub struct GradTape {
    pub layers: Vec<LayerGrad>,
    pub d_input: Mat64,
}

impl GradTape {
    /// Elementwise sum of two tapes over the same architecture.
    pub fn add(&self, other: &GradTape) -> Result<GradTape> {
        if self.layers.len() != other.layers.len() {
            return Err(AnlError::dim("GradTape::add", "layer count mismatch"));
        }
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| {
                Ok(LayerGrad {
                    d_weight: a.d_weight.add(&b.d_weight)?,
                    d_bias: Vec64::new(
                        a.d_bias
                            .as_slice()
                            .iter()
                            .zip(b.d_bias.as_slice())
                            .map(|(x, y)| x + y)
                            .collect(),
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GradTape {
            layers,
            d_input: self.d_input.add(&other.d_input)?,
        })
    }

    /// Parameter gradients flattened in `DenseNet::to_flat` order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.d_weight.as_slice());
            out.extend_from_slice(l.bias_slice());
        }
        out
    }
}

impl LayerGrad {
    fn bias_slice(&self) -> &[f64] {
        self.d_bias.as_slice()
    }
}

/// Adam optimizer state over a network's flattened parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. Zero gradients leave parameters
/// unchanged (the step counter still advances).
pub fn adam_step(net: &mut DenseNet, tape: &GradTape, state: &mut AdamState) -> Result<()> {
    let mut params = net.to_flat();
    let grads = tape.to_flat();
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(AnlError::dim(
            "adam_step",
            format!(
                "params {} grads {} state {}",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    if !grads.iter().all(|g| g.is_finite()) {
        return Err(AnlError::domain("adam_step", "non-finite gradient"));
    }
    state.step += 1;
    let b1t = 1.0 - state.beta1.powi(state.step as i32);
    let b2t = 1.0 - state.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / b1t;
        let v_hat = state.v[i] / b2t;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    net.assign_flat(&params)
}

/// Softmax cross-entropy for integer labels: mean over the batch.
/// Returns the loss and its gradient with respect to the logits.
pub fn cross_entropy_loss_grad(logits: &Mat64, labels: &[usize]) -> Result<(f64, Mat64)> {
    if logits.rows() != labels.len() {
        return Err(AnlError::dim(
            "cross_entropy_loss_grad",
            format!("{} rows vs {} labels", logits.rows(), labels.len()),
        ));
    }
    if logits.rows() == 0 {
        return Err(AnlError::domain("cross_entropy_loss_grad", "empty batch"));
    }
    let b = logits.rows() as f64;
    let per_row: Vec<Result<(f64, Vec<f64>)>> = crate::par::map_indexed(logits.rows(), |i| {
        let label = labels[i];
        if label >= logits.cols() {
            return Err(AnlError::domain(
                "cross_entropy_loss_grad",
                format!("label {} out of {} classes", label, logits.cols()),
            ));
        }
        let lp = crate::math::log_softmax(logits.row(i));
        let loss = -lp[label];
        let grad: Vec<f64> = lp
            .iter()
            .enumerate()
            .map(|(k, &l)| (l.exp() - if k == label { 1.0 } else { 0.0 }) / b)
            .collect();
        Ok((loss, grad))
    });
    let mut loss = 0.0;
    let mut grad = Mat64::zeros(logits.rows(), logits.cols());
    for (i, r) in per_row.into_iter().enumerate() {
        let (l, g) = r?;
        loss += l / b;
        grad.set_row(i, &g)?;
    }
    Ok((loss, grad))
}

/// Fraction of rows whose argmax logit matches the label.
pub fn accuracy(logits: &Mat64, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() || logits.rows() == 0 {
        return Err(AnlError::dim("accuracy", "rows vs labels"));
    }
    let mut hits = 0usize;
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let mut best = 0usize;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if best == labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / logits.rows() as f64)
}
