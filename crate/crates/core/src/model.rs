//! Feed-forward instance scorers emitting `t = log p(y = 1 | x)`.
//!
//! Hidden layers use ReLU; the single output logit is clamped to
//! `[-LOGIT_CLAMP, LOGIT_CLAMP]` and passed through a log-sigmoid, so `t` is
//! always finite and strictly negative. Weights are stored row-major with
//! shape `(out, in)`; batched inputs are flat row-major `(batch, in)` buffers.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

pub const LOGIT_CLAMP: f64 = 30.0;

const CHECKPOINT_FORMAT: &str = "countloss-mlp";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input dimension, hidden widths, then the output width (always 1).
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: &[usize]) -> Self {
        let mut layer_widths = Vec::with_capacity(hidden.len() + 2);
        layer_widths.push(input_dim);
        layer_widths.extend_from_slice(hidden);
        layer_widths.push(1);
        MlpSpec {
            layer_widths,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::arg(
                "an MLP needs an input width and at least one layer",
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::arg("layer widths must be positive"));
        }
        if *self.layer_widths.last().unwrap() != 1 {
            return Err(Error::arg("the final layer must have width 1"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn forward(&self, x: &[f64], batch: usize, out: &mut Vec<f64>) {
        out.clear();
        out.reserve(batch * self.out_dim);
        for row in x.chunks_exact(self.in_dim).take(batch) {
            for (w, b) in self.weights.chunks_exact(self.in_dim).zip(&self.bias) {
                out.push(b + dot(w, row));
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `log(sigmoid(z))` without overflow.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    spec: MlpSpec,
    seed: u64,
    layers: Vec<Dense>,
}

/// Activations kept by [`Mlp::forward_batch`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    batch: usize,
    /// `inputs[l]` is the input to layer `l`; post-ReLU for `l > 0`.
    inputs: Vec<Vec<f64>>,
    logits: Vec<f64>,
    log_probs: Vec<f64>,
}

impl ForwardCache {
    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Parameter gradients with the same layout as the model's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    pub fn zeros_like(model: &Mlp) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.iter_mut().zip(ow).for_each(|(x, y)| *x += y);
            b.iter_mut().zip(ob).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in &mut self.layers {
            w.iter_mut().for_each(|x| *x *= factor);
            b.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().chain(b).all(|x| x.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }
}

impl Mlp {
    /// Uniform fan-in initialization: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`
    /// for layers feeding a ReLU and `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for
    /// the output layer. Biases start at zero.
    pub fn new(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = spec.layer_widths.len() - 1;
        let layers = spec
            .layer_widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (in_dim, out_dim) = (w[0], w[1]);
                let bound = if l + 1 == n_layers {
                    (1.0 / in_dim as f64).sqrt()
                } else {
                    (6.0 / in_dim as f64).sqrt()
                };
                Dense {
                    in_dim,
                    out_dim,
                    weights: (0..in_dim * out_dim)
                        .map(|_| rng.random_range(-bound..bound))
                        .collect(),
                    bias: vec![0.0; out_dim],
                }
            })
            .collect();
        Ok(Mlp { spec, seed, layers })
    }

    /// All parameters zero; every input scores `log 0.5`.
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        let mut m = Mlp::new(spec, 0)?;
        for l in &mut m.layers {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        Ok(m)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn forward_batch(
        &self,
        features: &[f64],
        batch: usize,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        let d = self.input_dim();
        if features.len() != batch * d {
            return Err(Error::arg(format!(
                "expected {batch} rows of width {d}, got {} values",
                features.len()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        inputs.push(features.to_vec());
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.forward(&inputs[l], batch, &mut out);
            if l + 1 < self.layers.len() {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
                inputs.push(std::mem::take(&mut out));
            }
        }
        let logits = out;
        let log_probs: Vec<f64> = logits
            .iter()
            .map(|&z| log_sigmoid(z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)))
            .collect();
        Ok((
            log_probs.clone(),
            ForwardCache {
                batch,
                inputs,
                logits,
                log_probs,
            },
        ))
    }

    pub fn forward(&self, features: &[f64]) -> Result<(f64, ForwardCache)> {
        let (t, cache) = self.forward_batch(features, 1)?;
        Ok((t[0], cache))
    }

    /// Gradients of `sum_b d_t[b] * t_b` with respect to all parameters.
    pub fn backward(&self, cache: &ForwardCache, d_t: &[f64]) -> Result<Gradients> {
        if d_t.len() != cache.batch {
            return Err(Error::arg(format!(
                "{} output gradients for a batch of {}",
                d_t.len(),
                cache.batch
            )));
        }
        let mut grads = Gradients::zeros_like(self);
        // dt/dz = 1 - exp(t), zero where the clamp is active
        let mut delta: Vec<f64> = d_t
            .iter()
            .zip(&cache.logits)
            .zip(&cache.log_probs)
            .map(|((&g, &z), &t)| {
                if z.abs() > LOGIT_CLAMP {
                    0.0
                } else {
                    g * -t.exp_m1()
                }
            })
            .collect();

        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &cache.inputs[l];
            let (gw, gb) = &mut grads.layers[l];
            let mut next_delta = if l > 0 {
                vec![0.0; cache.batch * layer.in_dim]
            } else {
                Vec::new()
            };
            for b in 0..cache.batch {
                let x = &input[b * layer.in_dim..(b + 1) * layer.in_dim];
                let dz = &delta[b * layer.out_dim..(b + 1) * layer.out_dim];
                for (o, &g) in dz.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    gb[o] += g;
                    axpy(g, x, &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim]);
                    if l > 0 {
                        let w = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                        axpy(
                            g,
                            w,
                            &mut next_delta[b * layer.in_dim..(b + 1) * layer.in_dim],
                        );
                    }
                }
            }
            if l > 0 {
                // ReLU subgradient, 0 at 0
                for (nd, &a) in next_delta.iter_mut().zip(input.iter()) {
                    if a <= 0.0 {
                        *nd = 0.0;
                    }
                }
                delta = next_delta;
            }
        }
        Ok(grads)
    }

    /// `t` for every row of a row-major feature matrix, in chunks on the pool.
    pub fn predict_log_probs(&self, features: &[f64], rows: usize) -> Result<Vec<f64>> {
        let d = self.input_dim();
        if features.len() != rows * d {
            return Err(Error::arg(format!(
                "expected {rows} rows of width {d}, got {} values",
                features.len()
            )));
        }
        const ROWS_PER_CHUNK: usize = 256;
        let chunks = rows.div_ceil(ROWS_PER_CHUNK);
        let parts = par::map_range(chunks, |c| {
            let start = c * ROWS_PER_CHUNK;
            let end = (start + ROWS_PER_CHUNK).min(rows);
            self.forward_batch(&features[start * d..end * d], end - start)
                .map(|(t, _)| t)
        });
        let mut out = Vec::with_capacity(rows);
        for part in parts {
            out.extend(part?);
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|x| x.is_finite()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_checkpoint_string()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_str(&fs::read_to_string(path)?)
    }

    /// JSON checkpoint; floats are written in shortest round-trip form.
    pub fn to_checkpoint_string(&self) -> Result<String> {
        let ckpt = CheckpointRef {
            format: CHECKPOINT_FORMAT,
            version: CHECKPOINT_VERSION,
            model: self,
        };
        Ok(serde_json::to_string_pretty(&ckpt)?)
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::arg(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let model = ckpt.model;
        model.spec.validate()?;
        let consistent = model.layers.len() + 1 == model.spec.layer_widths.len()
            && model
                .layers
                .iter()
                .zip(model.spec.layer_widths.windows(2))
                .all(|(l, w)| {
                    l.in_dim == w[0]
                        && l.out_dim == w[1]
                        && l.weights.len() == w[0] * w[1]
                        && l.bias.len() == w[1]
                });
        if !consistent {
            return Err(Error::arg("checkpoint layer shapes do not match its spec"));
        }
        Ok(model)
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format: &'a str,
    version: u32,
    model: &'a Mlp,
}

#[derive(Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub l1: f64,
}

impl OptimConfig {
    pub fn adam(learning_rate: f64) -> Self {
        OptimConfig {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            l1: 0.0,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        OptimConfig {
            kind: OptimizerKind::Sgd,
            ..Self::adam(learning_rate)
        }
    }

    pub fn with_regularization(mut self, weight_decay: f64, l1: f64) -> Self {
        self.weight_decay = weight_decay;
        self.l1 = l1;
        self
    }
}

/// Optimizer hyperparameters, step count and Adam moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: OptimConfig,
    pub step_count: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl OptimState {
    pub fn new(config: OptimConfig, model: &Mlp) -> Result<Self> {
        if !(config.learning_rate >= 0.0) || config.weight_decay < 0.0 || config.l1 < 0.0 {
            return Err(Error::arg(
                "learning rate, weight decay and l1 must be non-negative",
            ));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::arg("Adam betas must lie in [0, 1)"));
        }
        let n = model.parameter_count();
        Ok(OptimState {
            config,
            step_count: 0,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        })
    }

    /// One update. The effective gradient is `g + wd * theta + l1 * sign(theta)`.
    pub fn step(&mut self, model: &mut Mlp, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != model.layers.len()
            || grads
                .layers
                .iter()
                .zip(&model.layers)
                .any(|((w, b), l)| w.len() != l.weights.len() || b.len() != l.bias.len())
        {
            return Err(Error::arg("gradient shapes do not match the model"));
        }
        self.step_count += 1;
        let c = self.config;
        let (bias1, bias2) = match c.kind {
            OptimizerKind::Adam => (
                1.0 - c.beta1.powi(self.step_count as i32),
                1.0 - c.beta2.powi(self.step_count as i32),
            ),
            OptimizerKind::Sgd => (1.0, 1.0),
        };
        let mut idx = 0;
        for (layer, (gw, gb)) in model.layers.iter_mut().zip(&grads.layers) {
            let params = layer.weights.iter_mut().chain(layer.bias.iter_mut());
            for (theta, &g) in params.zip(gw.iter().chain(gb)) {
                let sign = if *theta > 0.0 {
                    1.0
                } else if *theta < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let g = g + c.weight_decay * *theta + c.l1 * sign;
                match c.kind {
                    OptimizerKind::Sgd => *theta -= c.learning_rate * g,
                    OptimizerKind::Adam => {
                        let m = &mut self.first_moment[idx];
                        let v = &mut self.second_moment[idx];
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        let m_hat = *m / bias1;
                        let v_hat = *v / bias2;
                        *theta -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
                    }
                }
                idx += 1;
            }
        }
        Ok(())
    }
}
