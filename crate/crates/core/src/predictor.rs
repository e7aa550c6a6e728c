//! Danger-signal forecasters.
//!
//! A small dense network trained with plain SGD, plus a closed-form ridge
//! regression model. Both sit behind [`Predictor`], which is what the
//! simulators and the runner consume. Conformal tracking wraps whichever one
//! is loaded; coverage does not depend on its quality.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{finite, Error, Result};

/// Danger level in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct DangerSignal(f64);

impl DangerSignal {
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::OutOfRange {
                what: "danger signal",
                value,
                expected: "[0, 1]".into(),
            })
        }
    }

    /// Clamps into `[0, 1]`; NaN maps to 1 (maximal danger).
    pub fn saturating(value: f64) -> Self {
        if value.is_nan() {
            Self(1.0)
        } else {
            Self(value.clamp(0.0, 1.0))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Maps a distance in meters to `2 / (1 + exp(0.1 * l))`: 1 at contact, decaying to 0.
pub fn squash_distance(l: f64) -> Result<DangerSignal> {
    finite("distance", l)?;
    if l < 0.0 {
        return Err(Error::OutOfRange {
            what: "distance",
            value: l,
            expected: ">= 0".into(),
        });
    }
    Ok(DangerSignal(2.0 / (1.0 + (0.1 * l).exp())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a` and input `z`.
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
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            "sigmoid" => Activation::Sigmoid,
            "identity" => Activation::Identity,
            _ => return None,
        })
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z + (-z).exp()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Loss {
    Mse,
    /// Binary cross entropy with positive-sample terms scaled by `pos_weight`.
    WeightedBce { pos_weight: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub layer_widths: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub loss: Loss,
    pub learning_rate: f64,
}

impl MlpSpec {
    /// Three hidden layers (64, 128, 64), sigmoid head, MSE.
    pub fn highway(input_dim: usize) -> Self {
        Self {
            input_dim,
            layer_widths: vec![64, 128, 64],
            hidden_activation: Activation::Relu,
            output_activation: Activation::Sigmoid,
            loss: Loss::Mse,
            learning_rate: 1e-3,
        }
    }

    /// One hidden layer of 128, sigmoid head, BCE with positives weighted 5x.
    pub fn tracking(input_dim: usize) -> Self {
        Self {
            input_dim,
            layer_widths: vec![128],
            hidden_activation: Activation::Relu,
            output_activation: Activation::Sigmoid,
            loss: Loss::WeightedBce { pos_weight: 5.0 },
            learning_rate: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.layer_widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if let Loss::WeightedBce { pos_weight } = self.loss {
            if !(pos_weight > 0.0 && pos_weight.is_finite()) {
                return Err(Error::Config("pos_weight must be > 0".into()));
            }
            if self.output_activation != Activation::Sigmoid {
                return Err(Error::Config(
                    "weighted BCE needs a sigmoid output".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Dense layer, weights stored row-major as `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.bias.iter().zip(self.weights.chunks_exact(self.in_dim)).map(
            |(b, row)| b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>(),
        ));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub target: f64,
}

/// Per-parameter gradient, same shape as the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub layers: Vec<Layer>,
}

impl Gradient {
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }
}

impl Mlp {
    /// Weights and biases uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut fan_in = spec.input_dim;
        for &width in spec.layer_widths.iter().chain(std::iter::once(&1)) {
            let limit = 1.0 / (fan_in as f64).sqrt();
            let mut layer = Layer::zeros(fan_in, width);
            layer
                .weights
                .iter_mut()
                .chain(layer.bias.iter_mut())
                .for_each(|p| *p = rng.gen_range(-limit..=limit));
            layers.push(layer);
            fan_in = width;
        }
        Ok(Self { spec, layers })
    }

    /// Network with every parameter zero.
    pub fn zeroed(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut fan_in = spec.input_dim;
        for &width in spec.layer_widths.iter().chain(std::iter::once(&1)) {
            layers.push(Layer::zeros(fan_in, width));
            fan_in = width;
        }
        Ok(Self { spec, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn param_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for layer in &mut self.layers {
            let n = layer.weights.len();
            if index < n {
                return layer.weights.get_mut(index);
            }
            index -= n;
            let n = layer.bias.len();
            if index < n {
                return layer.bias.get_mut(index);
            }
            index -= n;
        }
        None
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.spec.input_dim {
            return Err(Error::Dimension {
                expected: self.spec.input_dim,
                got: input.len(),
            });
        }
        Ok(())
    }

    fn activation_for(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.spec.output_activation
        } else {
            self.spec.hidden_activation
        }
    }

    /// Pre-activations and activations of every layer; `acts[0]` is the input.
    fn trace(&self, input: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.out_dim);
            layer.affine(&acts[i], &mut z);
            let act = self.activation_for(i);
            acts.push(z.iter().map(|&v| act.apply(v)).collect());
            pre.push(z);
        }
        (pre, acts)
    }

    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        self.check_input(input)?;
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine(&cur, &mut next);
            let act = self.activation_for(i);
            next.iter_mut().for_each(|v| *v = act.apply(*v));
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur[0])
    }

    /// Loss of one sample and its derivative with respect to the output pre-activation.
    fn sample_loss(&self, z_out: f64, out: f64, target: f64) -> (f64, f64) {
        match self.spec.loss {
            Loss::Mse => {
                let diff = out - target;
                let d_out = 2.0 * diff;
                (
                    diff * diff,
                    d_out * self.spec.output_activation.derivative(z_out, out),
                )
            }
            Loss::WeightedBce { pos_weight } => {
                // Written on the logit for stability; the output is sigmoid(z_out).
                let loss =
                    pos_weight * target * softplus(-z_out) + (1.0 - target) * softplus(z_out);
                let p = sigmoid(z_out);
                let dz = pos_weight * target * (p - 1.0) + (1.0 - target) * p;
                (loss, dz)
            }
        }
    }

    /// Mean loss over the batch.
    pub fn loss(&self, batch: &[Sample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Training("empty batch".into()));
        }
        let mut total = 0.0;
        for s in batch {
            self.check_input(&s.input)?;
            let (pre, acts) = self.trace(&s.input);
            let z = pre.last().expect("at least one layer")[0];
            let out = acts.last().expect("at least one layer")[0];
            total += self.sample_loss(z, out, s.target).0;
        }
        Ok(total / batch.len() as f64)
    }

    /// Mean loss and its analytic gradient (backpropagation).
    pub fn loss_and_gradient(&self, batch: &[Sample]) -> Result<(f64, Gradient)> {
        if batch.is_empty() {
            return Err(Error::Training("empty batch".into()));
        }
        let mut grad = Gradient {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.in_dim, l.out_dim))
                .collect(),
        };
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for s in batch {
            self.check_input(&s.input)?;
            let (pre, acts) = self.trace(&s.input);
            let last = self.layers.len() - 1;
            let (loss, dz_out) = self.sample_loss(pre[last][0], acts[last + 1][0], s.target);
            total += loss;

            let mut delta = vec![dz_out * scale];
            for li in (0..self.layers.len()).rev() {
                let layer = &self.layers[li];
                let g = &mut grad.layers[li];
                let input = &acts[li];
                for (o, &d) in delta.iter().enumerate() {
                    g.bias[o] += d;
                    let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    row.iter_mut().zip(input).for_each(|(gw, x)| *gw += d * x);
                }
                if li == 0 {
                    break;
                }
                let act = self.activation_for(li - 1);
                let mut prev = vec![0.0; layer.in_dim];
                for (o, &d) in delta.iter().enumerate() {
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    prev.iter_mut().zip(row).for_each(|(p, w)| *p += d * w);
                }
                for (j, p) in prev.iter_mut().enumerate() {
                    *p *= act.derivative(pre[li - 1][j], acts[li][j]);
                }
                delta = prev;
            }
        }
        Ok((total * scale, grad))
    }

    /// One SGD step on the batch. Returns the loss before the step.
    pub fn train_step(&mut self, batch: &[Sample]) -> Result<f64> {
        let (loss, grad) = self.loss_and_gradient(batch)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss {loss}")));
        }
        let lr = self.spec.learning_rate;
        for (layer, g) in self.layers.iter_mut().zip(&grad.layers) {
            layer
                .weights
                .iter_mut()
                .zip(&g.weights)
                .for_each(|(w, gw)| *w -= lr * gw);
            layer
                .bias
                .iter_mut()
                .zip(&g.bias)
                .for_each(|(b, gb)| *b -= lr * gb);
        }
        Ok(loss)
    }

    /// Minibatch SGD until the epoch budget runs out or the epoch loss stops improving.
    pub fn fit(&mut self, data: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(Error::Training("empty dataset".into()));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut epoch_losses = Vec::new();
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.max_epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                batch.clear();
                batch.extend(chunk.iter().map(|&i| data[i].clone()));
                total += self.train_step(&batch)? * chunk.len() as f64;
            }
            let epoch_loss = total / data.len() as f64;
            let improvement = epoch_losses
                .last()
                .map(|prev: &f64| prev - epoch_loss);
            epoch_losses.push(epoch_loss);
            if improvement.is_some_and(|d| d < cfg.min_improvement) {
                break;
            }
        }
        Ok(TrainReport { epoch_losses })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub min_improvement: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            batch_size: 16,
            min_improvement: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Ridge regression `y = w.x + b` with an unpenalized intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn fit(data: &[Sample], ridge: f64) -> Result<Self> {
        let first = data
            .first()
            .ok_or_else(|| Error::Training("empty dataset".into()))?;
        let d = first.input.len();
        let n = data.len() as f64;
        let mut mean_x = vec![0.0; d];
        let mut mean_y = 0.0;
        for s in data {
            if s.input.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    got: s.input.len(),
                });
            }
            mean_x.iter_mut().zip(&s.input).for_each(|(m, x)| *m += x / n);
            mean_y += s.target / n;
        }
        let mut gram = vec![0.0; d * d];
        let mut rhs = vec![0.0; d];
        let mut centered = vec![0.0; d];
        for s in data {
            centered
                .iter_mut()
                .zip(s.input.iter().zip(&mean_x))
                .for_each(|(c, (x, m))| *c = x - m);
            let yc = s.target - mean_y;
            for i in 0..d {
                rhs[i] += centered[i] * yc;
                for j in 0..=i {
                    gram[i * d + j] += centered[i] * centered[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                gram[j * d + i] = gram[i * d + j];
            }
            gram[i * d + i] += ridge.max(1e-12);
        }
        let weights = cholesky_solve(&mut gram, &rhs, d)
            .ok_or_else(|| Error::Training("ridge system is not positive definite".into()))?;
        let bias = mean_y - weights.iter().zip(&mean_x).map(|(w, m)| w * m).sum::<f64>();
        Ok(Self { weights, bias })
    }

    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        if input.len() != self.weights.len() {
            return Err(Error::Dimension {
                expected: self.weights.len(),
                got: input.len(),
            });
        }
        Ok(self.bias + self.weights.iter().zip(input).map(|(w, x)| w * x).sum::<f64>())
    }
}

/// Solves `A x = b` for symmetric positive definite `A` (overwritten with its factor).
fn cholesky_solve(a: &mut [f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= a[j * n + k] * a[j * n + k];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return None;
        }
        let diag = diag.sqrt();
        a[j * n + j] = diag;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / diag;
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= a[i * n + k] * y[k];
        }
        y[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= a[k * n + i] * y[k];
        }
        y[i] /= a[i * n + i];
    }
    Some(y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Predictor {
    Mlp(Mlp),
    Linear(LinearModel),
}

impl Predictor {
    pub fn input_dim(&self) -> usize {
        match self {
            Predictor::Mlp(m) => m.input_dim(),
            Predictor::Linear(l) => l.weights.len(),
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        match self {
            Predictor::Mlp(m) => m.forward(input),
            Predictor::Linear(l) => l.forward(input),
        }
    }

    /// Forward pass clamped into a danger signal.
    pub fn predict(&self, input: &[f64]) -> Result<DangerSignal> {
        Ok(DangerSignal::saturating(self.forward(input)?))
    }

    pub fn to_text(&self) -> String {
        model_file::write(self)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        model_file::parse(text)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Flattened past-`H` observations plus per-step scenario context.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindow {
    pub history: Vec<f64>,
    pub extras: Vec<f64>,
}

impl FeatureWindow {
    pub fn to_input(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.history.len() + self.extras.len());
        v.extend_from_slice(&self.history);
        v.extend_from_slice(&self.extras);
        v
    }
}

/// Rolling observation buffer used at inference time.
#[derive(Debug, Clone)]
pub struct ObservationHistory {
    len: usize,
    buf: VecDeque<Vec<f64>>,
}

impl ObservationHistory {
    pub fn new(len: usize) -> Self {
        Self {
            len,
            buf: VecDeque::with_capacity(len),
        }
    }

    pub fn push(&mut self, obs: Vec<f64>) {
        if self.buf.len() == self.len {
            self.buf.pop_front();
        }
        self.buf.push_back(obs);
    }

    pub fn is_ready(&self) -> bool {
        self.buf.len() == self.len
    }

    pub fn window(&self, extras: Vec<f64>) -> Result<FeatureWindow> {
        if !self.is_ready() {
            return Err(Error::NotReady(format!(
                "{} of {} warm-up observations",
                self.buf.len(),
                self.len
            )));
        }
        Ok(FeatureWindow {
            history: self.buf.iter().flatten().copied().collect(),
            extras,
        })
    }
}

/// Forecast of the danger signal from a full feature window.
pub fn predict_horizon(
    predictor: &Predictor,
    history: &ObservationHistory,
    extras: Vec<f64>,
) -> Result<DangerSignal> {
    let window = history.window(extras)?;
    predictor.predict(&window.to_input())
}

/// A training sample with its time alignment recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSample {
    pub sample: Sample,
    /// Step of the newest observation in the window.
    pub window_end: usize,
    pub target_step: usize,
}

/// Builds `(window ending at t, extras[t]) -> labels[t + horizon]` samples.
///
/// `observations` and `extras` are indexed by step; `labels` may be longer
/// (e.g. include the terminal state). Steps without a future label yield nothing.
pub fn assemble_samples(
    observations: &[Vec<f64>],
    extras: &[Vec<f64>],
    labels: &[f64],
    history: usize,
    horizon: usize,
) -> Vec<AlignedSample> {
    let steps = observations.len().min(extras.len());
    if history == 0 {
        return Vec::new();
    }
    (history - 1..steps)
        .filter(|t| t + horizon < labels.len())
        .map(|t| {
            let window = FeatureWindow {
                history: observations[t + 1 - history..=t]
                    .iter()
                    .flatten()
                    .copied()
                    .collect(),
                extras: extras[t].clone(),
            };
            AlignedSample {
                sample: Sample {
                    input: window.to_input(),
                    target: labels[t + horizon],
                },
                window_end: t,
                target_step: t + horizon,
            }
        })
        .collect()
}

/// Text model format.
///
/// ```text
/// cpl-model 1
/// kind mlp
/// input <n>
/// hidden_activation <relu|tanh|sigmoid|identity>
/// output_activation <...>
/// loss mse | loss weighted_bce <pos_weight>
/// learning_rate <lr>
/// layers <count>
/// layer <in> <out>
/// w <in*out values, row-major>
/// b <out values>
/// ...
/// end
/// ```
///
/// A linear model is `kind linear`, `input <n>`, `w <n values>`, `b <bias>`, `end`.
/// Floats use Rust's shortest round-trip formatting, so save/load is exact.
pub mod model_file {
    use super::*;

    pub const MAGIC: &str = "cpl-model";
    pub const VERSION: u32 = 1;
    const MAX_PARAMS: usize = 1 << 24;

    fn push_values(out: &mut String, tag: &str, values: &[f64]) {
        out.push_str(tag);
        for v in values {
            let _ = write!(out, " {v:?}");
        }
        out.push('\n');
    }

    pub fn write(model: &Predictor) -> String {
        let mut out = format!("{MAGIC} {VERSION}\n");
        match model {
            Predictor::Mlp(m) => {
                let spec = &m.spec;
                out.push_str("kind mlp\n");
                let _ = writeln!(out, "input {}", spec.input_dim);
                let _ = writeln!(out, "hidden_activation {}", spec.hidden_activation.name());
                let _ = writeln!(out, "output_activation {}", spec.output_activation.name());
                match spec.loss {
                    Loss::Mse => out.push_str("loss mse\n"),
                    Loss::WeightedBce { pos_weight } => {
                        let _ = writeln!(out, "loss weighted_bce {pos_weight:?}");
                    }
                }
                let _ = writeln!(out, "learning_rate {:?}", spec.learning_rate);
                let _ = writeln!(out, "layers {}", m.layers.len());
                for layer in &m.layers {
                    let _ = writeln!(out, "layer {} {}", layer.in_dim, layer.out_dim);
                    push_values(&mut out, "w", &layer.weights);
                    push_values(&mut out, "b", &layer.bias);
                }
            }
            Predictor::Linear(l) => {
                out.push_str("kind linear\n");
                let _ = writeln!(out, "input {}", l.weights.len());
                push_values(&mut out, "w", &l.weights);
                push_values(&mut out, "b", &[l.bias]);
            }
        }
        out.push_str("end\n");
        out
    }

    struct Lines<'a> {
        inner: std::iter::Enumerate<std::str::Lines<'a>>,
        line: usize,
    }

    impl<'a> Lines<'a> {
        fn next_fields(&mut self) -> Result<(&'a str, std::str::SplitWhitespace<'a>)> {
            loop {
                let (i, raw) = self
                    .inner
                    .next()
                    .ok_or_else(|| Error::parse(self.line + 1, "unexpected end of file"))?;
                self.line = i + 1;
                let trimmed = raw.trim();
                if trimmed.is_empty() || trimmed.starts_with('#') {
                    continue;
                }
                let mut fields = trimmed.split_whitespace();
                let key = fields.next().unwrap_or_default();
                return Ok((key, fields));
            }
        }

        fn expect(&mut self, key: &str) -> Result<std::str::SplitWhitespace<'a>> {
            let (k, rest) = self.next_fields()?;
            if k != key {
                return Err(Error::parse(self.line, format!("expected `{key}`, found `{k}`")));
            }
            Ok(rest)
        }

        fn single<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
            let mut rest = self.expect(key)?;
            let value = rest
                .next()
                .ok_or_else(|| Error::parse(self.line, format!("`{key}` needs a value")))?;
            if rest.next().is_some() {
                return Err(Error::parse(self.line, format!("trailing fields after `{key}`")));
            }
            value
                .parse()
                .map_err(|_| Error::parse(self.line, format!("bad value for `{key}`: {value}")))
        }

        fn values(&mut self, key: &str, count: usize) -> Result<Vec<f64>> {
            let line = self.line + 1;
            let rest = self.expect(key)?;
            let mut out = Vec::with_capacity(count.min(MAX_PARAMS));
            for tok in rest {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::parse(line, format!("bad number `{tok}`")))?;
                if !v.is_finite() {
                    return Err(Error::parse(line, "non-finite parameter"));
                }
                out.push(v);
                if out.len() > count {
                    break;
                }
            }
            if out.len() != count {
                return Err(Error::parse(
                    line,
                    format!("`{key}` expects {count} values"),
                ));
            }
            Ok(out)
        }
    }

    fn dims_product(a: usize, b: usize, line: usize) -> Result<usize> {
        a.checked_mul(b)
            .filter(|&n| n <= MAX_PARAMS)
            .ok_or_else(|| Error::parse(line, "layer too large"))
    }

    pub fn parse(text: &str) -> Result<Predictor> {
        let mut lines = Lines {
            inner: text.lines().enumerate(),
            line: 0,
        };
        let version: u32 = lines.single(MAGIC)?;
        if version != VERSION {
            return Err(Error::parse(
                lines.line,
                format!("unsupported model version {version}"),
            ));
        }
        let kind: String = lines.single("kind")?;
        let input: usize = lines.single("input")?;
        if input == 0 || input > MAX_PARAMS {
            return Err(Error::parse(lines.line, "input width out of range"));
        }
        let model = match kind.as_str() {
            "mlp" => {
                let act = |lines: &mut Lines<'_>, key: &str| -> Result<Activation> {
                    let name: String = lines.single(key)?;
                    Activation::from_name(&name)
                        .ok_or_else(|| Error::parse(lines.line, format!("unknown activation `{name}`")))
                };
                let hidden_activation = act(&mut lines, "hidden_activation")?;
                let output_activation = act(&mut lines, "output_activation")?;
                let mut rest = lines.expect("loss")?;
                let loss = match (rest.next(), rest.next(), rest.next()) {
                    (Some("mse"), None, None) => Loss::Mse,
                    (Some("weighted_bce"), Some(w), None) => Loss::WeightedBce {
                        pos_weight: w
                            .parse()
                            .map_err(|_| Error::parse(lines.line, "bad pos_weight"))?,
                    },
                    _ => return Err(Error::parse(lines.line, "bad loss line")),
                };
                let learning_rate: f64 = lines.single("learning_rate")?;
                let count: usize = lines.single("layers")?;
                if count == 0 || count > 64 {
                    return Err(Error::parse(lines.line, "layer count out of range"));
                }
                let mut layers = Vec::new();
                let mut widths = Vec::new();
                let mut fan_in = input;
                let mut total = 0usize;
                for i in 0..count {
                    let mut rest = lines.expect("layer")?;
                    let line = lines.line;
                    let mut dim = || -> Result<usize> {
                        rest.next()
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| Error::parse(line, "bad layer shape"))
                    };
                    let (in_dim, out_dim) = (dim()?, dim()?);
                    if in_dim != fan_in || out_dim == 0 {
                        return Err(Error::parse(line, "layer shapes do not chain"));
                    }
                    if i + 1 == count && out_dim != 1 {
                        return Err(Error::parse(line, "output layer must have width 1"));
                    }
                    let n = dims_product(in_dim, out_dim, line)?;
                    total = total
                        .checked_add(n)
                        .filter(|&t| t <= MAX_PARAMS)
                        .ok_or_else(|| Error::parse(line, "model too large"))?;
                    let weights = lines.values("w", n)?;
                    let bias = lines.values("b", out_dim)?;
                    layers.push(Layer {
                        in_dim,
                        out_dim,
                        weights,
                        bias,
                    });
                    if i + 1 < count {
                        widths.push(out_dim);
                    }
                    fan_in = out_dim;
                }
                let spec = MlpSpec {
                    input_dim: input,
                    layer_widths: widths,
                    hidden_activation,
                    output_activation,
                    loss,
                    learning_rate,
                };
                spec.validate()
                    .map_err(|e| Error::parse(lines.line, e.to_string()))?;
                Predictor::Mlp(Mlp { spec, layers })
            }
            "linear" => {
                let weights = lines.values("w", input)?;
                let bias = lines.values("b", 1)?[0];
                Predictor::Linear(LinearModel { weights, bias })
            }
            other => {
                return Err(Error::parse(lines.line, format!("unknown model kind `{other}`")))
            }
        };
        lines.expect("end")?;
        Ok(model)
    }
}
