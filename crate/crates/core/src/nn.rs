//! A small dense feed-forward network with dropout and a Gaussian head.
//!
//! Weights are stored per layer in row-major `outputs x inputs` order. A
//! Gaussian head doubles the final layer: the first half of its units are
//! means, the second half raw scales `s` mapped to
//! `sigma = softplus(s) + sigma_floor`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, purpose};
use crate::synthdata::Dataset;

pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-4;
const CHECKPOINT_FORMAT: &str = "uqsuite-mlp";
const CHECKPOINT_VERSION: u32 = 1;
const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
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

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Point,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.biases)
            .map(|(w, b)| w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b)
            .collect()
    }
}

/// Architecture description used to initialise a fresh network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Logical widths, input first. With a Gaussian head the last entry is
    /// the number of predicted means.
    pub widths: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Dropout rate applied after every hidden layer.
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_head")]
    pub head: Head,
    #[serde(default = "default_sigma_floor")]
    pub sigma_floor: f64,
}

fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_head() -> Head {
    Head::Point
}
fn default_sigma_floor() -> f64 {
    DEFAULT_SIGMA_FLOOR
}

/// Forward-pass mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Deterministic,
    /// Dropout active, masks drawn from a stream keyed by `seed`.
    Stochastic { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub values: Vec<f64>,
    /// Present for a Gaussian head; every entry is at least `sigma_floor`.
    pub sigma: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    /// One rate per hidden layer.
    dropout: Vec<f64>,
    head: Head,
    sigma_floor: f64,
}

#[inline]
fn softplus(s: f64) -> f64 {
    if s > 30.0 {
        s
    } else {
        s.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

/// Negative log-likelihood of `y` under `N(mu, sigma^2)`.
pub fn gaussian_nll_loss(mu: f64, sigma: f64, y: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be > 0, got {sigma}")));
    }
    let r = y - mu;
    Ok(sigma.ln() + r * r / (2.0 * sigma * sigma) + HALF_LN_TWO_PI)
}

struct Trace {
    /// Layer inputs; `inputs[k]` feeds layer `k`, and the last entry is the raw output.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    /// Per hidden layer: the multiplier applied after activation (0 or 1/(1-p)).
    masks: Vec<Option<Vec<f64>>>,
}

impl Mlp {
    /// Glorot-uniform initialisation from `seed`.
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        if spec.widths.len() < 2 || spec.widths.iter().any(|w| *w == 0) {
            return Err(Error::Config(format!(
                "need at least two positive widths, got {:?}",
                spec.widths
            )));
        }
        if !(0.0..1.0).contains(&spec.dropout) {
            return Err(Error::Config(format!("dropout rate {} not in [0, 1)", spec.dropout)));
        }
        if !(spec.sigma_floor > 0.0) {
            return Err(Error::Config("sigma_floor must be > 0".into()));
        }
        let n_layers = spec.widths.len() - 1;
        let mut rng = rng::stream(seed, &[purpose::INIT]);
        let layers = (0..n_layers)
            .map(|k| {
                let inputs = spec.widths[k];
                let mut outputs = spec.widths[k + 1];
                let last = k + 1 == n_layers;
                if last && spec.head == Head::Gaussian {
                    outputs *= 2;
                }
                let bound = (6.0 / (inputs + outputs) as f64).sqrt();
                let weights = (0..inputs * outputs)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Layer {
                    inputs,
                    outputs,
                    weights,
                    biases: vec![0.0; outputs],
                    activation: if last { Activation::Identity } else { spec.activation },
                }
            })
            .collect();
        Ok(Mlp {
            layers,
            dropout: vec![spec.dropout; n_layers - 1],
            head: spec.head,
            sigma_floor: spec.sigma_floor,
        })
    }

    /// Assembles a network from explicit layers.
    pub fn from_layers(layers: Vec<Layer>, dropout: Vec<f64>, head: Head, sigma_floor: f64) -> Result<Self> {
        let mlp = Mlp {
            layers,
            dropout,
            head,
            sigma_floor,
        };
        mlp.validate()?;
        Ok(mlp)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.inputs == 0 || l.outputs == 0 {
                return Err(Error::Config(format!("layer {k} has a zero width")));
            }
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(Error::Config(format!("layer {k} parameter shapes disagree with widths")));
            }
            if k > 0 && self.layers[k - 1].outputs != l.inputs {
                return Err(Error::Config(format!(
                    "layer {} emits {} values but layer {k} expects {}",
                    k - 1,
                    self.layers[k - 1].outputs,
                    l.inputs
                )));
            }
        }
        if self.dropout.len() != self.layers.len() - 1 {
            return Err(Error::Config(format!(
                "expected {} dropout rates, got {}",
                self.layers.len() - 1,
                self.dropout.len()
            )));
        }
        if self.dropout.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
        }
        if self.head == Head::Gaussian && self.layers.last().expect("non-empty").outputs % 2 != 0 {
            return Err(Error::Config("gaussian head needs an even final width".into()));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Config("sigma_floor must be > 0".into()));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn sigma_floor(&self) -> f64 {
        self.sigma_floor
    }

    pub fn dropout_rates(&self) -> &[f64] {
        &self.dropout
    }

    /// Replaces every hidden-layer dropout rate.
    pub fn with_dropout(mut self, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        self.dropout.iter_mut().for_each(|p| *p = rate);
        Ok(self)
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    /// Number of predicted means.
    pub fn output_width(&self) -> usize {
        let raw = self.layers.last().expect("non-empty").outputs;
        match self.head {
            Head::Point => raw,
            Head::Gaussian => raw / 2,
        }
    }

    /// Logical widths as given to [`ModelSpec`].
    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.layers.iter().map(|l| l.inputs).collect();
        w.push(self.output_width());
        w
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            p.extend_from_slice(&l.weights);
            p.extend_from_slice(&l.biases);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                p.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&p[off..off + nw]);
            off += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    fn run(&self, x: &[f64], masks: Option<&[Option<Vec<f64>>]>) -> Trace {
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n + 1);
        let mut pre = Vec::with_capacity(n);
        inputs.push(x.to_vec());
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(&inputs[k]);
            let mut a: Vec<f64> = z.iter().map(|v| layer.activation.apply(*v)).collect();
            if let Some(Some(m)) = masks.and_then(|ms| ms.get(k)) {
                a.iter_mut().zip(m).for_each(|(ai, mi)| *ai *= mi);
            }
            pre.push(z);
            inputs.push(a);
        }
        Trace {
            inputs,
            pre,
            masks: masks.map(|m| m.to_vec()).unwrap_or_default(),
        }
    }

    fn draw_masks(&self, seed: u64) -> Vec<Option<Vec<f64>>> {
        let mut rng = rng::stream(seed, &[purpose::DROPOUT]);
        self.dropout
            .iter()
            .zip(&self.layers)
            .map(|(&p, layer)| {
                if p == 0.0 {
                    return None;
                }
                let keep = 1.0 / (1.0 - p);
                Some(
                    (0..layer.outputs)
                        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                        .collect(),
                )
            })
            .collect()
    }

    fn split_head(&self, raw: &[f64]) -> Output {
        match self.head {
            Head::Point => Output {
                values: raw.to_vec(),
                sigma: None,
            },
            Head::Gaussian => {
                let k = raw.len() / 2;
                Output {
                    values: raw[..k].to_vec(),
                    sigma: Some(raw[k..].iter().map(|s| softplus(*s) + self.sigma_floor).collect()),
                }
            }
        }
    }

    /// Evaluates the network on one input.
    pub fn forward(&self, x: &[f64], mode: Mode) -> Result<Output> {
        if x.len() != self.input_width() {
            return Err(Error::Config(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_width()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite input {x:?}")));
        }
        let masks = match mode {
            Mode::Deterministic => None,
            Mode::Stochastic { seed } => Some(self.draw_masks(seed)),
        };
        let trace = self.run(x, masks.as_deref());
        let out = self.split_head(trace.inputs.last().expect("output"));
        let finite = out.values.iter().all(|v| v.is_finite())
            && out.sigma.as_ref().is_none_or(|s| s.iter().all(|v| v.is_finite()));
        if !finite {
            if !self.params_finite() {
                return Err(Error::State("network holds non-finite parameters".into()));
            }
            return Err(Error::EstimatorFault(format!("non-finite network output at {x:?}")));
        }
        Ok(out)
    }

    /// Loss of one sample plus the gradient w.r.t. every parameter, in
    /// [`Mlp::params`] order.
    fn loss_and_grad(
        &self,
        x: &[f64],
        y: f64,
        loss: LossKind,
        masks: Option<&[Option<Vec<f64>>]>,
        grad: &mut [f64],
    ) -> f64 {
        let trace = self.run(x, masks);
        let raw = trace.inputs.last().expect("output");
        let mut delta = vec![0.0; raw.len()];
        let value = match (loss, self.head) {
            (LossKind::Mse, _) => {
                let r = raw[0] - y;
                delta[0] = 2.0 * r;
                r * r
            }
            (LossKind::GaussianNll, Head::Gaussian) => {
                let k = raw.len() / 2;
                let s = raw[k];
                let sigma = softplus(s) + self.sigma_floor;
                let r = y - raw[0];
                delta[0] = -r / (sigma * sigma);
                delta[k] = (1.0 / sigma - r * r / (sigma * sigma * sigma)) * sigmoid(s);
                sigma.ln() + r * r / (2.0 * sigma * sigma) + HALF_LN_TWO_PI
            }
            (LossKind::GaussianNll, Head::Point) => unreachable!("checked by callers"),
        };
        self.backprop(&trace, delta, grad);
        value
    }

    fn backprop(&self, trace: &Trace, mut delta: Vec<f64>, grad: &mut [f64]) {
        // offsets of each layer's block in the flat parameter vector
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.weights.len() + l.biases.len();
        }
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let out = &trace.inputs[k + 1];
            if let Some(Some(m)) = trace.masks.get(k) {
                delta.iter_mut().zip(m).for_each(|(d, mi)| *d *= mi);
            }
            // d loss / d z
            for (j, d) in delta.iter_mut().enumerate() {
                let a = match trace.masks.get(k) {
                    Some(Some(m)) if m[j] != 0.0 => out[j] / m[j],
                    _ => out[j],
                };
                *d *= layer.activation.derivative(trace.pre[k][j], a);
            }
            let input = &trace.inputs[k];
            let base = offsets[k];
            let nw = layer.weights.len();
            for (j, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &mut grad[base + j * layer.inputs..base + (j + 1) * layer.inputs];
                row.iter_mut().zip(input).for_each(|(g, xi)| *g += d * xi);
                grad[base + nw + j] += d;
            }
            if k > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for (j, d) in delta.iter().enumerate() {
                    let w = &layer.weights[j * layer.inputs..(j + 1) * layer.inputs];
                    prev.iter_mut().zip(w).for_each(|(p, wi)| *p += d * wi);
                }
                delta = prev;
            }
        }
    }

    fn check_loss(&self, loss: LossKind) -> Result<()> {
        if loss == LossKind::GaussianNll && self.head != Head::Gaussian {
            return Err(Error::Config("gaussian_nll loss requires a gaussian head".into()));
        }
        if self.output_width() != 1 {
            return Err(Error::Config(format!(
                "training supports scalar targets only, network predicts {}",
                self.output_width()
            )));
        }
        Ok(())
    }

    /// Serialises the network as a versioned checkpoint document.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            widths: self.widths(),
            activations: self.layers.iter().map(|l| l.activation).collect(),
            dropout: self.dropout.clone(),
            head: self.head,
            sigma_floor: self.sigma_floor,
            weights: self.layers.iter().map(|l| l.weights.clone()).collect(),
            biases: self.layers.iter().map(|l| l.biases.clone()).collect(),
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::parse(
                "checkpoint",
                format!("unsupported format {} v{}", c.format, c.version),
            ));
        }
        let n = c.widths.len().saturating_sub(1);
        if n == 0 || c.activations.len() != n || c.weights.len() != n || c.biases.len() != n {
            return Err(Error::parse("checkpoint", "layer counts disagree"));
        }
        let layers = (0..n)
            .map(|k| {
                let mut outputs = c.widths[k + 1];
                if k + 1 == n && c.head == Head::Gaussian {
                    outputs *= 2;
                }
                Layer {
                    inputs: c.widths[k],
                    outputs,
                    weights: c.weights[k].clone(),
                    biases: c.biases[k].clone(),
                    activation: c.activations[k],
                }
            })
            .collect();
        Mlp::from_layers(layers, c.dropout, c.head, c.sigma_floor)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_checkpoint()).map_err(|e| Error::State(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        Mlp::from_checkpoint(c)
    }
}

/// On-disk model representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub dropout: Vec<f64>,
    pub head: Head,
    pub sigma_floor: f64,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    GaussianNll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    pub loss: LossKind,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Adam => (vec![0.0; n], vec![0.0; n]),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Optimizer { kind, lr, m, v, t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self.kind {
            OptimizerKind::Sgd => params.iter_mut().zip(grad).for_each(|(p, g)| *p -= self.lr * g),
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(self.t);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
                    self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Mlp,
    /// Mean training loss of every epoch.
    pub losses: Vec<f64>,
}

/// Mini-batch training. The row order of epoch `e` is a shuffle keyed by
/// `(seed, e)`, and dropout masks are keyed by `(seed, e, row)`.
pub fn train(mlp: &Mlp, data: &Dataset, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    mlp.check_loss(cfg.loss)?;
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if data.width() != Some(mlp.input_width()) {
        return Err(Error::Config(format!(
            "dataset width {:?} does not match network input {}",
            data.width(),
            mlp.input_width()
        )));
    }
    let mut model = mlp.clone();
    let mut params = model.params();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, params.len());
    let mut grad = vec![0.0; params.len()];
    let mut losses = Vec::with_capacity(cfg.epochs);
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let stochastic = model.dropout.iter().any(|p| *p > 0.0);

    for epoch in 0..cfg.epochs {
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
        let mut rng = rng::stream(cfg.seed, &[epoch as u64, purpose::SHUFFLE]);
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let row = &data.rows[i];
                let masks = stochastic.then(|| model.draw_masks(rng::mix(cfg.seed, &[epoch as u64, i as u64])));
                total += model.loss_and_grad(&row.x, row.y, cfg.loss, masks.as_deref(), &mut grad);
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            opt.step(&mut params, &grad);
            model.set_params(&params)?;
        }
        let mean = total / n as f64;
        if !mean.is_finite() || !params.iter().all(|p| p.is_finite()) {
            return Err(Error::TrainingDiverged {
                epoch,
                reason: format!("mean loss {mean}"),
            });
        }
        losses.push(mean);
    }
    Ok(Trained { model, losses })
}

/// Deterministic single-sample loss.
pub fn sample_loss(mlp: &Mlp, x: &[f64], y: f64, loss: LossKind) -> Result<f64> {
    mlp.check_loss(loss)?;
    let out = mlp.forward(x, Mode::Deterministic)?;
    match loss {
        LossKind::Mse => Ok((out.values[0] - y).powi(2)),
        LossKind::GaussianNll => gaussian_nll_loss(out.values[0], out.sigma.expect("gaussian head")[0], y),
    }
}

/// Analytic gradient of the deterministic single-sample loss.
pub fn gradient(mlp: &Mlp, x: &[f64], y: f64, loss: LossKind) -> Result<Vec<f64>> {
    mlp.check_loss(loss)?;
    if x.len() != mlp.input_width() {
        return Err(Error::Config("input width mismatch".into()));
    }
    let mut grad = vec![0.0; mlp.num_params()];
    mlp.loss_and_grad(x, y, loss, None, &mut grad);
    Ok(grad)
}

/// Largest relative disagreement between the analytic gradient and central
/// finite differences (step `1e-5`) over all parameters. The denominator is
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(mlp: &Mlp, x: &[f64], y: f64, loss: LossKind) -> Result<f64> {
    const H: f64 = 1e-5;
    let analytic = gradient(mlp, x, y, loss)?;
    let mut probe = mlp.clone();
    let base = mlp.params();
    let mut worst: f64 = 0.0;
    let mut p = base.clone();
    for i in 0..base.len() {
        p[i] = base[i] + H;
        probe.set_params(&p)?;
        let up = sample_loss(&probe, x, y, loss)?;
        p[i] = base[i] - H;
        probe.set_params(&p)?;
        let down = sample_loss(&probe, x, y, loss)?;
        p[i] = base[i];
        let numeric = (up - down) / (2.0 * H);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
