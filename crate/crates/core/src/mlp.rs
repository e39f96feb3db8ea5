//! Fully-connected ReLU networks with exact backpropagation.
//!
//! Layer `l` maps `x ↦ x Wᵀ + b` with `W` stored `out×in`. Hidden layers
//! apply ReLU; the last layer emits raw logits.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_softmax_into, matmul, matmul_tn, softmax_into, Matrix, Rng};
use crate::LogitBatch;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Input width, hidden widths, then the class count.
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl NetworkSpec {
    pub fn new(layer_sizes: Vec<usize>, seed: u64) -> Result<Self> {
        let spec = Self { layer_sizes, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::config("layer_sizes needs an input and an output width"));
        }
        if self.layer_sizes.iter().any(|&w| w == 0) {
            return Err(Error::config("layer widths must be positive"));
        }
        if self.n_classes() < 2 {
            return Err(Error::config("the output layer needs at least 2 classes"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            layer_sizes: self.layer_sizes.clone(),
            seed,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn zeros_like(&self) -> Layer {
        Layer {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }
}

static NEXT_REVISION: AtomicU64 = AtomicU64::new(1);

fn fresh_revision() -> u64 {
    NEXT_REVISION.fetch_add(1, Ordering::Relaxed)
}

/// Network weights. Every mutation gets a new revision tag so a forward
/// cache can be matched to the exact parameter state that produced it.
#[derive(Debug, Clone)]
pub struct NetworkParams {
    layers: Vec<Layer>,
    revision: u64,
}

impl PartialEq for NetworkParams {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl NetworkParams {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("a network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::config(format!("layer {i}: bias length mismatch")));
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(Error::config(format!("layer {i}: input width mismatch")));
            }
        }
        Ok(Self {
            layers,
            revision: fresh_revision(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.revision = fresh_revision();
        &mut self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].in_dim()];
        sizes.extend(self.layers.iter().map(Layer::out_dim));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    /// All parameters, layer by layer, weights (row-major) before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Copy of `self` with parameters replaced from a [`flatten`](Self::flatten)-ordered slice.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut layers = self.layers.clone();
        let mut at = 0;
        for l in &mut layers {
            let w = l.weight.data().len();
            let b = l.bias.len();
            if flat.len() < at + w + b {
                return Err(Error::config("flat parameter vector too short"));
            }
            l.weight.data_mut().copy_from_slice(&flat[at..at + w]);
            at += w;
            l.bias.copy_from_slice(&flat[at..at + b]);
            at += b;
        }
        if at != flat.len() {
            return Err(Error::config("flat parameter vector too long"));
        }
        Self::from_layers(layers)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

/// He initialization: `W ~ Normal(0, sqrt(2 / fan_in))`, zero biases.
pub fn init(spec: &NetworkSpec) -> Result<NetworkParams> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let layers = spec
        .layer_sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.normal(0.0, std)).collect();
            Layer {
                weight: Matrix::new(fan_out, fan_in, data).expect("sized"),
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    NetworkParams::from_layers(layers)
}

/// Inputs to every layer, recorded by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    revision: u64,
    activations: Vec<Matrix>,
}

fn affine(x: &Matrix, layer: &Layer) -> Result<Matrix> {
    let mut z = matmul(x, &layer.weight.transpose())?;
    for r in 0..z.rows() {
        for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    Ok(z)
}

fn relu_in_place(m: &mut Matrix) {
    m.data_mut().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

pub fn relu(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    relu_in_place(&mut out);
    out
}

fn check_input(params: &NetworkParams, inputs: &Matrix) -> Result<()> {
    if inputs.cols() != params.input_dim() {
        return Err(Error::config(format!(
            "input width {} does not match network input {}",
            inputs.cols(),
            params.input_dim()
        )));
    }
    Ok(())
}

pub fn forward(params: &NetworkParams, inputs: &Matrix) -> Result<(LogitBatch, ForwardCache)> {
    check_input(params, inputs)?;
    let mut activations = Vec::with_capacity(params.layers.len());
    let mut x = inputs.clone();
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = affine(&x, layer)?;
        if i < last {
            relu_in_place(&mut z);
        }
        activations.push(std::mem::replace(&mut x, z));
    }
    Ok((
        x,
        ForwardCache {
            revision: params.revision,
            activations,
        },
    ))
}

/// Logits only, evaluated in fixed-size chunks.
pub fn predict_logits(params: &NetworkParams, inputs: &Matrix) -> Result<LogitBatch> {
    check_input(params, inputs)?;
    const CHUNK: usize = 1024;
    let n = inputs.rows();
    let mut out = Vec::with_capacity(n * params.n_classes());
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let mut x = inputs.select_rows(&idx);
        let last = params.layers.len() - 1;
        for (i, layer) in params.layers.iter().enumerate() {
            x = affine(&x, layer)?;
            if i < last {
                relu_in_place(&mut x);
            }
        }
        out.extend_from_slice(x.data());
        start = end;
    }
    Matrix::new(n, params.n_classes(), out)
}

/// Parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }
}

pub fn backward(
    params: &NetworkParams,
    cache: &ForwardCache,
    d_logits: &Matrix,
) -> Result<Gradients> {
    if cache.revision != params.revision || cache.activations.len() != params.layers.len() {
        return Err(Error::usage(
            "forward cache does not belong to these parameters (stale cache)",
        ));
    }
    let batch = cache.activations[0].rows();
    if d_logits.shape() != (batch, params.n_classes()) {
        return Err(Error::config(format!(
            "upstream gradient {:?} does not match logits ({batch}, {})",
            d_logits.shape(),
            params.n_classes()
        )));
    }
    let mut grads: Vec<Layer> = params.layers.iter().map(Layer::zeros_like).collect();
    let mut delta = d_logits.clone();
    for l in (0..params.layers.len()).rev() {
        let input = &cache.activations[l];
        grads[l].weight = matmul_tn(&delta, input)?;
        let bias = &mut grads[l].bias;
        for r in 0..delta.rows() {
            for (b, d) in bias.iter_mut().zip(delta.row(r)) {
                *b += d;
            }
        }
        if l > 0 {
            let mut d_input = matmul(&delta, &params.layers[l].weight)?;
            // Input to layer l is the ReLU output of layer l-1; zero where inactive.
            for (d, &a) in d_input.data_mut().iter_mut().zip(input.data()) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            delta = d_input;
        }
    }
    Ok(Gradients { layers: grads })
}

/// Mean cross-entropy and its gradient `(softmax(z) − onehot) / b`.
pub fn ce_loss_and_grad(logits: &LogitBatch, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (b, n) = logits.shape();
    if labels.len() != b {
        return Err(Error::config(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if b == 0 {
        return Err(Error::config("empty batch"));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::data(format!("label {bad} outside [0, {n})")));
    }
    let inv_b = 1.0 / b as f64;
    let mut grad = Matrix::zeros(b, n);
    let mut log_p = vec![0.0; n];
    let mut loss = 0.0;
    for (s, &y) in labels.iter().enumerate() {
        let z = logits.row(s);
        log_softmax_into(z, &mut log_p);
        loss -= log_p[y];
        let g = grad.row_mut(s);
        softmax_into(z, g);
        g[y] -= 1.0;
        g.iter_mut().for_each(|v| *v *= inv_b);
    }
    Ok((loss * inv_b, grad))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[default]
    SgdNesterov,
    Adam,
}

/// Learning-rate multiplier applied from `epoch` onward (cumulative).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleStep {
    pub epoch: usize,
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Nesterov momentum for SGD, first-moment decay for Adam.
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub schedule: Vec<ScheduleStep>,
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerConfig {
    /// SGD protocol used for the residual networks: lr 0.1, wd 1e-4,
    /// Nesterov 0.9, ×0.2 at epochs 60/120/160.
    pub fn residual_sgd() -> Self {
        Self {
            kind: OptimizerKind::SgdNesterov,
            learning_rate: 0.1,
            weight_decay: 1e-4,
            momentum: 0.9,
            schedule: [60, 120, 160]
                .map(|epoch| ScheduleStep {
                    epoch,
                    multiplier: 0.2,
                })
                .to_vec(),
        }
    }

    /// Adam protocol used for the small CNN: lr 1e-3, ×0.2 at epochs 40/80/120.
    pub fn cnn5_adam() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            momentum: 0.9,
            schedule: [40, 80, 120]
                .map(|epoch| ScheduleStep {
                    epoch,
                    multiplier: 0.2,
                })
                .to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("optimizer.learning_rate must be positive"));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(
                "optimizer.weight_decay must be >= 0 and momentum in [0, 1)",
            ));
        }
        if self.schedule.iter().any(|s| !(s.multiplier > 0.0)) {
            return Err(Error::config("optimizer.schedule multipliers must be positive"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .filter(|s| epoch >= s.epoch)
            .fold(self.learning_rate, |lr, s| lr * s.multiplier)
    }
}

/// Optimizer state (velocity or Adam moments) aligned with the flattened parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step(&mut self, params: &mut NetworkParams, grads: &Gradients, epoch: usize) -> Result<()> {
        if grads.layers.len() != params.layers.len() {
            return Err(Error::config("gradient/parameter layer count mismatch"));
        }
        let lr = self.config.learning_rate_at(epoch);
        let wd = self.config.weight_decay;
        let mu = self.config.momentum;
        self.steps += 1;
        let bias1 = 1.0 - mu.powi(self.steps as i32);
        let bias2 = 1.0 - ADAM_BETA2.powi(self.steps as i32);

        let total: usize = params
            .layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum();
        if self.first.is_empty() {
            self.first = vec![0.0; total];
            self.second = vec![0.0; total];
        }

        let mut at = 0;
        let kind = self.config.kind;
        let (first, second) = (&mut self.first, &mut self.second);
        for (layer, grad) in params.layers_mut().iter_mut().zip(&grads.layers) {
            if layer.weight.shape() != grad.weight.shape() || layer.bias.len() != grad.bias.len() {
                return Err(Error::config("gradient/parameter shape mismatch"));
            }
            let pairs = layer
                .weight
                .data_mut()
                .iter_mut()
                .zip(grad.weight.data())
                .chain(layer.bias.iter_mut().zip(&grad.bias));
            for (theta, &g) in pairs {
                let g = g + wd * *theta;
                match kind {
                    OptimizerKind::SgdNesterov => {
                        let v = &mut first[at];
                        *v = mu * *v + g;
                        *theta -= lr * (g + mu * *v);
                    }
                    OptimizerKind::Adam => {
                        let m = &mut first[at];
                        let s = &mut second[at];
                        *m = mu * *m + (1.0 - mu) * g;
                        *s = ADAM_BETA2 * *s + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = *m / bias1;
                        let s_hat = *s / bias2;
                        *theta -= lr * m_hat / (s_hat.sqrt() + ADAM_EPS);
                    }
                }
                at += 1;
            }
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"ICCT";
const CHECKPOINT_VERSION: u32 = 1;

impl NetworkParams {
    /// Little-endian checkpoint: `ICCT`, version u32, layer count u32, then per
    /// layer rows u32, cols u32, `rows*cols` f64 weights (row-major), `rows` f64 biases.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.weight.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(l.weight.cols() as u32).to_le_bytes());
            for v in l.weight.data().iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, at: 0 };
        if rd.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::data("not an ICCT checkpoint (bad magic)"));
        }
        let version = rd.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::data(format!("unsupported checkpoint version {version}")));
        }
        let count = rd.u32()? as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let rows = rd.u32()? as usize;
            let cols = rd.u32()? as usize;
            let weights = (0..rows * cols).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?;
            let bias = (0..rows).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?;
            layers.push(Layer {
                weight: Matrix::new(rows, cols, weights)?,
                bias,
            });
        }
        if rd.at != bytes.len() {
            return Err(Error::data("trailing bytes after checkpoint"));
        }
        Self::from_layers(layers).map_err(|e| Error::data(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at + n;
        if end > self.bytes.len() {
            return Err(Error::data("checkpoint truncated"));
        }
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
