//! Dense feed-forward networks with hand-written backpropagation, MSE loss
//! and plain minibatch SGD.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingPair, PairBatch};
use crate::error::{shape_err, Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{gemm, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out_dim × in_dim`.
    pub weights: Matrix,
    pub bias: Vector,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vector, activation: Activation) -> Result<Self> {
        if bias.dim() != weights.rows() {
            return shape_err(format!(
                "layer bias dim {} vs weight rows {}",
                bias.dim(),
                weights.rows()
            ));
        }
        Ok(DenseLayer {
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.dim()
    }

    /// Returns `(z, a)` for a batch with one sample per row.
    fn forward_batch(&self, input: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut z = gemm(input, false, &self.weights, true)?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(self.bias.iter()) {
                *v += b;
            }
        }
        let a = match self.activation {
            Activation::Linear => z.clone(),
            act => {
                let mut a = z.clone();
                a.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
                a
            }
        };
        Ok((z, a))
    }
}

/// One `(in_dim, out_dim, activation)` entry of a network layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec {
            in_dim,
            out_dim,
            activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<DenseLayer>,
}

/// Per-layer pre- and post-activations from a forward pass.
///
/// `post[0]` is the input; `pre[i]` and `post[i + 1]` belong to layer `i`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub pre: Vec<Matrix>,
    pub post: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub d_weights: Matrix,
    pub d_bias: Vector,
}

pub type Gradients = Vec<LayerGrad>;

impl Network {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return shape_err("network needs at least one layer");
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return shape_err(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    w[0].out_dim(),
                    i + 1,
                    w[1].in_dim()
                ));
            }
        }
        Ok(Network { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| LayerSpec::new(l.in_dim(), l.out_dim(), l.activation))
            .collect()
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vector, ForwardCache)> {
        let x = Matrix::stack_rows(input.len(), [input])?;
        let (out, cache) = self.forward_batch(&x)?;
        Ok((Vector(out.into_vec()), cache))
    }

    pub fn forward_batch(&self, input: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if input.cols() != self.in_dim() {
            return shape_err(format!(
                "network expects inputs of dim {}, got {}",
                self.in_dim(),
                input.cols()
            ));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len() + 1);
        post.push(input.clone());
        for layer in &self.layers {
            let (z, a) = layer.forward_batch(post.last().expect("input pushed"))?;
            pre.push(z);
            post.push(a);
        }
        let out = post.last().expect("at least one layer").clone();
        Ok((out, ForwardCache { pre, post }))
    }

    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.in_dim() {
            return shape_err(format!(
                "network expects inputs of dim {}, got {}",
                self.in_dim(),
                input.cols()
            ));
        }
        let mut a = input.clone();
        for layer in &self.layers {
            a = layer.forward_batch(&a)?.1;
        }
        Ok(a)
    }

    /// Backpropagates `grad_output = ∂L/∂output` through the cached pass.
    ///
    /// Returns the parameter gradients and `∂L/∂input`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_output: &Matrix,
    ) -> Result<(Gradients, Matrix)> {
        let expected = cache.post.last().map(Matrix::shape);
        if Some(grad_output.shape()) != expected {
            return shape_err(format!(
                "output gradient {:?} vs cached output {:?}",
                grad_output.shape(),
                expected
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_output.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let out = &cache.post[i + 1];
            if layer.activation != Activation::Linear {
                for (d, &a) in delta.as_mut_slice().iter_mut().zip(out.as_slice()) {
                    *d *= layer.activation.derivative_from_output(a);
                }
            }
            let d_weights = gemm(&delta, true, &cache.post[i], false)?;
            let mut d_bias = Vector::zeros(layer.out_dim());
            for r in delta.row_iter() {
                for (b, v) in d_bias.iter_mut().zip(r) {
                    *b += v;
                }
            }
            let next = gemm(&delta, false, &layer.weights, false)?;
            grads.push(LayerGrad { d_weights, d_bias });
            delta = next;
        }
        grads.reverse();
        Ok((grads, delta))
    }
}

/// Builds a network from a layout with Glorot-uniform weights and zero biases.
pub fn init_network(specs: &[LayerSpec], seed: u64) -> Result<Network> {
    init_network_with(specs, &mut rng::seeded(seed))
}

pub fn init_network_with(specs: &[LayerSpec], rng: &mut Rng) -> Result<Network> {
    if specs.is_empty() {
        return shape_err("network needs at least one layer");
    }
    for s in specs {
        if s.in_dim == 0 || s.out_dim == 0 {
            return shape_err(format!(
                "layer dims must be positive, got {}x{}",
                s.in_dim, s.out_dim
            ));
        }
    }
    for (i, w) in specs.windows(2).enumerate() {
        if w[0].out_dim != w[1].in_dim {
            return shape_err(format!(
                "layer {i} outputs {} but layer {} expects {}",
                w[0].out_dim,
                i + 1,
                w[1].in_dim
            ));
        }
    }
    let layers = specs
        .iter()
        .map(|s| {
            let limit = (6.0 / (s.in_dim + s.out_dim) as f64).sqrt();
            let data = (0..s.in_dim * s.out_dim)
                .map(|_| rng.random_range(-limit..=limit))
                .collect();
            DenseLayer::new(
                Matrix::from_vec(s.out_dim, s.in_dim, data)?,
                Vector::zeros(s.out_dim),
                s.activation,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Network::new(layers)
}

/// Mean over every sample and dimension of the squared difference.
pub fn mse(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return shape_err(format!("mse of {:?} vs {:?}", a.shape(), b.shape()));
    }
    let n = a.as_slice().len();
    if n == 0 {
        return Err(Error::EmptyInput("mse of an empty batch".into()));
    }
    let sum: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / n as f64)
}

/// `∂ mse(output, target) / ∂ output`.
pub fn mse_grad(output: &Matrix, target: &Matrix) -> Result<Matrix> {
    if output.shape() != target.shape() {
        return shape_err(format!(
            "mse of {:?} vs {:?}",
            output.shape(),
            target.shape()
        ));
    }
    let scale = 2.0 / output.as_slice().len() as f64;
    let data = output
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(o, t)| scale * (o - t))
        .collect();
    Matrix::from_vec(output.rows(), output.cols(), data)
}

/// MSE gradients of every parameter for one batch, plus the loss.
pub fn backprop(net: &Network, inputs: &Matrix, targets: &Matrix) -> Result<(Gradients, f64)> {
    let (out, cache) = net.forward_batch(inputs)?;
    let loss = mse(&out, targets)?;
    let (grads, _) = net.backward(&cache, &mse_grad(&out, targets)?)?;
    Ok((grads, loss))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// `lr = initial / (1 + decay · update_index)`, applied per minibatch update.
    InverseTime,
    /// `lr = initial − decay · epoch_index`.
    SubtractivePerEpoch,
}

impl std::str::FromStr for DecayMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverse_time" | "inverse-time" => Ok(DecayMode::InverseTime),
            "subtractive_per_epoch" | "subtractive-per-epoch" | "subtractive" => {
                Ok(DecayMode::SubtractivePerEpoch)
            }
            other => Err(Error::Config(format!("unknown decay mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub decay_mode: DecayMode,
    pub loss: Loss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 0.02,
            decay: 0.0001,
            epochs: 100,
            batch_size: 256,
            seed: 0,
            decay_mode: DecayMode::InverseTime,
            loss: Loss::Mse,
        }
    }
}

impl TrainConfig {
    pub fn updates_per_epoch(&self, n_pairs: usize) -> usize {
        n_pairs.div_ceil(self.batch_size.max(1))
    }

    /// Checks the config for a training set of `n_pairs`, including that the
    /// learning rate stays positive on every scheduled step.
    pub fn validate(&self, n_pairs: usize) -> Result<()> {
        if !(self.initial_lr > 0.0) || !self.initial_lr.is_finite() {
            return Err(Error::Config(format!(
                "initial learning rate must be positive, got {}",
                self.initial_lr
            )));
        }
        if !(self.decay >= 0.0) || !self.decay.is_finite() {
            return Err(Error::Config(format!(
                "decay must be finite and non-negative, got {}",
                self.decay
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let last_update = (self.updates_per_epoch(n_pairs) * self.epochs).saturating_sub(1);
        let last_epoch = self.epochs - 1;
        let lowest = lr_at(self, 0, 0).min(lr_at(self, last_update, last_epoch));
        if !(lowest > 0.0) {
            return Err(Error::Config(format!(
                "learning-rate schedule reaches {lowest} (must stay positive)"
            )));
        }
        Ok(())
    }
}

/// Learning rate for a given update (minibatch) and epoch index.
pub fn lr_at(config: &TrainConfig, update_index: usize, epoch_index: usize) -> f64 {
    match config.decay_mode {
        DecayMode::InverseTime => config.initial_lr / (1.0 + config.decay * update_index as f64),
        DecayMode::SubtractivePerEpoch => config.initial_lr - config.decay * epoch_index as f64,
    }
}

/// A model SGD can train: anything built from dense layers with an MSE gradient.
pub trait Trainable {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn predict(&self, inputs: &Matrix) -> Result<Matrix>;
    /// Gradients in [`Trainable::dense_layers`] order, plus the batch loss.
    fn loss_gradient(&self, inputs: &Matrix, targets: &Matrix) -> Result<(Gradients, f64)>;
    fn dense_layers(&self) -> Vec<&DenseLayer>;
    fn dense_layers_mut(&mut self) -> Vec<&mut DenseLayer>;

    fn apply_gradient(&mut self, grads: &Gradients, lr: f64) {
        for (layer, g) in self.dense_layers_mut().into_iter().zip(grads) {
            for (w, d) in layer
                .weights
                .as_mut_slice()
                .iter_mut()
                .zip(g.d_weights.as_slice())
            {
                *w -= lr * d;
            }
            for (b, d) in layer.bias.iter_mut().zip(g.d_bias.iter()) {
                *b -= lr * d;
            }
        }
    }

    /// All parameters flattened: per layer, weights row-major then bias.
    fn flat_params(&self) -> Vec<f64> {
        self.dense_layers()
            .into_iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(l.bias.iter()).copied())
            .collect()
    }

    fn set_flat_params(&mut self, params: &[f64]) {
        let mut it = params.iter();
        for layer in self.dense_layers_mut() {
            for w in layer.weights.as_mut_slice() {
                *w = *it.next().expect("parameter vector too short");
            }
            for b in layer.bias.iter_mut() {
                *b = *it.next().expect("parameter vector too short");
            }
        }
        assert!(it.next().is_none(), "parameter vector too long");
    }

    fn param_count(&self) -> usize {
        self.dense_layers().iter().map(|l| l.param_count()).sum()
    }
}

pub fn flatten_gradients(grads: &Gradients) -> Vec<f64> {
    grads
        .iter()
        .flat_map(|g| {
            g.d_weights
                .as_slice()
                .iter()
                .chain(g.d_bias.iter())
                .copied()
        })
        .collect()
}

impl Trainable for Network {
    fn input_dim(&self) -> usize {
        self.in_dim()
    }

    fn output_dim(&self) -> usize {
        self.out_dim()
    }

    fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        Network::predict(self, inputs)
    }

    fn loss_gradient(&self, inputs: &Matrix, targets: &Matrix) -> Result<(Gradients, f64)> {
        backprop(self, inputs, targets)
    }

    fn dense_layers(&self) -> Vec<&DenseLayer> {
        self.layers.iter().collect()
    }

    fn dense_layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        self.layers.iter_mut().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub lr: f64,
    pub train: f64,
    pub dev: Option<f64>,
}

/// Losses measured on the full train/dev sets at the start of every epoch,
/// plus the losses after the last epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochLoss>,
    pub final_train: f64,
    pub final_dev: Option<f64>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_mse,dev_mse\n");
        let fmt_dev = |d: Option<f64>| d.map(|v| format!("{v:.10e}")).unwrap_or_default();
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.10e},{:.10e},{}\n",
                e.epoch,
                e.lr,
                e.train,
                fmt_dev(e.dev)
            ));
        }
        out.push_str(&format!(
            "final,,{:.10e},{}\n",
            self.final_train,
            fmt_dev(self.final_dev)
        ));
        out
    }
}

const EVAL_CHUNK: usize = 4096;

/// Full-set MSE of a model, evaluated in fixed-size chunks.
pub fn dataset_mse<M: Trainable + ?Sized>(model: &M, data: &PairBatch) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("mse over an empty set".into()));
    }
    let mut sum = 0.0;
    let n = data.len();
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let part = if chunk.len() == n {
            data.clone()
        } else {
            data.gather(chunk)
        };
        let out = model.predict(&part.inputs)?;
        sum += mse(&out, &part.targets)? * part.targets.as_slice().len() as f64;
    }
    Ok(sum / data.targets.as_slice().len() as f64)
}

/// Visiting order for one epoch: a seeded permutation of `0..n`.
pub fn epoch_order(rng: &mut Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Minibatch SGD over `train`; `θ ← θ − lr·∇θ` per batch.
pub fn train_model<M: Trainable + ?Sized>(
    model: &mut M,
    train: &PairBatch,
    dev: Option<&PairBatch>,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    if train.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    config.validate(train.len())?;
    for (name, set) in [("train", Some(train)), ("dev", dev)] {
        if let Some(set) = set {
            if set.inputs.cols() != model.input_dim() || set.targets.cols() != model.output_dim() {
                return shape_err(format!(
                    "{name} pairs have dims ({}, {}), model expects ({}, {})",
                    set.inputs.cols(),
                    set.targets.cols(),
                    model.input_dim(),
                    model.output_dim()
                ));
            }
        }
    }
    let dev = dev.filter(|d| !d.is_empty());
    let mut rng = rng::stream(config.seed, "sgd-shuffle", 0);
    let mut history = Vec::with_capacity(config.epochs);
    let mut update = 0usize;
    for epoch in 0..config.epochs {
        let train_loss = dataset_mse(model, train)?;
        let dev_loss = dev.map(|d| dataset_mse(model, d)).transpose()?;
        history.push(EpochLoss {
            epoch,
            lr: lr_at(config, update, epoch),
            train: train_loss,
            dev: dev_loss,
        });
        log::debug!("epoch {epoch}: train {train_loss:.6e} dev {dev_loss:?}");
        for batch_idx in epoch_order(&mut rng, train.len()).chunks(config.batch_size) {
            let batch = train.gather(batch_idx);
            let (grads, _) = model.loss_gradient(&batch.inputs, &batch.targets)?;
            model.apply_gradient(&grads, lr_at(config, update, epoch));
            update += 1;
        }
    }
    let final_train = dataset_mse(model, train)?;
    let final_dev = dev.map(|d| dataset_mse(model, d)).transpose()?;
    log::info!(
        "trained {} epochs: train mse {final_train:.6e}",
        config.epochs
    );
    Ok(TrainHistory {
        epochs: history,
        final_train,
        final_dev,
    })
}

/// Trains a single network on noisy→clean pairs.
pub fn train(
    mut net: Network,
    pairs: &[EmbeddingPair],
    dev_pairs: &[EmbeddingPair],
    config: &TrainConfig,
) -> Result<(Network, TrainHistory)> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    if net.in_dim() != net.out_dim() {
        return shape_err("pair training needs a network with equal input and output dims");
    }
    let train_set = PairBatch::from_pairs(pairs, net.in_dim())?;
    let dev_set = PairBatch::from_pairs(dev_pairs, net.in_dim())?;
    let history = train_model(&mut net, &train_set, Some(&dev_set), config)?;
    Ok((net, history))
}
