//! A small dense-network engine in 64-bit floats.
//!
//! Layer `l` maps width `widths[l]` to `widths[l + 1]` with a weight matrix of
//! shape `(widths[l + 1], widths[l])` and a bias of length `widths[l + 1]`.
//! Hidden layers apply the configured activation; the output layer produces
//! raw logits that feed a softmax cross-entropy loss with mean reduction.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed in terms of the pre-activation `z` and output `a`.
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

/// Layer widths from input to output plus the hidden nonlinearity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    widths: Vec<usize>,
    #[serde(default)]
    activation: Activation,
}

impl Arch {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::InvalidArch(format!(
                "need input, at least one hidden layer and output, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidArch(format!("zero width in {widths:?}")));
        }
        Ok(Self { widths, activation })
    }

    pub fn relu(widths: &[usize]) -> Result<Self> {
        Self::new(widths.to_vec(), Activation::Relu)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn class_count(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.widths[1..self.widths.len() - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> u64 {
        count_params(&self.widths)
    }

    pub fn flops_per_example(&self) -> u64 {
        flops_per_example(&self.widths)
    }

    /// Same activation, different widths.
    pub(crate) fn with_widths(&self, widths: Vec<usize>) -> Result<Self> {
        Self::new(widths, self.activation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Arch,
    layers: Vec<Layer>,
}

/// Parameter gradients, shape-congruent with a [`Model`], plus the mean loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::DimensionMismatch("empty batch".into()));
        }
        if inputs.nrows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `Σ_l (in_l·out_l + out_l)`.
pub fn count_params(widths: &[usize]) -> u64 {
    widths.windows(2).map(|w| (w[0] * w[1] + w[1]) as u64).sum()
}

/// Training cost per example: 2 FLOPs per weight forward and 4 backward.
pub fn flops_per_example(widths: &[usize]) -> u64 {
    6 * widths.windows(2).map(|w| (w[0] * w[1]) as u64).sum::<u64>()
}

/// Activations kept from a forward pass for reuse in backprop.
pub(crate) struct Trace {
    /// `acts[0]` is the input, `acts[L]` the logits.
    acts: Vec<Array2<f64>>,
    /// Pre-activations of hidden layers, `pre[l]` feeds `acts[l + 1]`.
    pre: Vec<Array2<f64>>,
}

impl Trace {
    pub(crate) fn logits(&self) -> &Array2<f64> {
        self.acts.last().expect("at least one layer")
    }
}

impl Model {
    /// Scaled-uniform initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases.
    pub fn init(arch: &Arch, seed: u64) -> Self {
        let mut rng = seed::rng(seed, Stream::Init, &[]);
        let layers = arch
            .widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
                Layer {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self {
            arch: arch.clone(),
            layers,
        }
    }

    pub fn zeros(arch: &Arch) -> Self {
        let layers = arch
            .widths
            .windows(2)
            .map(|w| Layer::zeros(w[0], w[1]))
            .collect();
        Self {
            arch: arch.clone(),
            layers,
        }
    }

    pub fn from_layers(arch: Arch, layers: Vec<Layer>) -> Result<Self> {
        check_layer_shapes(&arch, &layers)?;
        Ok(Self { arch, layers })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> u64 {
        self.arch.param_count()
    }

    /// All parameters flattened layer by layer, weights (row-major) before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count() as usize);
        for layer in &self.layers {
            out.extend(layer.weight.iter().copied());
            out.extend(layer.bias.iter().copied());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, inputs: &ArrayView2<f64>) -> Result<()> {
        if inputs.ncols() != self.arch.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "input has {} features, model expects {}",
                inputs.ncols(),
                self.arch.input_dim()
            )));
        }
        Ok(())
    }

    pub(crate) fn forward_trace(&self, inputs: ArrayView2<f64>) -> Result<Trace> {
        self.check_input(&inputs)?;
        let act = self.arch.activation;
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(last);
        acts.push(inputs.to_owned());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = acts[l].dot(&layer.weight.t());
            z += &layer.bias;
            if l == last {
                acts.push(z);
            } else {
                let a = z.mapv(|v| act.apply(v));
                pre.push(z);
                acts.push(a);
            }
        }
        Ok(Trace { acts, pre })
    }

    /// Logits of shape `(B, K)`.
    pub fn forward(&self, batch: &Batch) -> Result<Array2<f64>> {
        self.forward_inputs(batch.inputs.view())
    }

    pub fn forward_inputs(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut trace = self.forward_trace(inputs)?;
        Ok(trace.acts.pop().expect("logits"))
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        let k = self.arch.class_count();
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::DimensionMismatch(format!(
                "label {bad} outside 0..{k}"
            )));
        }
        Ok(())
    }

    /// Mean softmax cross-entropy and its exact gradient.
    pub fn loss_and_grad(&self, batch: &Batch) -> Result<Gradients> {
        Ok(self.loss_grad_and_trace(batch, None)?.0)
    }

    /// Cross-entropy restricted to the classes where `allowed` is true: the
    /// other logits are dropped from the softmax and receive no gradient.
    pub fn loss_and_grad_masked(&self, batch: &Batch, allowed: &[bool]) -> Result<Gradients> {
        Ok(self.loss_grad_and_trace(batch, Some(allowed))?.0)
    }

    /// As [`Model::loss_and_grad`], also returning the forward trace and the
    /// softmax probabilities so callers can reuse them.
    pub(crate) fn loss_grad_and_trace(
        &self,
        batch: &Batch,
        allowed: Option<&[bool]>,
    ) -> Result<(Gradients, Trace, Array2<f64>)> {
        self.check_labels(&batch.labels)?;
        if let Some(mask) = allowed {
            if mask.len() != self.arch.class_count() {
                return Err(Error::DimensionMismatch(format!(
                    "class mask of length {} for {} classes",
                    mask.len(),
                    self.arch.class_count()
                )));
            }
            if let Some(&y) = batch.labels.iter().find(|&&y| !mask[y]) {
                return Err(Error::DimensionMismatch(format!("label {y} is masked out")));
            }
        }
        let trace = self.forward_trace(batch.inputs.view())?;
        let probs = softmax_rows_masked(trace.logits(), allowed);
        let n = batch.len() as f64;

        let mut loss = 0.0;
        for (row, &y) in probs.axis_iter(Axis(0)).zip(&batch.labels) {
            loss -= row[y].max(f64::MIN_POSITIVE).ln();
        }
        loss /= n;

        // dL/dlogits for the mean loss.
        let mut delta = probs.clone();
        for (mut row, &y) in delta.axis_iter_mut(Axis(0)).zip(&batch.labels) {
            row[y] -= 1.0;
        }
        delta /= n;

        let layers = self.backprop(&trace, delta)?;
        if !loss.is_finite() {
            return Err(Error::NumericFailure(format!("loss is {loss}")));
        }
        Ok((Gradients { layers, loss }, trace, probs))
    }

    fn backprop(&self, trace: &Trace, mut delta: Array2<f64>) -> Result<Vec<Layer>> {
        let act = self.arch.activation;
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let weight = delta.t().dot(&trace.acts[l]);
            let bias = delta.sum_axis(Axis(0));
            if !weight.iter().chain(bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::NumericFailure(format!(
                    "non-finite gradient in layer {l}"
                )));
            }
            grads.push(Layer { weight, bias });
            if l > 0 {
                let mut next = delta.dot(&self.layers[l].weight);
                Zip::from(&mut next)
                    .and(&trace.pre[l - 1])
                    .and(&trace.acts[l])
                    .for_each(|d, &z, &a| *d *= act.derivative(z, a));
                delta = next;
            }
        }
        grads.reverse();
        Ok(grads)
    }

    /// Squared L2 norm of each example's own loss gradient, given the
    /// per-example output deltas `dℓ/dlogits` (one row per example, unscaled).
    ///
    /// Uses `‖δ aᵀ‖² = ‖δ‖²·‖a‖²` per layer, so no per-example weight
    /// gradient is materialized.
    pub(crate) fn per_example_grad_sq_norms(
        &self,
        trace: &Trace,
        mut delta: Array2<f64>,
    ) -> Vec<f64> {
        let act = self.arch.activation;
        let n = delta.nrows();
        let mut norms = vec![0.0; n];
        for l in (0..self.layers.len()).rev() {
            let input = &trace.acts[l];
            for (i, norm) in norms.iter_mut().enumerate() {
                let d2: f64 = delta.row(i).iter().map(|v| v * v).sum();
                let a2: f64 = input.row(i).iter().map(|v| v * v).sum();
                *norm += d2 * (a2 + 1.0);
            }
            if l > 0 {
                let mut next = delta.dot(&self.layers[l].weight);
                Zip::from(&mut next)
                    .and(&trace.pre[l - 1])
                    .and(&trace.acts[l])
                    .for_each(|d, &z, &a| *d *= act.derivative(z, a));
                delta = next;
            }
        }
        norms
    }

    /// In-place `W ← W − lr·∇W` on every layer.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        check_layer_shapes(&self.arch, &grads.layers)?;
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weight.scaled_add(-lr, &g.weight);
            layer.bias.scaled_add(-lr, &g.bias);
        }
        Ok(())
    }

    /// Accuracy (argmax, ties to the lowest class index) and mean loss.
    pub fn evaluate(&self, dataset: &Dataset) -> Result<(f64, f64)> {
        self.evaluate_limit(dataset, dataset.len())
    }

    /// Evaluates on the first `limit` examples.
    pub fn evaluate_limit(&self, dataset: &Dataset, limit: usize) -> Result<(f64, f64)> {
        let n = limit.min(dataset.len());
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        self.check_labels(&dataset.labels()[..n])?;
        const CHUNK: usize = 1024;
        let mut correct = 0usize;
        let mut loss = 0.0;
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let inputs = dataset.inputs().slice(ndarray::s![start..end, ..]);
            let logits = self.forward_inputs(inputs)?;
            for (row, &y) in logits.axis_iter(Axis(0)).zip(&dataset.labels()[start..end]) {
                let pred = argmax(row.iter().copied());
                if pred == y {
                    correct += 1;
                }
                loss += logsumexp(row.iter().copied()) - row[y];
            }
            start = end;
        }
        let loss = loss / n as f64;
        if !loss.is_finite() {
            return Err(Error::NumericFailure(format!("evaluation loss is {loss}")));
        }
        Ok((correct as f64 / n as f64, loss))
    }
}

fn check_layer_shapes(arch: &Arch, layers: &[Layer]) -> Result<()> {
    if layers.len() != arch.num_layers() {
        return Err(Error::DimensionMismatch(format!(
            "{} layers for an arch with {}",
            layers.len(),
            arch.num_layers()
        )));
    }
    for (l, (layer, w)) in layers.iter().zip(arch.widths.windows(2)).enumerate() {
        if layer.weight.dim() != (w[1], w[0]) || layer.bias.len() != w[1] {
            return Err(Error::DimensionMismatch(format!(
                "layer {l}: weight {:?} bias {} but arch wants ({}, {}) and {}",
                layer.weight.dim(),
                layer.bias.len(),
                w[1],
                w[0],
                w[1]
            )));
        }
    }
    Ok(())
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    softmax_rows_masked(logits, None)
}

/// Row softmax over the allowed columns; disallowed columns get probability 0.
pub(crate) fn softmax_rows_masked(logits: &Array2<f64>, allowed: Option<&[bool]>) -> Array2<f64> {
    let keep = |j: usize| allowed.is_none_or(|m| m[j]);
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row
            .iter()
            .enumerate()
            .filter(|(j, _)| keep(*j))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        for (j, v) in row.iter_mut().enumerate() {
            *v = if keep(j) { (*v - max).exp() } else { 0.0 };
        }
        let sum = row.sum();
        row /= sum;
    }
    out
}
