//! Dense feed-forward classifier split into a representation component and a
//! classification component.
//!
//! The network is `C(R(x))`: a prefix of layers tagged
//! [`Group::Representation`] followed by a suffix tagged
//! [`Group::Classification`] ending in identity-activated logits. Training
//! uses softmax cross-entropy and momentum SGD with a per-group learning rate
//! and optional group freezing.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{PrtError, Result};
use crate::linalg::{dot, Matrix};

/// Standard deviation of freshly initialised classification heads.
pub const HEAD_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Representation,
    Classification,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = PrtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(PrtError::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Representation => "representation",
            Group::Classification => "classification",
        })
    }
}

impl FromStr for Group {
    type Err = PrtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "representation" => Ok(Group::Representation),
            "classification" => Ok(Group::Classification),
            other => Err(PrtError::invalid(format!("unknown group `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub group: Group,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation, group: Group) -> Self {
        LayerSpec {
            input_dim,
            output_dim,
            activation,
            group,
        }
    }
}

/// Checks the structural invariants of a layer stack.
pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    let last = specs
        .last()
        .ok_or_else(|| PrtError::invalid("network needs at least one layer"))?;
    for (i, s) in specs.iter().enumerate() {
        if s.input_dim == 0 || s.output_dim == 0 {
            return Err(PrtError::invalid(format!("layer {i} has a zero dimension")));
        }
    }
    for (i, pair) in specs.windows(2).enumerate() {
        if pair[0].output_dim != pair[1].input_dim {
            return Err(PrtError::invalid(format!(
                "layer {i} outputs {} but layer {} expects {}",
                pair[0].output_dim,
                i + 1,
                pair[1].input_dim
            )));
        }
        if pair[0].group == Group::Classification && pair[1].group == Group::Representation {
            return Err(PrtError::invalid(
                "representation layers must precede classification layers",
            ));
        }
    }
    if specs[0].group != Group::Representation {
        return Err(PrtError::invalid("network has no representation layer"));
    }
    if last.group != Group::Classification || last.activation != Activation::Identity {
        return Err(PrtError::invalid(
            "final layer must be an identity-activated classification layer",
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    spec: LayerSpec,
    /// `[output_dim × input_dim]`
    weights: Matrix,
    bias: Vec<f64>,
}

impl Layer {
    pub fn from_parts(spec: LayerSpec, weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weights.rows() != spec.output_dim || weights.cols() != spec.input_dim {
            return Err(PrtError::shape(format!(
                "weights are {}x{}, spec wants {}x{}",
                weights.rows(),
                weights.cols(),
                spec.output_dim,
                spec.input_dim
            )));
        }
        if bias.len() != spec.output_dim {
            return Err(PrtError::shape(format!(
                "bias has {} entries, spec wants {}",
                bias.len(),
                spec.output_dim
            )));
        }
        Ok(Layer {
            spec,
            weights,
            bias,
        })
    }

    fn gaussian(spec: LayerSpec, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite positive std");
        let data = (0..spec.output_dim * spec.input_dim)
            .map(|_| normal.sample(rng))
            .collect();
        Layer {
            spec,
            weights: Matrix::from_vec(spec.output_dim, spec.input_dim, data)
                .expect("sized by spec"),
            bias: vec![0.0; spec.output_dim],
        }
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn forward(&self, inputs: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(inputs.rows(), self.spec.output_dim);
        for (i, x) in inputs.row_iter().enumerate() {
            let row = out.row_mut(i);
            for (o, slot) in row.iter_mut().enumerate() {
                let z = self.bias[o] + dot(self.weights.row(o), x);
                *slot = match self.spec.activation {
                    Activation::Relu => z.max(0.0),
                    Activation::Identity => z,
                };
            }
        }
        out
    }
}

/// All parameters of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    layers: Vec<Layer>,
    seed: u64,
}

impl NetworkState {
    /// He-normal weights (`std = sqrt(2 / fan_in)`) and zero biases.
    pub fn init(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        validate_specs(specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .iter()
            .map(|&s| Layer::gaussian(s, (2.0 / s.input_dim as f64).sqrt(), &mut rng))
            .collect();
        Ok(NetworkState { layers, seed })
    }

    pub fn zeros(specs: &[LayerSpec]) -> Result<Self> {
        validate_specs(specs)?;
        let layers = specs
            .iter()
            .map(|&s| Layer {
                spec: s,
                weights: Matrix::zeros(s.output_dim, s.input_dim),
                bias: vec![0.0; s.output_dim],
            })
            .collect();
        Ok(NetworkState { layers, seed: 0 })
    }

    pub fn from_layers(layers: Vec<Layer>, seed: u64) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec).collect();
        validate_specs(&specs)?;
        let state = NetworkState { layers, seed };
        if !state.all_finite() {
            return Err(PrtError::invalid("network parameters contain NaN or Inf"));
        }
        Ok(state)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.input_dim
    }

    pub fn label_count(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.output_dim
    }

    /// Width of the last representation layer.
    pub fn representation_dim(&self) -> usize {
        self.layers[self.representation_depth() - 1].spec.output_dim
    }

    fn representation_depth(&self) -> usize {
        self.layers
            .iter()
            .take_while(|l| l.spec.group == Group::Representation)
            .count()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Parameters of one group flattened in layer order (weights row-major,
    /// then bias).
    pub fn group_parameters(&self, group: Group) -> Vec<f64> {
        self.layers
            .iter()
            .filter(|l| l.spec.group == group)
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn flat_parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.all_finite() && l.bias.iter().all(|v| v.is_finite()))
    }

    fn check_inputs(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(PrtError::shape(format!(
                "inputs have {} features, network expects {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        if !inputs.all_finite() {
            return Err(PrtError::invalid("inputs contain NaN or Inf"));
        }
        Ok(())
    }

    /// Activations of every layer, starting with the inputs themselves.
    fn trace(&self, inputs: &Matrix) -> Vec<Matrix> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(inputs.clone());
        for layer in &self.layers {
            let next = layer.forward(acts.last().expect("non-empty"));
            acts.push(next);
        }
        acts
    }

    /// Raw logits `[n × label_count]`.
    pub fn logits(&self, inputs: &Matrix) -> Result<Matrix> {
        self.check_inputs(inputs)?;
        let mut acts = inputs.clone();
        for layer in &self.layers {
            acts = layer.forward(&acts);
        }
        Ok(acts)
    }

    /// Softmax class probabilities `[n × label_count]`.
    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        let mut out = self.logits(inputs)?;
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        Ok(out)
    }

    /// Output of the representation component, `[n × representation_dim]`.
    pub fn represent(&self, inputs: &Matrix) -> Result<Matrix> {
        self.check_inputs(inputs)?;
        let mut acts = inputs.clone();
        for layer in &self.layers[..self.representation_depth()] {
            acts = layer.forward(&acts);
        }
        Ok(acts)
    }

    pub fn predict(&self, inputs: &Matrix) -> Result<Vec<usize>> {
        let logits = self.logits(inputs)?;
        Ok(logits.row_iter().map(argmax).collect())
    }

    /// Mean softmax cross-entropy and its gradient for every parameter,
    /// frozen or not.
    pub fn loss_and_grad(&self, inputs: &Matrix, labels: &[usize]) -> Result<(f64, Gradients)> {
        self.check_batch(inputs, labels)?;
        let n = inputs.rows();
        let acts = self.trace(inputs);
        let logits = acts.last().expect("non-empty");

        let mut delta = Matrix::zeros(n, self.label_count());
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = logits.row(i);
            let lse = log_sum_exp(row);
            loss += lse - row[y];
            let d = delta.row_mut(i);
            for (k, slot) in d.iter_mut().enumerate() {
                *slot = (row[k] - lse).exp() / n as f64;
            }
            d[y] -= 1.0 / n as f64;
        }
        loss /= n as f64;

        let mut grads = Gradients::zeros_like(self);
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let input = &acts[li];
            let (gw, gb) = (&mut grads.weights[li], &mut grads.biases[li]);
            for (x, d) in input.row_iter().zip(delta.row_iter()) {
                for (o, &dz) in d.iter().enumerate() {
                    if dz == 0.0 {
                        continue;
                    }
                    gb[o] += dz;
                    for (g, &xv) in gw.row_mut(o).iter_mut().zip(x) {
                        *g += dz * xv;
                    }
                }
            }
            if li == 0 {
                break;
            }
            let below_relu = self.layers[li - 1].spec.activation == Activation::Relu;
            let mut next = Matrix::zeros(n, layer.spec.input_dim);
            for i in 0..n {
                let a = input.row(i);
                let out = next.row_mut(i);
                for (o, &dz) in delta.row(i).iter().enumerate() {
                    if dz == 0.0 {
                        continue;
                    }
                    for (slot, &w) in out.iter_mut().zip(layer.weights.row(o)) {
                        *slot += dz * w;
                    }
                }
                if below_relu {
                    for (slot, &av) in out.iter_mut().zip(a) {
                        if av <= 0.0 {
                            *slot = 0.0;
                        }
                    }
                }
            }
            delta = next;
        }
        Ok((loss, grads))
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, inputs: &Matrix, labels: &[usize]) -> Result<f64> {
        self.check_batch(inputs, labels)?;
        let logits = self.logits(inputs)?;
        let total: f64 = logits
            .row_iter()
            .zip(labels)
            .map(|(row, &y)| log_sum_exp(row) - row[y])
            .sum();
        Ok(total / inputs.rows() as f64)
    }

    fn check_batch(&self, inputs: &Matrix, labels: &[usize]) -> Result<()> {
        self.check_inputs(inputs)?;
        if inputs.rows() == 0 {
            return Err(PrtError::invalid("batch has no samples"));
        }
        if labels.len() != inputs.rows() {
            return Err(PrtError::shape(format!(
                "{} labels for {} samples",
                labels.len(),
                inputs.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.label_count()) {
            return Err(PrtError::invalid(format!(
                "label {bad} outside [0, {})",
                self.label_count()
            )));
        }
        Ok(())
    }

    /// Momentum SGD step: `v' = momentum·v − lr_group·g`, `θ' = θ + v'`.
    ///
    /// Frozen groups keep both parameters and velocity untouched.
    pub fn sgd_update(
        &mut self,
        grads: &Gradients,
        velocity: &mut Gradients,
        config: &TrainConfig,
    ) -> Result<()> {
        grads.check_shape(self)?;
        velocity.check_shape(self)?;
        for (li, layer) in self.layers.iter_mut().enumerate() {
            let group = layer.spec.group;
            if config.frozen_groups.contains(&group) {
                continue;
            }
            let lr = config.group_lr(group);
            let params = layer
                .weights
                .as_mut_slice()
                .iter_mut()
                .chain(layer.bias.iter_mut());
            let g = grads.weights[li].as_slice().iter().chain(&grads.biases[li]);
            let (vw, vb) = (&mut velocity.weights[li], &mut velocity.biases[li]);
            let v = vw.as_mut_slice().iter_mut().chain(vb.iter_mut());
            for ((theta, &gi), vi) in params.zip(g).zip(v) {
                *vi = config.momentum * *vi - lr * gi;
                *theta += *vi;
            }
        }
        Ok(())
    }

    /// Swaps the classification component for a freshly initialised one with
    /// `new_label_count` outputs. Representation parameters are untouched.
    pub fn replace_head(&self, new_label_count: usize, init_seed: u64) -> Result<NetworkState> {
        if new_label_count < 2 {
            return Err(PrtError::invalid(format!(
                "a classification head needs at least 2 labels, got {new_label_count}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let last = self.layers.len() - 1;
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                if layer.spec.group == Group::Representation {
                    return layer.clone();
                }
                let mut spec = layer.spec;
                if i == last {
                    spec.output_dim = new_label_count;
                }
                Layer::gaussian(spec, HEAD_INIT_STD, &mut rng)
            })
            .collect();
        Ok(NetworkState {
            layers,
            seed: init_seed,
        })
    }

    /// Trains on `(inputs, labels)` with shuffled mini-batches.
    ///
    /// The final partial batch is kept. Every epoch appends one record to
    /// `log`. A non-finite loss or parameter aborts with
    /// [`PrtError::Divergence`] tagged by `stage`.
    pub fn train(
        &mut self,
        inputs: &Matrix,
        labels: &[usize],
        config: &TrainConfig,
        stage: &str,
        log: &mut RunLog,
    ) -> Result<TrainReport> {
        config.validate()?;
        let initial_loss = self.loss(inputs, labels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut velocity = Gradients::zeros_like(self);
        let mut order: Vec<usize> = (0..inputs.rows()).collect();
        let mut epoch_losses = Vec::with_capacity(config.epochs);
        let started = Instant::now();
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut weighted = 0.0;
            for batch in order.chunks(config.batch_size) {
                let x = inputs.select_rows(batch);
                let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                let (loss, grads) = self.loss_and_grad(&x, &y)?;
                if !loss.is_finite() {
                    return Err(PrtError::Divergence {
                        stage: stage.to_string(),
                        detail: format!("non-finite loss at epoch {epoch}"),
                    });
                }
                self.sgd_update(&grads, &mut velocity, config)?;
                weighted += loss * batch.len() as f64;
            }
            if !self.all_finite() {
                return Err(PrtError::Divergence {
                    stage: stage.to_string(),
                    detail: format!("non-finite parameters after epoch {epoch}"),
                });
            }
            let mean_loss = weighted / inputs.rows() as f64;
            epoch_losses.push(mean_loss);
            log.push(EpochRecord {
                epoch,
                mean_loss,
                elapsed_ms: started.elapsed().as_millis(),
            });
        }
        let final_loss = self.loss(inputs, labels)?;
        Ok(TrainReport {
            initial_loss,
            final_loss,
            epoch_losses,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Full-set loss before the first update.
    pub initial_loss: f64,
    /// Full-set loss after the last update.
    pub final_loss: f64,
    /// Running mean of mini-batch losses per epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub elapsed_ms: u128,
}

/// Per-stage training log, one line per epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    records: Vec<EpochRecord>,
    warnings: Vec<String>,
}

impl RunLog {
    pub fn push(&mut self, record: EpochRecord) {
        self.records.push(record);
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        let message = message.into();
        log::warn!("{message}");
        self.warnings.push(message);
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// `epoch mean_loss elapsed_ms` per line; warnings as `# warning: ...`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for w in &self.warnings {
            out.push_str(&format!("# warning: {w}\n"));
        }
        for r in &self.records {
            out.push_str(&format!(
                "{} {:.10} {}\n",
                r.epoch, r.mean_loss, r.elapsed_ms
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub classifier_lr_multiplier: f64,
    pub momentum: f64,
    pub frozen_groups: BTreeSet<Group>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 16,
            base_lr: 3e-4,
            classifier_lr_multiplier: 1.0,
            momentum: 0.9,
            frozen_groups: BTreeSet::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(PrtError::config("epochs and batch_size must be positive"));
        }
        if !(self.base_lr > 0.0) || !(self.classifier_lr_multiplier > 0.0) {
            return Err(PrtError::config(
                "base_lr and classifier_lr_multiplier must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(PrtError::config("momentum must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Learning rate applied to `group`, ignoring freezing.
    pub fn group_lr(&self, group: Group) -> f64 {
        match group {
            Group::Representation => self.base_lr,
            Group::Classification => self.base_lr * self.classifier_lr_multiplier,
        }
    }
}

/// Per-parameter gradient (or velocity) buffers shaped like a network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(state: &NetworkState) -> Self {
        Self::filled(state, 0.0)
    }

    pub fn filled(state: &NetworkState, value: f64) -> Self {
        let mut weights = Vec::with_capacity(state.layers.len());
        let mut biases = Vec::with_capacity(state.layers.len());
        for l in &state.layers {
            let mut w = Matrix::zeros(l.spec.output_dim, l.spec.input_dim);
            w.as_mut_slice().fill(value);
            weights.push(w);
            biases.push(vec![value; l.spec.output_dim]);
        }
        Gradients { weights, biases }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.as_slice().iter().chain(b).copied())
            .collect()
    }

    fn check_shape(&self, state: &NetworkState) -> Result<()> {
        let ok = self.weights.len() == state.layers.len()
            && self.biases.len() == state.layers.len()
            && state.layers.iter().enumerate().all(|(i, l)| {
                self.weights[i].rows() == l.spec.output_dim
                    && self.weights[i].cols() == l.spec.input_dim
                    && self.biases[i].len() == l.spec.output_dim
            });
        if ok {
            Ok(())
        } else {
            Err(PrtError::shape("gradient buffers do not match the network"))
        }
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
