//! From-scratch differentiable models: multinomial logistic regression and a
//! one-hidden-layer tanh MLP, trained with plain mini-batch SGD.
//!
//! Loss is softmax cross-entropy. Training shuffles per epoch from the
//! caller's seeded stream and can be interrupted at epoch boundaries only;
//! the epoch in flight always finishes.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha20Rng;

use crate::data::Dataset;
use crate::error::{Result, SimError};
use crate::params::ParamVector;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Logistic,
    Mlp,
}

/// Architecture description. The parameter layout is:
/// logistic: `[W (classes x dim), b (classes)]`;
/// mlp: `[W1 (hidden x dim), b1 (hidden), W2 (classes x hidden), b2 (classes)]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Logistic,
            input_dim,
            hidden_dim: 0,
            num_classes,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_dim,
            hidden_dim,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(SimError::Config(format!(
                "model needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.input_dim == 0 {
            return Err(SimError::Config("model input dimension must be positive".into()));
        }
        match self.kind {
            ModelKind::Logistic if self.hidden_dim != 0 => Err(SimError::Config(
                "logistic model must have hidden_dim = 0".into(),
            )),
            ModelKind::Mlp if self.hidden_dim == 0 => Err(SimError::Config(
                "mlp model needs a positive hidden_dim".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            ModelKind::Logistic => self.num_classes * self.input_dim + self.num_classes,
            ModelKind::Mlp => {
                self.hidden_dim * self.input_dim
                    + self.hidden_dim
                    + self.num_classes * self.hidden_dim
                    + self.num_classes
            }
        }
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(SimError::Dimension {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        Ok(())
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.dim() != self.input_dim {
            return Err(SimError::Dimension {
                expected: self.input_dim,
                got: data.dim(),
            });
        }
        if data.num_classes() > self.num_classes {
            return Err(SimError::Data(format!(
                "dataset has {} classes but model supports {}",
                data.num_classes(),
                self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamVector,
    pub epochs_completed: u32,
    /// Sample visits processed: epochs_completed times the partition size.
    pub samples_used: usize,
}

/// Seeded init: weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
/// biases exactly zero.
pub fn init_model(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = rng::stream(seed, &[rng::tag::MODEL_INIT]);
    let mut values = vec![0.0; spec.param_count()];
    let mut draw_block = |values: &mut [f64], fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in values {
            *v = rand::Rng::random_range(&mut rng, -bound..bound);
        }
    };
    match spec.kind {
        ModelKind::Logistic => {
            let w = spec.num_classes * spec.input_dim;
            draw_block(&mut values[..w], spec.input_dim);
        }
        ModelKind::Mlp => {
            let w1 = spec.hidden_dim * spec.input_dim;
            let b1 = spec.hidden_dim;
            let w2 = spec.num_classes * spec.hidden_dim;
            draw_block(&mut values[..w1], spec.input_dim);
            draw_block(&mut values[w1 + b1..w1 + b1 + w2], spec.hidden_dim);
        }
    }
    ParamVector::from_vec(values)
}

/// Logits for one sample, plus the hidden activation for the mlp.
fn forward(spec: &ModelSpec, params: &[f64], x: &[f64], hidden: &mut Vec<f64>, logits: &mut Vec<f64>) {
    let c = spec.num_classes;
    let d = spec.input_dim;
    logits.clear();
    match spec.kind {
        ModelKind::Logistic => {
            let bias = c * d;
            for j in 0..c {
                let mut z = params[bias + j];
                let row = &params[j * d..(j + 1) * d];
                for (w, xi) in row.iter().zip(x) {
                    z += w * xi;
                }
                logits.push(z);
            }
        }
        ModelKind::Mlp => {
            let h = spec.hidden_dim;
            let w1 = h * d;
            let b1 = w1;
            let w2 = w1 + h;
            let b2 = w2 + c * h;
            hidden.clear();
            for k in 0..h {
                let mut z = params[b1 + k];
                let row = &params[k * d..(k + 1) * d];
                for (w, xi) in row.iter().zip(x) {
                    z += w * xi;
                }
                hidden.push(z.tanh());
            }
            for j in 0..c {
                let mut z = params[b2 + j];
                let row = &params[w2 + j * h..w2 + (j + 1) * h];
                for (w, a) in row.iter().zip(hidden.iter()) {
                    z += w * a;
                }
                logits.push(z);
            }
        }
    }
}

/// Softmax probabilities in place, returning the log-sum-exp for the loss.
fn softmax_in_place(logits: &mut [f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in logits.iter_mut() {
        *z /= sum;
    }
    max + sum.ln()
}

/// Mean cross-entropy loss and top-1 accuracy over the dataset.
pub fn loss_and_accuracy(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
) -> Result<(f64, f64)> {
    spec.check_params(params)?;
    spec.check_data(data)?;
    let mut hidden = Vec::new();
    let mut logits = Vec::new();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..data.len() {
        forward(spec, params, data.row(i), &mut hidden, &mut logits);
        let label = data.label(i);
        let raw_label_logit = logits[label];
        let lse = {
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
            max + sum.ln()
        };
        loss += lse - raw_label_logit;
        let pred = logits
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |best, (j, &z)| {
                if z > best.1 {
                    (j, z)
                } else {
                    best
                }
            })
            .0;
        if pred == label {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Analytic gradient of the mean cross-entropy over selected rows.
pub fn gradient_rows(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    rows: &[usize],
) -> Result<ParamVector> {
    spec.check_params(params)?;
    spec.check_data(data)?;
    if rows.is_empty() {
        return Err(SimError::Data("gradient over an empty batch".into()));
    }
    let c = spec.num_classes;
    let d = spec.input_dim;
    let scale = 1.0 / rows.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut hidden = Vec::new();
    let mut logits = Vec::new();
    for &i in rows {
        let x = data.row(i);
        let label = data.label(i);
        forward(spec, params, x, &mut hidden, &mut logits);
        softmax_in_place(&mut logits);
        logits[label] -= 1.0;
        match spec.kind {
            ModelKind::Logistic => {
                let bias = c * d;
                for j in 0..c {
                    let delta = logits[j] * scale;
                    let row = &mut grad[j * d..(j + 1) * d];
                    for (g, xi) in row.iter_mut().zip(x) {
                        *g += delta * xi;
                    }
                    grad[bias + j] += delta;
                }
            }
            ModelKind::Mlp => {
                let h = spec.hidden_dim;
                let w1 = h * d;
                let b1 = w1;
                let w2 = w1 + h;
                let b2 = w2 + c * h;
                for j in 0..c {
                    let delta = logits[j] * scale;
                    let row = &mut grad[w2 + j * h..w2 + (j + 1) * h];
                    for (g, a) in row.iter_mut().zip(hidden.iter()) {
                        *g += delta * a;
                    }
                    grad[b2 + j] += delta;
                }
                for (k, &a) in hidden.iter().enumerate() {
                    let mut upstream = 0.0;
                    for j in 0..c {
                        upstream += params[w2 + j * h + k] * logits[j] * scale;
                    }
                    let dz = upstream * (1.0 - a * a);
                    let row = &mut grad[k * d..(k + 1) * d];
                    for (g, xi) in row.iter_mut().zip(x) {
                        *g += dz * xi;
                    }
                    grad[b1 + k] += dz;
                }
            }
        }
    }
    Ok(ParamVector::from_vec(grad))
}

/// Analytic gradient of the mean cross-entropy over a whole batch dataset.
pub fn gradient(spec: &ModelSpec, params: &ParamVector, batch: &Dataset) -> Result<ParamVector> {
    let rows: Vec<usize> = (0..batch.len()).collect();
    gradient_rows(spec, params, batch, &rows)
}

fn run_epoch(
    spec: &ModelSpec,
    params: &mut ParamVector,
    data: &Dataset,
    order: &mut [usize],
    rng: &mut ChaCha20Rng,
    cfg: &TrainConfig,
) -> Result<()> {
    order.shuffle(rng);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for chunk in order.chunks(cfg.batch_size) {
        // A batch is a set; accumulating its gradient in index order keeps
        // the result independent of the shuffle within the batch.
        batch.clear();
        batch.extend_from_slice(chunk);
        batch.sort_unstable();
        let grad = gradient_rows(spec, params, data, &batch)?;
        for (w, g) in params.as_mut_slice().iter_mut().zip(grad.iter()) {
            *w -= cfg.learning_rate * g;
        }
    }
    Ok(())
}

fn check_train_inputs(spec: &ModelSpec, start: &ParamVector, data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    spec.check_params(start)?;
    spec.check_data(data)?;
    if cfg.epochs == 0 {
        return Err(SimError::Config("training needs at least one epoch".into()));
    }
    if cfg.batch_size == 0 {
        return Err(SimError::Config("batch size must be positive".into()));
    }
    Ok(())
}

/// Mini-batch SGD for up to `cfg.epochs` epochs. After each completed epoch
/// the interrupt predicate (given the 1-based epoch number) is consulted;
/// when it returns true the client stops and uploads what it has. The epoch
/// in flight always completes, so `epochs_completed >= 1`.
pub fn local_train(
    spec: &ModelSpec,
    start: &ParamVector,
    partition: &Dataset,
    cfg: &TrainConfig,
    interrupt_after_epoch: Option<&dyn Fn(u32) -> bool>,
) -> Result<TrainOutcome> {
    check_train_inputs(spec, start, partition, cfg)?;
    let mut rng = rng::stream(cfg.seed, &[rng::tag::CLIENT_TRAIN]);
    let mut params = start.clone();
    let mut order: Vec<usize> = (0..partition.len()).collect();
    let mut epochs_completed = 0;
    for epoch in 1..=cfg.epochs {
        run_epoch(spec, &mut params, partition, &mut order, &mut rng, cfg)?;
        epochs_completed = epoch;
        if let Some(interrupt) = interrupt_after_epoch {
            if interrupt(epoch) {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params,
        epochs_completed,
        samples_used: epochs_completed as usize * partition.len(),
    })
}

/// Parameter states after each of the `cfg.epochs` epochs. Bit-identical to
/// what `local_train` would produce when stopped at a given epoch, which lets
/// the engine precompute a client's whole round off the event loop.
pub fn train_trajectory(
    spec: &ModelSpec,
    start: &ParamVector,
    partition: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<ParamVector>> {
    check_train_inputs(spec, start, partition, cfg)?;
    let mut rng = rng::stream(cfg.seed, &[rng::tag::CLIENT_TRAIN]);
    let mut params = start.clone();
    let mut order: Vec<usize> = (0..partition.len()).collect();
    let mut states = Vec::with_capacity(cfg.epochs as usize);
    for _ in 1..=cfg.epochs {
        run_epoch(spec, &mut params, partition, &mut order, &mut rng, cfg)?;
        states.push(params.clone());
    }
    Ok(states)
}
