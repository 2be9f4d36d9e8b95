//! Softmax cross-entropy, Adadelta and the mini-batch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{Mode, Network};
use crate::tensor::Tensor;

pub const DEFAULT_RHO: f64 = 0.95;
pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_BATCH_SIZE: usize = 64;

/// Mean cross-entropy of `softmax(logits)` against one-hot targets, and its
/// gradient with respect to the logits.
pub fn softmax_crossentropy(logits: &Tensor, onehot: &Tensor) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.shape() != onehot.shape() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} and targets {:?} must both be [N, C]",
            logits.shape(),
            onehot.shape()
        )));
    }
    let [n, c] = [logits.shape()[0], logits.shape()[1]];
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut grad = vec![0.0; n * c];
    let mut loss = 0.0;
    for (i, (row, target)) in logits
        .data()
        .chunks(c)
        .zip(onehot.data().chunks(c))
        .enumerate()
    {
        let ones = target.iter().filter(|&&v| v == 1.0).count();
        let zeros = target.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != c {
            return Err(Error::InvalidOneHot(i));
        }
        let label = target.iter().position(|&v| v == 1.0).expect("one entry is 1");
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = sum.ln();
        loss += log_sum - (row[label] - max);
        let g = &mut grad[i * c..(i + 1) * c];
        for (j, (gj, &z)) in g.iter_mut().zip(row).enumerate() {
            let p = (z - max - log_sum).exp();
            *gj = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, Tensor::from_parts(vec![n, c], grad)))
}

/// Adadelta accumulators for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdadeltaState {
    pub rho: f64,
    pub epsilon: f64,
    sq_grad: Vec<f64>,
    sq_update: Vec<f64>,
}

impl AdadeltaState {
    pub fn new(len: usize, rho: f64, epsilon: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) || !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "adadelta needs rho in (0, 1) and epsilon > 0, got {rho} and {epsilon}"
            )));
        }
        Ok(Self {
            rho,
            epsilon,
            sq_grad: vec![0.0; len],
            sq_update: vec![0.0; len],
        })
    }

    /// Running mean of squared gradients.
    pub fn sq_grad(&self) -> &[f64] {
        &self.sq_grad
    }

    /// Running mean of squared updates.
    pub fn sq_update(&self) -> &[f64] {
        &self.sq_update
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut Tensor, grads: &Tensor) -> Result<()> {
        if params.shape() != grads.shape() || params.len() != self.sq_grad.len() {
            return Err(Error::ShapeMismatch(format!(
                "adadelta state of {} entries, params {:?}, grads {:?}",
                self.sq_grad.len(),
                params.shape(),
                grads.shape()
            )));
        }
        let (rho, eps) = (self.rho, self.epsilon);
        for (((p, &g), eg), ex) in params
            .data_mut()
            .iter_mut()
            .zip(grads.data())
            .zip(&mut self.sq_grad)
            .zip(&mut self.sq_update)
        {
            *eg = rho * *eg + (1.0 - rho) * g * g;
            let dx = -((*ex + eps).sqrt() / (*eg + eps).sqrt()) * g;
            *ex = rho * *ex + (1.0 - rho) * dx * dx;
            *p += dx;
        }
        params.ensure_finite("adadelta step")
    }
}

/// One pair of Adadelta states (weights, bias) per parametric layer.
#[derive(Debug, Clone)]
pub struct Optimizer {
    states: Vec<Option<(AdadeltaState, AdadeltaState)>>,
}

impl Optimizer {
    pub fn adadelta(net: &Network, rho: f64, epsilon: f64) -> Result<Self> {
        let states = net
            .layers
            .iter()
            .map(|l| {
                l.params()
                    .map(|(w, b)| {
                        Ok((
                            AdadeltaState::new(w.len(), rho, epsilon)?,
                            AdadeltaState::new(b.len(), rho, epsilon)?,
                        ))
                    })
                    .transpose()
            })
            .collect::<Result<_>>()?;
        Ok(Self { states })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: 1,
            seed: 0,
            shuffle: true,
        }
    }
}

/// One pass over the data in mini-batches; returns the mean batch loss.
///
/// The batch order of epoch `epoch` depends only on `cfg.seed` and `epoch`.
pub fn train_epoch(
    net: &mut Network,
    inputs: &Tensor,
    onehot: &Tensor,
    cfg: &TrainConfig,
    opt: &mut Optimizer,
    epoch: usize,
) -> Result<f64> {
    let n = inputs.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if onehot.shape().first() != Some(&n) {
        return Err(Error::ShapeMismatch(format!(
            "{n} inputs but targets {:?}",
            onehot.shape()
        )));
    }
    if cfg.batch_size == 0 || cfg.batch_size > n {
        return Err(Error::InvalidArgument(format!(
            "batch size {} must lie in 1..={n}",
            cfg.batch_size
        )));
    }
    if opt.states.len() != net.layers.len() {
        return Err(Error::InvalidArgument("optimizer was built for another network".into()));
    }

    let mut order: Vec<usize> = (0..n).collect();
    if cfg.shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
    }

    let mut total = 0.0;
    let mut batches = 0;
    for idx in order.chunks(cfg.batch_size) {
        let x = inputs.gather_outer(idx)?;
        let y = onehot.gather_outer(idx)?;
        let (logits, caches) = net.forward(&x, Mode::Train)?;
        let (loss, grad) = softmax_crossentropy(&logits, &y)?;
        let grads = net.backward(&caches, &grad)?;
        for ((layer, g), state) in net.layers.iter_mut().zip(grads).zip(&mut opt.states) {
            if let (Some((w, b)), Some(g), Some((sw, sb))) = (layer.params_mut(), g, state.as_mut()) {
                sw.step(w, &g.weights)?;
                sb.step(b, &g.bias)?;
            }
        }
        total += loss;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn evaluate_accuracy(net: &Network, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = inputs.shape().first().copied().unwrap_or(0);
    if n == 0 || labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{n} inputs but {} labels", labels.len())));
    }
    let predicted = predict_all(net, inputs)?;
    let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / n as f64)
}

/// Predicted classes for every sample, evaluated in chunks.
pub fn predict_all(net: &Network, inputs: &Tensor) -> Result<Vec<usize>> {
    const CHUNK: usize = 500;
    let n = inputs.shape().first().copied().unwrap_or(0);
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        out.extend(net.predict(&inputs.slice_outer(start, end)?)?);
        start = end;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    pub val_acc: Option<f64>,
}

impl std::fmt::Display for EpochReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "epoch,{},loss,{}", self.epoch, self.loss)?;
        match self.val_acc {
            Some(v) => write!(f, ",val_acc,{v}"),
            None => write!(f, ",val_acc,nan"),
        }
    }
}

/// Runs `cfg.epochs` epochs with a fresh Adadelta optimizer, reporting each
/// epoch (numbered from 1) to `on_epoch`.
pub fn fit(
    net: &mut Network,
    inputs: &Tensor,
    onehot: &Tensor,
    validation: Option<(&Tensor, &[usize])>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Vec<EpochReport>> {
    let mut opt = Optimizer::adadelta(net, DEFAULT_RHO, DEFAULT_EPSILON)?;
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let loss = train_epoch(net, inputs, onehot, cfg, &mut opt, epoch)?;
        let val_acc = validation
            .map(|(x, y)| evaluate_accuracy(net, x, y))
            .transpose()?;
        let report = EpochReport {
            epoch,
            loss,
            val_acc,
        };
        on_epoch(&report);
        reports.push(report);
    }
    Ok(reports)
}
