//! Mini-batch AdamW training with gradient accumulation, a linear learning
//! rate schedule and early stopping on validation loss.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use super::params::Grads;
use super::tensor::Scalar;
use super::transformer::TrainExample;
use super::Model;
use crate::error::{Error, Result};
use crate::seed::rng_from;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 16,
            grad_accum: 1,
            lr: 1e-3,
            weight_decay: 0.01,
            patience: 10,
            max_grad_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::InvalidConfig(
                "epochs, batch_size and grad_accum must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    /// Optimizer steps over the whole run for `n` training examples.
    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size).div_ceil(self.grad_accum)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose weights the model holds after training.
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
    pub optimizer_steps: usize,
}

/// Token-weighted mean NLL over `examples`.
pub fn evaluate_loss<S: Scalar>(model: &Model<S>, examples: &[TrainExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no examples to evaluate".into()));
    }
    let parts = examples
        .par_iter()
        .map(|ex| model.example_loss(ex))
        .collect::<Result<Vec<_>>>()?;
    let (sum, n) = parts.iter().fold((0.0, 0usize), |(s, n), (l, c)| (s + l, n + c));
    Ok(sum / n as f64)
}

fn add_grads<S: Scalar>(acc: &mut Grads<S>, other: &Grads<S>) {
    for (a, b) in acc.g.iter_mut().zip(&other.g) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += *y;
        }
    }
}

fn clip<S: Scalar>(grads: &mut Grads<S>, max_norm: f64) {
    let norm = grads.g.iter().flatten().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        grads.scale(S::c(max_norm / norm));
    }
}

fn snapshot<S: Scalar>(model: &Model<S>) -> Vec<Option<Vec<S>>> {
    model
        .store
        .iter()
        .map(|(_, p)| p.trainable.then(|| p.data.clone()))
        .collect()
}

fn restore<S: Scalar>(model: &mut Model<S>, snap: Vec<Option<Vec<S>>>) {
    for (p, data) in model.store.iter_mut().zip(snap) {
        if let Some(data) = data {
            p.data = data;
        }
    }
}

/// Trains the trainable tensors of `model` in place. With a validation set
/// the model ends on the best-validation epoch; otherwise on the last one.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    train: &[TrainExample],
    val: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let total_steps = cfg.total_steps(train.len()) as f64;
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let mut step = 0usize;
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Vec<Option<Vec<S>>>)> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;
    let mut lr = cfg.lr;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_from(cfg.seed, &format!("shuffle-{epoch}")));
        let mut acc = Grads::for_store(&model.store);
        let mut pending = 0usize;
        let (mut nll_sum, mut nll_count) = (0.0, 0usize);
        let n_micro = order.len().div_ceil(cfg.batch_size);

        for (mi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let tokens: usize = chunk.iter().map(|&i| train[i].target_count()).sum();
            let weight = 1.0 / tokens as f64;
            let m: &Model<S> = model;
            let parts = chunk
                .par_iter()
                .map(|&i| {
                    let mut rng = rng_from(cfg.seed, &format!("dropout-{epoch}-{i}"));
                    let mut g = Grads::for_store(&m.store);
                    let (l, c) = m.example_loss_grad(&train[i], weight, Some(&mut rng), &mut g)?;
                    Ok((g, l, c))
                })
                .collect::<Result<Vec<_>>>()?;
            for (g, l, c) in &parts {
                add_grads(&mut acc, g);
                nll_sum += l;
                nll_count += c;
            }
            pending += 1;
            if pending == cfg.grad_accum || mi + 1 == n_micro {
                acc.scale(S::c(1.0 / pending as f64));
                if !acc.is_finite() {
                    return Err(Error::Diverged {
                        epoch: epoch + 1,
                        step,
                        detail: "non-finite gradient".into(),
                    });
                }
                if let Some(max) = cfg.max_grad_norm {
                    clip(&mut acc, max);
                }
                lr = cfg.lr * (1.0 - step as f64 / total_steps);
                opt.step(&mut model.store, &acc, lr);
                step += 1;
                acc.zero();
                pending = 0;
            }
        }

        let train_loss = nll_sum / nll_count as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch: epoch + 1,
                step,
                detail: format!("training loss {train_loss}"),
            });
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(evaluate_loss(model, val)?)
        };
        log::info!(
            "epoch {} train_loss {:.4} val_loss {} lr {:.2e}",
            epoch + 1,
            train_loss,
            val_loss.map_or("-".to_string(), |v| format!("{v:.4}")),
            lr
        );
        history.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            val_loss,
            lr,
        });
        if let Some(v) = val_loss {
            if !v.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    step,
                    detail: format!("validation loss {v}"),
                });
            }
            if best.as_ref().is_none_or(|(_, b, _)| v < *b) {
                best = Some((epoch + 1, v, snapshot(model)));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let (best_epoch, best_val_loss) = match best {
        Some((e, v, snap)) => {
            restore(model, snap);
            (e, Some(v))
        }
        None => (history.len(), None),
    };
    Ok(TrainReport {
        history,
        best_epoch,
        best_val_loss,
        stopped_early,
        optimizer_steps: step,
    })
}
