//! Minibatch SGD with step decay, L2 weight decay, early stopping on
//! validation accuracy, and per-epoch gradient norms of a fixed probe set.

use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::seq::{index, SliceRandom};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::importance::{gradient_norm, NormConfig};
use crate::nn::{GradientVector, Model};
use crate::rng::{rng_for, Stream};

const EVAL_CHUNK: usize = 256;
const PROBE_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    /// Epochs (0-based) from which one more decay factor applies.
    pub lr_decay_epochs: Vec<usize>,
    pub weight_decay: f64,
    /// Stop after this many epochs without a validation improvement; 0 never stops early.
    pub early_stop_patience: usize,
    pub seed: u64,
    pub probe_set_size: usize,
    pub probe_norm: NormConfig,
}

impl Default for TrainConfig {
    /// MNIST recipe: batch 64, lr 0.05 decayed ×0.1 at epoch 30, 50 epochs, λ = 1e-4.
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 50,
            base_lr: 0.05,
            lr_decay_factor: 0.1,
            lr_decay_epochs: vec![30],
            weight_decay: 1e-4,
            early_stop_patience: 10,
            seed: 0,
            probe_set_size: 512,
            probe_norm: NormConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config("lr_decay_factor must lie in (0, 1]".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("lr_decay_epochs must be sorted".into()));
        }
        Ok(())
    }
}

/// Step-decayed learning rate for a 0-based epoch.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    let decays = config.lr_decay_epochs.iter().filter(|&&d| d <= epoch).count();
    config.base_lr * config.lr_decay_factor.powi(decays as i32)
}

/// `p ← p − lr·(g + λ·p)` for every parameter.
pub fn sgd_step(model: &mut Model, grad: &GradientVector, lr: f64, weight_decay: f64) -> Result<()> {
    model.check_gradient(grad)?;
    if !grad.is_finite() {
        return Err(Error::Numeric("non-finite gradient; step aborted".into()));
    }
    model.apply_update(grad, lr, weight_decay);
    Ok(())
}

/// Class with the largest logit per example, ties to the lowest index.
pub fn predict(model: &Model, dataset: &Dataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(dataset.len());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, _) = dataset.batch(chunk)?;
        let logits = model.forward(&x)?;
        for r in 0..chunk.len() {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Top-1 accuracy.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::domain("cannot evaluate on an empty dataset"));
    }
    let hits = predict(model, dataset)?
        .iter()
        .zip(dataset.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / dataset.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Training-set indices of the probe examples.
    pub probe_indices: Vec<usize>,
    /// `probe_gradients[p][e]`: gradient norm of probe `p` after epoch `e`.
    pub probe_gradients: Vec<Vec<f64>>,
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn completed_epochs(&self) -> usize {
        self.epochs.len()
    }

    pub fn best_val_acc(&self) -> Option<f64> {
        self.epochs.get(self.best_epoch).and_then(|e| e.val_acc)
    }

    /// `epoch,train_loss,val_acc,lr`; `val_acc` is empty without a validation set.
    pub fn write_epochs_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,train_loss,val_acc,lr\n");
        for e in &self.epochs {
            let val = e.val_acc.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, val, e.lr));
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// `example_index,epoch,grad_norm`, rows grouped by probe then epoch.
    pub fn write_probe_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("example_index,epoch,grad_norm\n");
        for (idx, row) in self.probe_indices.iter().zip(&self.probe_gradients) {
            for (e, g) in row.iter().enumerate() {
                out.push_str(&format!("{idx},{e},{g}\n"));
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Rebuild the probe matrix from [`TrainLog::write_probe_csv`] output.
    /// Epoch records are not part of that file and come back empty.
    pub fn read_probe_csv(path: &Path) -> Result<TrainLog> {
        let mut reader = csv::Reader::from_path(path)?;
        if reader.headers()?.iter().collect::<Vec<_>>() != ["example_index", "epoch", "grad_norm"] {
            return Err(Error::Parse(format!(
                "{}: expected header example_index,epoch,grad_norm",
                path.display()
            )));
        }
        let mut probe_indices: Vec<usize> = Vec::new();
        let mut probe_gradients: Vec<Vec<f64>> = Vec::new();
        for (row, rec) in reader.records().enumerate() {
            let rec = rec?;
            let bad = || Error::Parse(format!("{}: bad row {}", path.display(), row + 1));
            let idx: usize = rec[0].parse().map_err(|_| bad())?;
            let epoch: usize = rec[1].parse().map_err(|_| bad())?;
            let g: f64 = rec[2].parse().map_err(|_| bad())?;
            if probe_indices.last() != Some(&idx) || epoch == 0 {
                probe_indices.push(idx);
                probe_gradients.push(Vec::new());
            }
            let current = probe_gradients.last_mut().expect("pushed above");
            if current.len() != epoch {
                return Err(Error::Parse(format!("{}: epochs out of order at row {}", path.display(), row + 1)));
            }
            current.push(g);
        }
        Ok(TrainLog {
            epochs: Vec::new(),
            probe_indices,
            probe_gradients,
            best_epoch: 0,
        })
    }
}

fn probe_norms(model: &Model, dataset: &Dataset, probes: &[usize], cfg: NormConfig) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(probes.len());
    for chunk in probes.chunks(PROBE_CHUNK) {
        let (x, y) = dataset.batch(chunk)?;
        for g in model.per_example_gradients(&x, &y)? {
            out.push(gradient_norm(&g, cfg)?);
        }
    }
    Ok(out)
}

/// Train `model` on `train_set`.
///
/// Each epoch visits a fresh permutation keyed by `(seed, epoch)`; the last
/// short batch is kept. With a non-empty `val_set` the returned parameters
/// are the snapshot with the best validation accuracy (earliest on ties);
/// otherwise the final parameters are returned.
pub fn train(mut model: Model, train_set: &Dataset, val_set: &Dataset, config: &TrainConfig) -> Result<(Model, TrainLog)> {
    if train_set.is_empty() {
        return Err(Error::domain("training set is empty"));
    }
    config.validate()?;
    let n = train_set.len();
    let mut probe_indices = index::sample(
        &mut rng_for(config.seed, Stream::Probe, 0),
        n,
        config.probe_set_size.min(n),
    )
    .into_vec();
    probe_indices.sort_unstable();

    let mut log = TrainLog {
        epochs: Vec::with_capacity(config.epochs),
        probe_gradients: vec![Vec::with_capacity(config.epochs); probe_indices.len()],
        probe_indices,
        best_epoch: 0,
    };
    let mut best: Option<(f64, Model)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        let lr = lr_at(config, epoch);
        order.sort_unstable();
        order.shuffle(&mut rng_for(config.seed, Stream::Shuffle, epoch as u64));
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (x, y) = train_set.batch(batch)?;
            let (loss, grad) = model.loss_and_gradient(&x, &y)?;
            sgd_step(&mut model, &grad, lr, config.weight_decay)?;
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / n as f64;
        let val_acc = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(&model, val_set)?)
        };
        if !log.probe_indices.is_empty() {
            let norms = probe_norms(&model, train_set, &log.probe_indices, config.probe_norm)?;
            for (row, g) in log.probe_gradients.iter_mut().zip(norms) {
                row.push(g);
            }
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_acc,
            lr,
        });
        debug!("epoch {epoch}: loss {train_loss:.6} val {val_acc:?} lr {lr}");

        match val_acc {
            Some(acc) if best.as_ref().is_none_or(|(b, _)| acc > *b) => {
                best = Some((acc, model.clone()));
                log.best_epoch = epoch;
                since_best = 0;
            }
            Some(_) => {
                since_best += 1;
                if config.early_stop_patience > 0 && since_best >= config.early_stop_patience {
                    info!("early stop after epoch {epoch}; best epoch {}", log.best_epoch);
                    break;
                }
            }
            None => log.best_epoch = epoch,
        }
    }
    let model = match best {
        Some((_, snapshot)) => snapshot,
        None => model,
    };
    Ok((model, log))
}
