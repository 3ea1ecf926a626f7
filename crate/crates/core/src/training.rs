//! Mini-batch Adam training with early stopping on validation accuracy.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Graph, Tensor};
use crate::error::{Error, Result};
use crate::evalharness;
use crate::models::Model;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Share of the training rows held out for early stopping.
    pub val_fraction: f64,
    /// Fit log1p + standardization on the training rows.
    pub normalize: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            dropout: 0.4,
            batch_size: 32,
            max_epochs: 128,
            patience: 16,
            val_fraction: 0.1,
            normalize: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: format!("train.{key}"),
                message: message.into(),
            })
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be positive");
        }
        if self.patience == 0 || self.patience >= self.max_epochs {
            return bad("patience", "must be positive and below max_epochs");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction", "must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub stopped_early: bool,
}

/// Rows `idx` of `x`.
pub fn gather(x: &Tensor, idx: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * x.cols);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::new(idx.len(), x.cols, data)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64
}

/// Stratified holdout of about `fraction` of `idx` (one fold of a
/// `round(1 / fraction)`-fold split). Returns `(train, val)`; `val` is empty
/// when `fraction` is zero or there are too few rows.
pub fn holdout_split(idx: &[usize], labels: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    if fraction <= 0.0 {
        return (idx.to_vec(), Vec::new());
    }
    let k = (1.0 / fraction).round().max(2.0) as usize;
    let sub: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    let Ok(plan) = evalharness::kfold_split(&sub, k, seed) else {
        return (idx.to_vec(), Vec::new());
    };
    let mut is_val = vec![false; idx.len()];
    for &j in &plan.folds[0] {
        is_val[j] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (j, &i) in idx.iter().enumerate() {
        if is_val[j] {
            val.push(i)
        } else {
            train.push(i)
        }
    }
    (train, val)
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { node, op } => {
            Error::Diverged(format!("epoch {epoch}: non-finite value at node {node} ({op})"))
        }
        Error::Diverged(m) => Error::Diverged(format!("epoch {epoch}: {m}")),
        other => other,
    }
}

/// Trains `model` on rows `train_idx` (duplicates allowed, e.g. after
/// oversampling), monitoring accuracy on `val_idx`. With an empty `val_idx`
/// the training rows are monitored instead.
///
/// On a non-finite loss or gradient the error is returned and the model
/// keeps its last finite weights.
pub fn train(
    model: &mut Model,
    x: &Tensor,
    y: &[usize],
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= model.arch.n_classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range")));
    }
    if cfg.normalize {
        let mut uniq = train_idx.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        model.fit_normalization(x, &uniq);
    }
    let monitor = if val_idx.is_empty() { train_idx } else { val_idx };
    let xm = gather(x, monitor);
    let ym: Vec<usize> = monitor.iter().map(|&i| y[i]).collect();

    let mut adam = Adam::new(&model.params, cfg.lr);
    let mut order = train_idx.to_vec();
    let mut hist = History {
        best_val_acc: f64::NEG_INFINITY,
        ..History::default()
    };
    let mut best_params = model.params.clone();
    for epoch in 1..=cfg.max_epochs {
        let mut rng = seed::rng(cfg.seed, &[seed::tag("shuffle"), epoch as u64]);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xb = gather(x, chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let gseed = seed::derive(cfg.seed, &[seed::tag("dropout"), epoch as u64, b as u64]);
            let mut g = Graph::new(true, gseed);
            let step = (|| {
                let xi = g.input(xb)?;
                let f = model.forward(&mut g, xi, cfg.dropout)?;
                let l = model.loss(&mut g, &f, &yb)?;
                let grads = g.backward(l)?;
                Ok::<_, Error>((g.value(l).item(), g.param_grads(&grads, &model.params)))
            })();
            let (loss, pg) = step.map_err(|e| diverged(epoch, e))?;
            adam.update(&mut model.params, &pg).map_err(|e| diverged(epoch, e))?;
            loss_sum += loss * chunk.len() as f64;
        }
        let val_acc = accuracy(&model.predict(&xm).map_err(|e| diverged(epoch, e))?, &ym);
        hist.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_acc,
        });
        if val_acc > hist.best_val_acc {
            hist.best_val_acc = val_acc;
            hist.best_epoch = epoch;
            best_params = model.params.clone();
        } else if epoch - hist.best_epoch >= cfg.patience {
            hist.stopped_early = true;
            break;
        }
    }
    model.params = best_params;
    Ok(hist)
}

pub fn write_history_csv(path: &Path, hist: &History) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    writeln!(w, "epoch,train_loss,val_acc").map_err(io)?;
    for r in &hist.records {
        writeln!(w, "{},{},{}", r.epoch, r.train_loss, r.val_acc).map_err(io)?;
    }
    w.flush().map_err(io)
}
