//! Deterministic training harness: Adam over real coordinates, micro-averaged
//! average precision, per-epoch metrics and best-validation checkpointing.
//!
//! Reproducibility contract: given the same model seed, data and
//! [`TrainConfig`], a run produces byte-identical metrics and checkpoints.
//! Samples inside a batch are processed in parallel, but every sample owns a
//! derived random stream and gradients are merged in batch-index order, so
//! the worker count never changes the result.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::autodiff::{Grads, ParamStore, Tape};
use crate::error::{CvError, Result};
use crate::model::{Mode, Model};
use crate::rngs;
use crate::scalar::Scalar;
use crate::tasks::Sample;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CvError::Config {
                key: "batch_size".into(),
                message: "batches need at least one sample".into(),
            });
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CvError::Config {
                key: "lr".into(),
                message: format!("{} is not a positive learning rate", self.lr),
            });
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(CvError::Config {
                    key: k.into(),
                    message: format!("{v} outside [0, 1)"),
                });
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(CvError::Config {
                key: "adam_eps".into(),
                message: "eps must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Adam over the real coordinates of the parameter store: each re (and, for
/// complex parameters, im) entry gets its own first/second moment. Moments
/// and updates are computed in f64 regardless of the model precision.
#[derive(Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Scalar>(cfg: &TrainConfig, store: &ParamStore<T>) -> Self {
        let mut m = Vec::with_capacity(store.len());
        for (_, p) in store.iter() {
            let coords = p.value.len() * if p.is_real { 1 } else { 2 };
            m.push(vec![0.0; coords]);
        }
        let v = m.clone();
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m,
            v,
        }
    }

    /// Apply one update from the gradients currently held in the store.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, (_, p)) in store.iter_mut().enumerate() {
            let n = p.value.len();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..n {
                let g = p.grad.re()[i].to_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let upd = self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p.value.re_mut()[i] = T::from_f64(p.value.re()[i].to_f64() - upd);
            }
            if p.is_real {
                continue;
            }
            for i in 0..n {
                let g = p.grad.im()[i].to_f64();
                m[n + i] = self.beta1 * m[n + i] + (1.0 - self.beta1) * g;
                v[n + i] = self.beta2 * v[n + i] + (1.0 - self.beta2) * g * g;
                let upd = self.lr * (m[n + i] / bc1) / ((v[n + i] / bc2).sqrt() + self.eps);
                p.value.im_mut()[i] = T::from_f64(p.value.im()[i].to_f64() - upd);
            }
        }
    }
}

/// Micro-averaged average precision over a flat score/target pool. Targets
/// must be exactly 0 or 1; scores may be any monotone confidence (logits are
/// fine). Sorting is stable, so tied scores keep their original order.
pub fn micro_average_precision(scores: &[f64], targets: &[f64]) -> Result<f64> {
    if scores.len() != targets.len() {
        return Err(CvError::ShapeMismatch {
            context: "average precision",
            expected: format!("{}", scores.len()),
            got: format!("{}", targets.len()),
        });
    }
    for &t in targets {
        if t != 0.0 && t != 1.0 {
            return Err(CvError::InvalidArgument(format!(
                "average precision target {t} is not 0 or 1"
            )));
        }
    }
    let n_pos = targets.iter().filter(|&&t| t == 1.0).count();
    if n_pos == 0 {
        return Err(CvError::InvalidArgument(
            "average precision is undefined without positives".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut hits = 0usize;
    let mut ap = 0.0f64;
    for (rank0, &i) in order.iter().enumerate() {
        if targets[i] == 1.0 {
            hits += 1;
            ap += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(ap / n_pos as f64)
}

/// One metrics line; [`write_metrics_csv`] renders `epoch,split,loss,micro_ap`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub micro_ap: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from("epoch,split,loss,micro_ap\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.split, r.loss, r.micro_ap));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalKind {
    /// Score every position with the true earlier labels in the decoder
    /// (plain forward pass for classification models).
    TeacherForced,
    /// Decode step by step, feeding back the model's own hard labels.
    /// Only meaningful for sequence models.
    Autoregressive,
}

/// The deployment-mode evaluation kind: sequence models are scored by how
/// they decode on their own, classification models by a forward pass.
pub fn eval_kind(sequence: bool) -> EvalKind {
    if sequence {
        EvalKind::Autoregressive
    } else {
        EvalKind::TeacherForced
    }
}

/// Mean loss and micro-averaged AP of a model over a split.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample<T>],
    kind: EvalKind,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(CvError::InvalidArgument("cannot evaluate an empty split".into()));
    }
    let sequence = model.cfg().seq_out > 0;
    if kind == EvalKind::Autoregressive && !sequence {
        return Err(CvError::InvalidArgument(
            "autoregressive evaluation needs a sequence model".into(),
        ));
    }
    let per: Vec<Result<(f64, Vec<f64>)>> = samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let logits = match kind {
                EvalKind::TeacherForced => {
                    if sequence {
                        model.sequence_logits(&mut tape, &s.tokens, &s.labels, &mut Mode::Eval)?
                    } else {
                        model.classify_logits(&mut tape, &s.tokens, &mut Mode::Eval)?
                    }
                }
                EvalKind::Autoregressive => {
                    let (logits, _hard) = model.generate(&s.tokens)?;
                    tape.leaf(logits)
                }
            };
            let loss = tape.bce_with_logits(logits, Arc::new(s.labels.clone()))?;
            let scores = tape.value(logits).re().iter().map(|&v| v.to_f64()).collect();
            Ok((tape.scalar(loss).to_f64(), scores))
        })
        .collect();
    let mut loss_sum = 0.0;
    let mut scores = Vec::new();
    let mut targets = Vec::new();
    for (s, r) in samples.iter().zip(per) {
        let (loss, sc) = r?;
        loss_sum += loss;
        scores.extend(sc);
        targets.extend(s.labels.re().iter().map(|&v| v.to_f64()));
    }
    let loss = loss_sum / samples.len() as f64;
    let ap = micro_average_precision(&scores, &targets)?;
    Ok((loss, ap))
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Train and val rows for every completed epoch, in epoch order. Val rows
    /// are scored in deployment mode (see [`eval_kind`]), like the test row.
    pub history: Vec<MetricsRow>,
    /// Test metrics of the checkpointed model; sequence models are scored
    /// autoregressively, classification models with a plain forward pass.
    pub test: MetricsRow,
    /// Epoch whose validation AP won (0 when no epoch ran).
    pub best_epoch: usize,
}

/// Train a model, keeping the checkpoint of the best-validation-AP epoch at
/// `checkpoint` and returning per-epoch metrics plus the final test score of
/// that checkpoint. A non-finite training or validation loss aborts with
/// [`CvError::Diverged`].
pub fn train_loop<T: Scalar>(
    model: &mut Model<T>,
    data: &crate::tasks::Splits<T>,
    cfg: &TrainConfig,
    checkpoint: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    for (name, split) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        if split.is_empty() {
            return Err(CvError::InvalidArgument(format!("{name} split is empty")));
        }
    }
    let sequence = model.cfg().seq_out > 0;
    let mut adam = Adam::new(cfg, &model.store);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    // the initial parameters stand in as "best" until an epoch completes
    model.save(checkpoint)?;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rngs::stream(cfg.seed, &format!("shuffle/{epoch}")));

        let mut loss_sum = 0.0;
        let mut scores = Vec::new();
        let mut targets = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            model.store.zero_grads();
            let shared: &Model<T> = model;
            let results: Vec<Result<(Tape<T>, Grads<T>, f64, Vec<f64>)>> = batch
                .par_iter()
                .map(|&idx| {
                    let sample = &data.train[idx];
                    let mut rng = rngs::stream(cfg.seed, &format!("dropout/{epoch}/{idx}"));
                    let mut tape = Tape::new();
                    let mut mode = Mode::Train(&mut rng);
                    let logits = if sequence {
                        shared.sequence_logits(&mut tape, &sample.tokens, &sample.labels, &mut mode)?
                    } else {
                        shared.classify_logits(&mut tape, &sample.tokens, &mut mode)?
                    };
                    let loss = tape.bce_with_logits(logits, Arc::new(sample.labels.clone()))?;
                    let grads = tape.backward(loss)?;
                    let lv = tape.scalar(loss).to_f64();
                    let sc = tape.value(logits).re().iter().map(|&v| v.to_f64()).collect();
                    Ok((tape, grads, lv, sc))
                })
                .collect();

            let mut batch_loss = 0.0;
            for (&idx, r) in batch.iter().zip(results) {
                let (tape, grads, lv, sc) = r?;
                tape.merge_param_grads(&grads, &mut model.store);
                batch_loss += lv;
                scores.extend(sc);
                targets.extend(data.train[idx].labels.re().iter().map(|&v| v.to_f64()));
            }
            loss_sum += batch_loss;
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(CvError::Diverged {
                    epoch,
                    detail: format!("batch loss {batch_loss}"),
                });
            }
            let inv = T::from_f64(1.0 / batch.len() as f64);
            for (_, p) in model.store.iter_mut() {
                for g in p.grad.re_mut() {
                    *g *= inv;
                }
                for g in p.grad.im_mut() {
                    *g *= inv;
                }
            }
            adam.step(&mut model.store);
            for (_, p) in model.store.iter() {
                let finite = p.value.re().iter().all(|v| v.is_finite())
                    && (p.is_real || p.value.im().iter().all(|v| v.is_finite()));
                if !finite {
                    return Err(CvError::Diverged {
                        epoch,
                        detail: format!("parameter {} became non-finite", p.name),
                    });
                }
            }
        }

        let train_loss = loss_sum / data.train.len() as f64;
        let train_ap = micro_average_precision(&scores, &targets)?;
        history.push(MetricsRow {
            epoch,
            split: "train",
            loss: train_loss,
            micro_ap: train_ap,
        });

        // validate in deployment mode: sequence models decode autoregressively,
        // so checkpoint selection optimizes the metric the test run reports
        let (val_loss, val_ap) = evaluate(model, &data.val, eval_kind(sequence))?;
        if !val_loss.is_finite() {
            return Err(CvError::Diverged {
                epoch,
                detail: format!("validation loss {val_loss}"),
            });
        }
        history.push(MetricsRow {
            epoch,
            split: "val",
            loss: val_loss,
            micro_ap: val_ap,
        });
        if best.map_or(true, |(b, _)| val_ap > b) {
            best = Some((val_ap, epoch));
            model.save(checkpoint)?;
        }
    }

    let best_epoch = best.map_or(0, |(_, e)| e);
    // score the checkpointed parameters, not the last epoch's
    model.load(checkpoint)?;
    let (test_loss, test_ap) = evaluate(model, &data.test, eval_kind(sequence))?;
    Ok(TrainOutcome {
        history,
        test: MetricsRow {
            epoch: best_epoch,
            split: "test",
            loss: test_loss,
            micro_ap: test_ap,
        },
        best_epoch,
    })
}
