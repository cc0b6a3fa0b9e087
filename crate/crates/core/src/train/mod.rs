//! Quantization-aware training.
//!
//! Latent weights stay full precision and are updated by momentum SGD; the
//! forward and backward passes see the quantized weights and activations.
//! Step sizes are ordinary parameters: they receive momentum, no weight
//! decay, and are clamped to a small positive floor after every update.

mod loss;
mod optim;

pub use loss::{kd_loss, kd_loss_with_targets};
pub use optim::{cosine_lr, sgd_step, step_lr, Optimizer, Schedule};

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, Dataset};
use crate::error::{Error, Result};
use crate::nn::{config_hash, Checkpoint, Mode, QuantizedModel, FULL_PRECISION};
use crate::quant::GradScale;
use crate::report::{fmt_f64, Table};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Defaults to 1 for 8-bit models and 10 otherwise.
    pub epochs: Option<usize>,
    /// Defaults to 0.1 (full precision), 0.01 (2 to 4 bits) or 0.001 (8 bits).
    pub lr0: Option<f64>,
    pub momentum: f64,
    /// Weight decay at full precision, 8 and 4 bits; halved at 3 bits and
    /// quartered at 2 bits unless `weight_decay` is set.
    pub base_weight_decay: f64,
    pub weight_decay: Option<f64>,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub distill: bool,
    pub distill_weight: f64,
    pub temperature: f64,
    pub grad_scale: GradScale,
    /// Extra multiplier on every step size gradient scale.
    pub grad_scale_mult: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epochs: None,
            lr0: None,
            momentum: 0.9,
            base_weight_decay: 1e-4,
            weight_decay: None,
            batch_size: 64,
            seed: 0,
            schedule: Schedule::Cosine,
            distill: false,
            distill_weight: 0.5,
            temperature: 1.0,
            grad_scale: GradScale::CountLevels,
            grad_scale_mult: 1.0,
        }
    }
}

/// Hyperparameters after applying the precision-dependent defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Resolved {
    pub epochs: usize,
    pub lr0: f64,
    pub weight_decay: f64,
}

pub fn default_lr(precision: u32) -> f64 {
    match precision {
        FULL_PRECISION => 0.1,
        8 => 0.001,
        _ => 0.01,
    }
}

pub fn default_weight_decay(base: f64, precision: u32) -> f64 {
    match precision {
        3 => base / 2.0,
        2 => base / 4.0,
        _ => base,
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("lr0", self.lr0.unwrap_or(0.0)),
            ("momentum", self.momentum),
            ("base_weight_decay", self.base_weight_decay),
            ("weight_decay", self.weight_decay.unwrap_or(0.0)),
            ("grad_scale_mult", self.grad_scale_mult),
        ];
        if let Some((k, v)) = non_negative.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("trainer.{k} must be a non-negative number, got {v}")));
        }
        if self.epochs == Some(0) {
            return Err(Error::Config("trainer.epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("trainer.batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.distill_weight) {
            return Err(Error::Config("trainer.distill_weight must lie in [0, 1]".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("trainer.temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn resolve(&self, precision: u32) -> Result<Resolved> {
        self.validate()?;
        Ok(Resolved {
            epochs: self.epochs.unwrap_or(if precision == 8 { 1 } else { 10 }),
            lr0: self.lr0.unwrap_or_else(|| default_lr(precision)),
            weight_decay: self
                .weight_decay
                .unwrap_or_else(|| default_weight_decay(self.base_weight_decay, precision)),
        })
    }
}

/// One row per completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub top1: f64,
    pub top5: f64,
    /// `(weight step, activation step)` per layer, `None` if not quantized.
    pub steps: Vec<Option<(f64, f64)>>,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub config_hash: String,
    pub records: Vec<EpochRecord>,
}

impl Metrics {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.top1 >= r.top1 => Some(b),
                _ => Some(r),
            })
    }

    /// Columns: `epoch,lr,train_loss,top1,top5` then `s_w<i>,s_x<i>` for each
    /// quantized layer. Wall-clock time is left out so that identical runs
    /// produce identical files.
    pub fn table(&self) -> Table {
        let layers: Vec<usize> = self
            .records
            .first()
            .map(|r| (0..r.steps.len()).filter(|&i| r.steps[i].is_some()).collect())
            .unwrap_or_default();
        let mut columns: Vec<String> = ["epoch", "lr", "train_loss", "top1", "top5"].map(String::from).to_vec();
        for i in &layers {
            columns.push(format!("s_w{i}"));
            columns.push(format!("s_x{i}"));
        }
        let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
        let mut table = Table::new("metrics", &cols).with_meta("config", &self.config_hash);
        for r in &self.records {
            let mut row = vec![
                r.epoch.to_string(),
                fmt_f64(r.lr),
                fmt_f64(r.train_loss),
                fmt_f64(r.top1),
                fmt_f64(r.top5),
            ];
            for &i in &layers {
                let (w, x) = r.steps[i].unwrap_or((f64::NAN, f64::NAN));
                row.push(fmt_f64(w));
                row.push(fmt_f64(x));
            }
            table.push(row).expect("row width matches columns");
        }
        table
    }

    pub fn summary(&self) -> serde_json::Value {
        let best = self.best();
        serde_json::json!({
            "config_hash": self.config_hash,
            "epochs": self.records.len(),
            "final_top1": self.last().map(|r| r.top1),
            "final_top5": self.last().map(|r| r.top5),
            "best_epoch": best.map(|r| r.epoch),
            "best_top1": best.map(|r| r.top1),
            "wall_clock_s": self.records.iter().map(|r| r.wall_clock_s).sum::<f64>(),
            "records": self.records,
        })
    }
}

/// True iff `label` ranks among the `k` largest logits. Ties are broken
/// toward the lower class index: the rank of `label` counts the classes
/// with a larger logit plus the lower-indexed classes with an equal one.
pub fn in_top_k(logits: &[f64], label: usize, k: usize) -> bool {
    let z = logits[label];
    let rank = logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > z || (v == z && j < label))
        .count();
    rank < k
}

/// `(top1, top5)` accuracy in eval mode.
pub fn evaluate(model: &QuantizedModel, data: &Dataset) -> Result<(f64, f64)> {
    check_dims(model, data)?;
    let k = data.classes();
    let (mut top1, mut top5) = (0usize, 0usize);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(500) {
        let (x, labels) = data.batch(chunk)?;
        let logits = model.logits(&x)?;
        for (row, &y) in logits.data().chunks(k).zip(&labels) {
            top1 += in_top_k(row, y, 1) as usize;
            top5 += in_top_k(row, y, 5) as usize;
        }
    }
    let n = data.len() as f64;
    Ok((top1 as f64 / n, top5 as f64 / n))
}

fn check_dims(model: &QuantizedModel, data: &Dataset) -> Result<()> {
    let cfg = model.config();
    if cfg.input_len() != data.features() || cfg.classes != data.classes() {
        return Err(Error::Config(format!(
            "model expects {:?} inputs and {} classes; data has {:?} and {}",
            cfg.input,
            cfg.classes,
            data.dims(),
            data.classes()
        )));
    }
    Ok(())
}

/// Soft-target settings for a distillation step.
#[derive(Debug, Clone, Copy)]
pub struct Distill<'a> {
    pub teacher_logits: &'a Tensor,
    pub weight: f64,
    pub temperature: f64,
}

/// Training-mode forward and backward on one batch. Returns the loss and the
/// gradients in the order of [`QuantizedModel::params_mut`].
pub fn compute_gradients(
    model: &mut QuantizedModel,
    x: &Tensor,
    labels: &[usize],
    distill: Option<Distill<'_>>,
) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let out = model.forward(&tape, x, Mode::Train)?;
    let loss = match distill {
        Some(d) => kd_loss(out.logits, d.teacher_logits, labels, d.weight, d.temperature)?,
        None => out.logits.softmax_cross_entropy(labels)?,
    };
    let value = loss.item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {value}")));
    }
    tape.backward(loss)?;
    let grads = out
        .param_vars()
        .into_iter()
        .map(|v| match tape.grad(v) {
            Some(g) => Ok(g),
            None => Tensor::zeros(v.shape()),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((value, grads))
}

pub struct TrainOutcome {
    pub metrics: Metrics,
    /// Model state after the epoch with the highest top-1.
    pub best: QuantizedModel,
    pub optimizer: Optimizer,
    pub resolved: Resolved,
}

impl TrainOutcome {
    /// Checkpoint of `model` carrying the optimizer velocity.
    pub fn checkpoint(&self, model: &QuantizedModel, epoch: usize, meta: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(model.clone());
        ck.epoch = epoch;
        ck.meta = meta;
        for (i, v) in self.optimizer.velocity().iter().enumerate() {
            ck.extra.insert(format!("velocity.{i:03}"), v.clone());
        }
        ck
    }
}

/// Shuffled mini-batch SGD for the resolved number of epochs, evaluating
/// on `test` after each epoch. Distillation requires `teacher`.
pub fn train(
    model: &mut QuantizedModel,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &RunConfig,
    teacher: Option<&QuantizedModel>,
) -> Result<TrainOutcome> {
    let resolved = cfg.resolve(model.config().precision)?;
    check_dims(model, train_set)?;
    check_dims(model, test_set)?;
    let teacher = match (cfg.distill, teacher) {
        (true, None) => return Err(Error::Config("distillation needs a teacher model".into())),
        (true, Some(t)) => {
            check_dims(t, train_set)?;
            Some(t)
        }
        (false, _) => None,
    };
    model.set_grad_scale(cfg.grad_scale, cfg.grad_scale_mult)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = per_epoch * resolved.epochs;
    let mut optimizer = Optimizer::new(cfg.momentum, resolved.weight_decay);
    let mut metrics = Metrics {
        config_hash: config_hash(model.config()),
        records: Vec::new(),
    };
    let mut best: Option<(f64, QuantizedModel)> = None;
    let mut t = 0;
    for epoch in 0..resolved.epochs {
        let start = Instant::now();
        let (mut loss_sum, mut lr) = (0.0, resolved.lr0);
        for batch in epoch_batches(train_set.len(), cfg.batch_size, &mut rng) {
            let (x, labels) = train_set.batch(&batch)?;
            lr = cfg.schedule.lr(resolved.lr0, t, total, epoch, resolved.epochs)?;
            let teacher_logits = teacher.map(|m| m.logits(&x)).transpose()?;
            let distill = teacher_logits.as_ref().map(|z| Distill {
                teacher_logits: z,
                weight: cfg.distill_weight,
                temperature: cfg.temperature,
            });
            let (loss, grads) = compute_gradients(model, &x, &labels, distill)
                .map_err(|e| annotate(e, epoch, t))?;
            optimizer.step(model, &grads, lr).map_err(|e| annotate(e, epoch, t))?;
            loss_sum += loss * labels.len() as f64;
            t += 1;
        }
        let (top1, top5) = evaluate(model, test_set)?;
        log::info!("epoch {} lr {lr:.5} top1 {top1:.4}", epoch + 1);
        metrics.records.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            top1,
            top5,
            steps: model.step_sizes(),
            wall_clock_s: start.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(b, _)| top1 > *b) {
            best = Some((top1, model.clone()));
        }
    }
    let best = best.map(|(_, m)| m).expect("at least one epoch");
    Ok(TrainOutcome {
        metrics,
        best,
        optimizer,
        resolved,
    })
}

fn annotate(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("epoch {} step {step}: {msg}", epoch + 1)),
        other => other,
    }
}
