//! Mini-batch training with full backpropagation through the unrolled
//! Euler and gate recurrences.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{accuracy, loss, mae, LossKind};
use super::optim::{Optimizer, OptimizerConfig};
use crate::autograd::{Gradients, Graph};
use crate::error::{invalid, Error, Result};
use crate::model::{save_checkpoint, AttentionTrace, FluidModel, ModelInput};
use crate::tensor::Tensor;

pub const CLIP_NORM: f64 = 1.0;

fn default_clip() -> f64 {
    CLIP_NORM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
}

impl TrainConfig {
    pub fn new(optimizer: OptimizerConfig, epochs: usize, batch_size: usize, loss: LossKind, seed: u64) -> Self {
        Self {
            optimizer,
            epochs,
            batch_size,
            loss,
            seed,
            clip_norm: CLIP_NORM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config(format!("clip_norm must be nonnegative, got {}", self.clip_norm)));
        }
        Ok(())
    }
}

/// One supervised example: history events, query times and targets.
#[derive(Debug, Clone)]
pub struct Sample {
    pub history: ModelInput,
    pub queries: ModelInput,
    /// `[B, T_q, output_dim]` for regression, `[B, T_q]` class indices otherwise.
    pub target: Tensor,
    /// `B·T_q` entries, false where the target is padding.
    pub target_mask: Vec<bool>,
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| invalid("cannot stack zero tensors"))?;
    let tail = &first.shape()[1..];
    let mut data = Vec::new();
    let mut rows = 0;
    for t in parts {
        if &t.shape()[1..] != tail {
            return Err(Error::ShapeMismatch {
                op: "collate",
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        rows += t.shape()[0];
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![rows];
    shape.extend_from_slice(tail);
    Tensor::new(&shape, data)
}

fn stack_input(parts: &[&ModelInput]) -> Result<ModelInput> {
    let values = stack(&parts.iter().map(|p| &p.values).collect::<Vec<_>>())?;
    let times = stack(&parts.iter().map(|p| &p.times).collect::<Vec<_>>())?;
    let mask = parts.iter().flat_map(|p| p.mask.iter().copied()).collect();
    ModelInput::new(values, times, mask)
}

/// Concatenates samples of equal padded lengths along the batch axis.
pub fn collate(samples: &[&Sample]) -> Result<Sample> {
    Ok(Sample {
        history: stack_input(&samples.iter().map(|s| &s.history).collect::<Vec<_>>())?,
        queries: stack_input(&samples.iter().map(|s| &s.queries).collect::<Vec<_>>())?,
        target: stack(&samples.iter().map(|s| &s.target).collect::<Vec<_>>())?,
        target_mask: samples.iter().flat_map(|s| s.target_mask.iter().copied()).collect(),
    })
}

/// Rescales `grads` in place so that their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_metric: f64,
}

/// Gate summaries of every head for one batch, as JSON lines.
pub fn gate_diagnostics(model: &FluidModel, batch: &Sample) -> String {
    let g = Graph::no_grad();
    let mut trace: Vec<AttentionTrace> = Vec::new();
    if let Err(e) = model
        .net
        .forward(&g, &model.params, &batch.history, &batch.queries, Some(&mut trace))
    {
        return format!("forward failed while tracing: {e}");
    }
    let mut out = String::new();
    for layer in &trace {
        for (h, head) in layer.heads.iter().enumerate() {
            let summary = head
                .trajectory
                .as_ref()
                .map(|t| serde_json::to_string(&t.summary()).unwrap_or_default())
                .unwrap_or_else(|| "null".into());
            out.push_str(&format!("{} head {h}: {summary}\n", layer.layer));
        }
    }
    out
}

/// Validation metric, lower is better: MAE for regression losses and the
/// error rate for cross-entropy.
pub fn evaluate(model: &FluidModel, samples: &[Sample], kind: LossKind, batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("cannot evaluate on an empty dataset"));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in samples.chunks(batch_size.max(1)) {
        let b = collate(&chunk.iter().collect::<Vec<_>>())?;
        let pred = model.predict(&b.history, &b.queries)?;
        let n = b.target_mask.iter().filter(|&&m| m).count();
        if n == 0 {
            continue;
        }
        let m = match kind {
            LossKind::CrossEntropy => 1.0 - accuracy(&pred, &b.target, Some(&b.target_mask))?,
            _ => mae(&pred, &b.target, Some(&b.target_mask))?,
        };
        total += m * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(invalid("validation targets are fully masked"));
    }
    Ok(total / count as f64)
}

/// Trains `model` in place. The best validation metric (train loss when
/// `val` is empty) selects the checkpoint written to `checkpoint`.
pub fn train(
    model: &mut FluidModel,
    train_set: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport {
        history: Vec::with_capacity(cfg.epochs),
        best_epoch: None,
        best_metric: f64::INFINITY,
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = collate(&idx.iter().map(|&i| &train_set[i]).collect::<Vec<_>>())?;
            let g = Graph::new();
            let pred = model.forward(&g, &batch.history, &batch.queries)?;
            let l = loss(cfg.loss, &pred, &batch.target, Some(&batch.target_mask))?;
            let value = l.value().item();
            let mut grads = g.backward(&l)?;
            let norm = grads.global_norm();
            if !value.is_finite() || !norm.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    diagnostics: format!("loss {value}, gradient norm {norm}\n{}", gate_diagnostics(model, &batch)),
                });
            }
            drop(pred);
            drop(l);
            drop(g);
            clip_gradients(&mut grads, cfg.clip_norm);
            opt.step(&mut model.params, &grads);
            epoch_loss += value;
            batches += 1;
        }
        let train_loss = epoch_loss / batches as f64;
        let val_metric = if val.is_empty() {
            train_loss
        } else {
            evaluate(model, val, cfg.loss, cfg.batch_size)?
        };
        report.history.push(EpochRecord {
            epoch,
            train_loss,
            val_metric,
        });
        if val_metric < report.best_metric {
            report.best_metric = val_metric;
            report.best_epoch = Some(epoch);
            if let Some(path) = checkpoint {
                save_checkpoint(model, path)?;
            }
        }
    }
    Ok(report)
}

/// Writes the history as CSV with columns `epoch, train_loss, val_metric`.
pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if history.is_empty() {
        w.write_record(["epoch", "train_loss", "val_metric"])?;
    }
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
