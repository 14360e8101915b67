//! SGD with momentum and weight decay, a stepped learning-rate schedule,
//! evaluation, and exact checkpoint/resume.

pub mod checkpoint;
pub mod metrics;

use std::time::Instant;

use crate::autograd::{ParamId, ParamStore, Tape};
use crate::data::{Batches, Dataset, NormStats, Split};
use crate::error::{invalid, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{softmax_cross_entropy, Mode};
use crate::rng::{self, Purpose};
use crate::tensor::{Element, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, TensorKind, FORMAT_VERSION};
pub use metrics::{metrics_csv, read_metrics_csv, write_metrics_csv, MetricsRow, CSV_HEADER};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Zero-based epochs at which the learning rate is multiplied by
    /// `lr_drop_factor`.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Random crop and flip on training batches.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 128,
            base_lr: 0.1,
            lr_drop_epochs: vec![150, 225],
            lr_drop_factor: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    /// The default recipe compressed to `epochs`, with the drops kept at the
    /// same fractions (one half and three quarters) of the run.
    pub fn scaled(epochs: usize) -> Self {
        let mut drops = vec![epochs / 2, epochs * 3 / 4];
        drops.retain(|&d| d > 0 && d < epochs);
        drops.dedup();
        TrainConfig {
            epochs,
            lr_drop_epochs: drops,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch size must be positive"));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(invalid(format!("learning rate {} must be positive", self.base_lr)));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return Err(invalid(format!(
                "drop factor {} must lie in (0, 1]",
                self.lr_drop_factor
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid(format!(
                "drop epochs {:?} must be strictly increasing",
                self.lr_drop_epochs
            )));
        }
        if let Some(&last) = self.lr_drop_epochs.last() {
            if last >= self.epochs {
                return Err(invalid(format!(
                    "drop epoch {last} is not below {} epochs",
                    self.epochs
                )));
            }
        }
        Ok(())
    }
}

/// `base_lr * factor^k` where `k` counts the drop epochs `<= epoch`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(invalid(format!("epoch {epoch} is outside 0..{}", cfg.epochs)));
    }
    let drops = cfg.lr_drop_epochs.iter().filter(|&&d| d <= epoch).count();
    Ok(cfg.base_lr * cfg.lr_drop_factor.powi(drops as i32))
}

/// One momentum buffer per learnable parameter, zero at the start.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        OptimizerState {
            velocity: params
                .iter()
                .map(|(_, v)| v.requires_grad.then(|| Tensor::zeros(v.value.shape())))
                .collect(),
        }
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.velocity.get(id.index()).and_then(Option::as_ref)
    }

    /// Buffers of the learnable parameters in declaration order.
    pub fn buffers(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.velocity.iter().flatten()
    }
}

/// `g = grad + wd * w; v = momentum * v + g; w -= lr * v` for every
/// learnable parameter, batch-norm affine terms included.
pub fn sgd_step<T: Element>(
    params: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if state.velocity.len() != params.len() {
        return Err(invalid(format!(
            "optimizer tracks {} tensors, store has {}",
            state.velocity.len(),
            params.len()
        )));
    }
    let lr = T::from_f64_lossy(lr);
    let momentum = T::from_f64_lossy(cfg.momentum);
    let wd = T::from_f64_lossy(cfg.weight_decay);
    for (var, slot) in params.iter_mut().zip(state.velocity.iter_mut()) {
        if !var.requires_grad {
            continue;
        }
        let grad = var
            .grad
            .as_ref()
            .ok_or_else(|| Error::MissingGradient(var.name.clone()))?;
        let v = slot.get_or_insert_with(|| Tensor::zeros(var.value.shape()));
        if v.shape() != var.value.shape() || grad.shape() != var.value.shape() {
            return Err(Error::ShapeMismatch {
                left: var.value.shape(),
                right: v.shape(),
            });
        }
        for ((w, v), &g) in var.value.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
            let g = g + wd * *w;
            *v = momentum * *v + g;
            *w = *w - lr * *v;
        }
    }
    Ok(())
}

/// Index of the largest logit per row; ties go to the lower class.
pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape().sample_len();
    logits
        .data()
        .chunks(k.max(1))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, row[0]), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    /// Percent.
    pub accuracy: f64,
}

/// One shuffled pass over `split` in train mode. Loss and accuracy are
/// example-weighted means over the pass, measured on the training forward.
pub fn train_epoch(
    model: &mut Model<f32>,
    split: &Split,
    stats: &NormStats,
    state: &mut OptimizerState<f32>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    if split.is_empty() {
        return Err(invalid("training split is empty"));
    }
    let lr = lr_at_epoch(cfg, epoch)?;
    let mut tape = Tape::new();
    let (mut loss_sum, mut correct) = (0.0f64, 0usize);
    for (index, batch) in Batches::new(split, *stats, cfg.batch_size, cfg.seed, epoch, true, cfg.augment).enumerate() {
        tape.reset();
        let x = tape.input(batch.images, false);
        let logits = model.forward(&mut tape, x, Mode::Train)?;
        correct += argmax_rows(tape.value(logits))
            .iter()
            .zip(&batch.labels)
            .filter(|(p, l)| p == l)
            .count();
        let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
        let value = tape.value(loss).item().expect("scalar loss") as f64;
        if !value.is_finite() {
            return Err(Error::Diverged { epoch, batch: index });
        }
        let grads = tape.backward(loss)?;
        model.params.zero_grads();
        model.params.accumulate(&grads)?;
        sgd_step(&mut model.params, state, lr, cfg)?;
        loss_sum += value * batch.labels.len() as f64;
    }
    let n = split.len() as f64;
    Ok(EpochStats {
        loss: loss_sum / n,
        accuracy: 100.0 * correct as f64 / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    pub loss: f64,
    /// Percent misclassified under the argmax rule.
    pub error: f64,
}

/// Eval-mode pass without augmentation; consumes no randomness and leaves
/// running statistics untouched.
pub fn evaluate(model: &mut Model<f32>, split: &Split, stats: &NormStats, batch_size: usize) -> Result<EvalStats> {
    if split.is_empty() {
        return Err(invalid("evaluation split is empty"));
    }
    let (mut loss_sum, mut wrong) = (0.0f64, 0usize);
    for batch in Batches::new(split, *stats, batch_size, 0, 0, false, false) {
        let logits = model.predict(&batch.images, Mode::Eval)?;
        loss_sum += softmax_cross_entropy(&logits, &batch.labels)? as f64 * batch.labels.len() as f64;
        wrong += argmax_rows(&logits)
            .iter()
            .zip(&batch.labels)
            .filter(|(p, l)| p != l)
            .count();
    }
    let n = split.len() as f64;
    Ok(EvalStats {
        loss: loss_sum / n,
        error: 100.0 * wrong as f64 / n,
    })
}

/// A training run in progress: model, optimizer, position and history.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub optimizer: OptimizerState<f32>,
    pub config: TrainConfig,
    pub stats: NormStats,
    pub next_epoch: usize,
    pub history: Vec<MetricsRow>,
}

impl Trainer {
    /// Fresh run; weights are drawn from the seed's initialization stream.
    pub fn new(model_config: ModelConfig, config: TrainConfig, stats: NormStats) -> Result<Self> {
        config.validate()?;
        stats.check()?;
        let model = Model::build(model_config, &mut rng::derive(config.seed, Purpose::Init, 0, 0))?;
        let optimizer = OptimizerState::new(&model.params);
        Ok(Trainer {
            model,
            optimizer,
            config,
            stats,
            next_epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn is_finished(&self) -> bool {
        self.next_epoch >= self.config.epochs
    }

    /// Trains one epoch, evaluates on the test split and records the row.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<MetricsRow> {
        if self.is_finished() {
            return Err(invalid(format!("all {} epochs already ran", self.config.epochs)));
        }
        let epoch = self.next_epoch;
        let start = Instant::now();
        let train = train_epoch(
            &mut self.model,
            &data.train,
            &self.stats,
            &mut self.optimizer,
            &self.config,
            epoch,
        )?;
        let test = evaluate(&mut self.model, &data.test, &self.stats, self.config.batch_size)?;
        let before = self.history.last().map_or(0.0, |r| r.wall_sec);
        let row = MetricsRow {
            epoch,
            lr: lr_at_epoch(&self.config, epoch)?,
            train_loss: train.loss,
            train_acc: train.accuracy,
            test_loss: test.loss,
            test_err: test.error,
            wall_sec: before + start.elapsed().as_secs_f64(),
        };
        self.history.push(row);
        self.next_epoch += 1;
        Ok(row)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<NamedTensor> = self
            .model
            .params
            .iter()
            .map(|(_, v)| NamedTensor {
                name: v.name.clone(),
                kind: if v.requires_grad {
                    TensorKind::Learnable
                } else {
                    TensorKind::Buffer
                },
                value: v.value.clone(),
            })
            .collect();
        for (id, v) in self.model.params.learnable() {
            tensors.push(NamedTensor {
                name: format!("{}.velocity", v.name),
                kind: TensorKind::Velocity,
                value: self
                    .optimizer
                    .velocity(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(v.value.shape())),
            });
        }
        Checkpoint {
            model: self.model.config,
            train: self.config.clone(),
            next_epoch: self.next_epoch,
            stats: self.stats,
            tensors,
            history: self.history.clone(),
        }
    }

    /// Rebuilds the run exactly as it was when `ck` was taken.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.train.validate()?;
        let mut model = Model::<f32>::build(ck.model, &mut rng::seeded(0))?;
        let slots: Vec<(ParamId, String, bool)> = model
            .params
            .iter()
            .map(|(id, v)| (id, v.name.clone(), v.requires_grad))
            .collect();
        let learnable = slots.iter().filter(|s| s.2).count();
        if ck.tensors.len() != slots.len() + learnable {
            return Err(Error::CheckpointMismatch(format!(
                "{} tensors stored, model needs {}",
                ck.tensors.len(),
                slots.len() + learnable
            )));
        }
        let (values, velocities) = ck.tensors.split_at(slots.len());
        let mismatch = |want: &str, got: &NamedTensor| {
            Error::CheckpointMismatch(format!("expected `{want}`, found `{}`", got.name))
        };
        let mut optimizer = OptimizerState::new(&model.params);
        let mut vel = velocities.iter();
        for ((id, name, learn), stored) in slots.iter().zip(values) {
            let kind = if *learn {
                TensorKind::Learnable
            } else {
                TensorKind::Buffer
            };
            if stored.name != *name || stored.kind != kind {
                return Err(mismatch(name, stored));
            }
            if stored.value.shape() != model.params.value(*id).shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "`{name}` has shape {}, model expects {}",
                    stored.value.shape(),
                    model.params.value(*id).shape()
                )));
            }
            *model.params.value_mut(*id) = stored.value.clone();
            if *learn {
                let v = vel.next().expect("counted above");
                let want = format!("{name}.velocity");
                if v.name != want || v.kind != TensorKind::Velocity || v.value.shape() != stored.value.shape() {
                    return Err(mismatch(&want, v));
                }
                optimizer.velocity[id.index()] = Some(v.value.clone());
            }
        }
        if ck.next_epoch > ck.train.epochs || ck.history.len() != ck.next_epoch {
            return Err(Error::CorruptCheckpoint(format!(
                "epoch counter {} disagrees with {} history rows and {} epochs",
                ck.next_epoch,
                ck.history.len(),
                ck.train.epochs
            )));
        }
        Ok(Trainer {
            model,
            optimizer,
            config: ck.train,
            stats: ck.stats,
            next_epoch: ck.next_epoch,
            history: ck.history,
        })
    }

    /// Refuses to continue a run under a different model or recipe. The
    /// epoch count may grow so a finished run can be extended.
    pub fn check_resume(&self, model: &ModelConfig, train: &TrainConfig) -> Result<()> {
        if self.model.config != *model {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint holds {}, requested {model}",
                self.model.config
            )));
        }
        let same_recipe = TrainConfig {
            epochs: self.config.epochs,
            ..train.clone()
        };
        if same_recipe != self.config {
            return Err(Error::CheckpointMismatch(
                "training hyper-parameters differ from the checkpoint".into(),
            ));
        }
        Ok(())
    }
}
