//! SGD with momentum, learning-rate schedules, evaluation and distillation.

pub mod loss;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::{batch_indices, BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::network::{Gradients, Loss, Mode, Network};
use crate::tensor::Tensor;

pub use loss::{cross_entropy, kd_loss, KdConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Multiply the rate by `factor` every `period` epochs.
    StepDecay { period: usize, factor: f32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    #[serde(default)]
    pub schedule: Schedule,
    pub batch: BatchPlan,
    /// Mixed into the shuffle seed so each run gets its own batch order.
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, lr: f32, momentum: f32, batch_size: usize, seed: u64) -> Self {
        Self {
            epochs,
            lr,
            momentum,
            schedule: Schedule::Constant,
            batch: BatchPlan::new(batch_size, 0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArg(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArg(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch.batch_size == 0 {
            return Err(Error::InvalidArg("batch_size must be at least 1".into()));
        }
        if let Schedule::StepDecay { period, factor } = self.schedule {
            if period == 0 || !(factor > 0.0) {
                return Err(Error::InvalidArg("step decay needs period ≥ 1 and factor > 0".into()));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::StepDecay { period, factor } => self.lr * factor.powi((epoch / period) as i32),
        }
    }

    fn plan(&self) -> BatchPlan {
        BatchPlan {
            shuffle_seed: self.batch.shuffle_seed ^ self.seed.rotate_left(32),
            ..self.batch
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub test_loss: f32,
    pub test_accuracy: f32,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn push(&mut self, mut record: EpochRecord) {
        record.epoch = self.records.last().map_or(0, |r| r.epoch + 1);
        self.records.push(record);
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Record with the highest test accuracy; earliest wins on ties.
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.test_accuracy >= r.test_accuracy => Some(b),
                _ => Some(r),
            })
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f32,
    pub mean_loss: f32,
}

const EVAL_BATCH: usize = 512;

/// Index of the largest value; the first one wins on ties.
pub fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Eval-mode logits for the whole dataset.
pub fn predict_logits(net: &Network, ds: &Dataset) -> Result<Tensor> {
    let classes = net.num_classes();
    let mut out = Vec::with_capacity(ds.len() * classes);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = ds.gather(chunk);
        out.extend_from_slice(net.forward(&batch.features, Mode::Eval)?.data());
    }
    Tensor::new(vec![ds.len(), classes], out)
}

pub fn evaluate(net: &Network, ds: &Dataset) -> Result<EvalResult> {
    check_dataset(net, ds)?;
    if ds.is_empty() {
        return Ok(EvalResult { accuracy: 0.0, mean_loss: 0.0 });
    }
    let logits = predict_logits(net, ds)?;
    score_logits(&logits, ds.labels())
}

/// Accuracy and mean cross-entropy of precomputed logits.
pub fn score_logits(logits: &Tensor, labels: &[usize]) -> Result<EvalResult> {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count();
    Ok(EvalResult {
        accuracy: correct as f32 / labels.len() as f32,
        mean_loss: cross_entropy(logits, labels)?,
    })
}

fn check_dataset(net: &Network, ds: &Dataset) -> Result<()> {
    if ds.sample_shape() != net.input_shape() {
        return Err(Error::ArchMismatch(format!(
            "dataset samples {:?} vs network input {:?}",
            ds.sample_shape(),
            net.input_shape()
        )));
    }
    if ds.num_classes() > net.num_classes() {
        return Err(Error::ArchMismatch(format!(
            "dataset has {} classes, network {}",
            ds.num_classes(),
            net.num_classes()
        )));
    }
    Ok(())
}

fn sgd_step(net: &mut Network, velocity: &mut [Vec<Vec<f32>>], grads: &Gradients, lr: f32, momentum: f32) {
    for ((layer, vel), g) in net.layers_mut().iter_mut().zip(velocity.iter_mut()).zip(&grads.layers) {
        for ((param, v), g) in layer.params.iter_mut().zip(vel.iter_mut()).zip(g) {
            for ((w, v), &g) in param.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *v = momentum * *v - lr * g;
                *w += *v;
            }
        }
    }
}

/// Shared loop for plain training and distillation. `teacher` holds
/// full-dataset logits aligned with `train_ds`.
fn fit(
    mut net: Network,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
    teacher: Option<(&Tensor, KdConfig)>,
) -> Result<(Network, History)> {
    cfg.validate()?;
    check_dataset(&net, train_ds)?;
    check_dataset(&net, test_ds)?;
    let mut history = History::default();
    if cfg.epochs == 0 {
        return Ok((net, history));
    }
    let mut velocity: Vec<Vec<Vec<f32>>> = net
        .layers()
        .iter()
        .map(|l| l.params.iter().map(|p| vec![0.0; p.len()]).collect())
        .collect();
    let plan = cfg.plan();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr_at(epoch);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for (b, idx) in batch_indices(train_ds.len(), &plan, epoch)?.iter().enumerate() {
            let batch = train_ds.gather(idx);
            let teacher_batch;
            let loss = match teacher {
                None => Loss::CrossEntropy,
                Some((logits, config)) => {
                    teacher_batch = logits.select_rows(idx);
                    Loss::Distill { teacher_logits: &teacher_batch, config }
                }
            };
            let (value, grads, trace) = net
                .backward(&batch.features, &batch.labels, &loss)
                .map_err(|e| match e {
                    Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { epoch, batch: b },
                    other => other,
                })?;
            net.absorb_batch_stats(&trace);
            drop(trace);
            sgd_step(&mut net, &mut velocity, &grads, lr, cfg.momentum);
            loss_sum += value as f64 * idx.len() as f64;
            seen += idx.len();
        }
        let eval = evaluate(&net, test_ds)?;
        history.push(EpochRecord {
            epoch,
            train_loss: (loss_sum / seen.max(1) as f64) as f32,
            test_loss: eval.mean_loss,
            test_accuracy: eval.accuracy,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((net, history))
}

pub fn train(net: Network, train_ds: &Dataset, test_ds: &Dataset, cfg: &TrainConfig) -> Result<(Network, History)> {
    fit(net, train_ds, test_ds, cfg, None)
}

/// Trains `student` against the uniform mean of the teachers' eval-mode logits.
pub fn distill(
    student: Network,
    teachers: &[Network],
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
    kd: &KdConfig,
) -> Result<(Network, History)> {
    if teachers.is_empty() {
        return Err(Error::InvalidArg("distillation needs at least one teacher".into()));
    }
    let all = teachers
        .iter()
        .map(|t| {
            check_dataset(t, train_ds)?;
            predict_logits(t, train_ds)
        })
        .collect::<Result<Vec<_>>>()?;
    let target = loss::average_logits(&all)?;
    if target.shape()[1] != student.num_classes() {
        return Err(Error::ArchMismatch(format!(
            "teachers emit {} classes, student {}",
            target.shape()[1],
            student.num_classes()
        )));
    }
    fit(student, train_ds, test_ds, cfg, Some((&target, *kd)))
}
