//! Cross-entropy and temperature-softened distillation losses.
//!
//! Both return the batch-mean loss and its gradient with respect to the
//! student logits. Per-sample terms are evaluated in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub temperature: f32,
    /// Weight of the soft-target term; the hard-label term gets `1 - soft_weight`.
    pub soft_weight: f32,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self { temperature: 2.0, soft_weight: 1.0 }
    }
}

impl KdConfig {
    pub fn new(temperature: f32, soft_weight: f32) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidArg(format!("temperature must be positive, got {temperature}")));
        }
        if !(0.0..=1.0).contains(&soft_weight) {
            return Err(Error::InvalidArg(format!("soft_weight must lie in [0, 1], got {soft_weight}")));
        }
        Ok(Self { temperature, soft_weight })
    }

    pub fn hard_weight(&self) -> f32 {
        1.0 - self.soft_weight
    }
}

fn log_softmax(row: &[f32], scale: f64) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64 * scale));
    let lse = row.iter().map(|&v| (v as f64 * scale - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&v| v as f64 * scale - lse).collect()
}

fn dims(logits: &Tensor) -> Result<(usize, usize)> {
    match *logits.shape() {
        [n, c] => Ok((n, c)),
        _ => Err(Error::ShapeMismatch(format!("logits must be 2-d, got {:?}", logits.shape()))),
    }
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArg(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// Mean cross-entropy of `logits[n×c]` against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    Ok(cross_entropy_with_grad(logits, labels)?.0)
}

pub fn cross_entropy_with_grad(logits: &Tensor, labels: &[usize]) -> Result<(f32, Vec<f32>)> {
    let (n, c) = dims(logits)?;
    check_labels(labels, n, c)?;
    let mut total = 0.0f64;
    let mut grad = vec![0.0f32; n * c];
    for (s, &y) in labels.iter().enumerate() {
        let ls = log_softmax(logits.row(s), 1.0);
        total -= ls[y];
        for (j, &l) in ls.iter().enumerate() {
            let target = if j == y { 1.0 } else { 0.0 };
            grad[s * c + j] = ((l.exp() - target) / n as f64) as f32;
        }
    }
    Ok(((total / n as f64) as f32, grad))
}

/// `soft_weight · T² · KL(softmax(teacher/T) ‖ softmax(student/T)) + hard_weight · CE`.
pub fn kd_loss(student: &Tensor, teacher: &Tensor, labels: &[usize], kd: &KdConfig) -> Result<f32> {
    Ok(kd_loss_with_grad(student, teacher, labels, kd)?.0)
}

pub fn kd_loss_with_grad(
    student: &Tensor,
    teacher: &Tensor,
    labels: &[usize],
    kd: &KdConfig,
) -> Result<(f32, Vec<f32>)> {
    let (n, c) = dims(student)?;
    if teacher.shape() != student.shape() {
        return Err(Error::ShapeMismatch(format!(
            "teacher logits {:?} vs student {:?}",
            teacher.shape(),
            student.shape()
        )));
    }
    let (ce, ce_grad) = cross_entropy_with_grad(student, labels)?;
    let t = kd.temperature as f64;
    let mut soft_total = 0.0f64;
    let mut soft_grad = vec![0.0f32; n * c];
    for s in 0..n {
        let ls = log_softmax(student.row(s), 1.0 / t);
        let lt = log_softmax(teacher.row(s), 1.0 / t);
        let mut kl = 0.0f64;
        for j in 0..c {
            let pt = lt[j].exp();
            kl += pt * (lt[j] - ls[j]);
            soft_grad[s * c + j] = (t * (ls[j].exp() - pt) / n as f64) as f32;
        }
        soft_total += t * t * kl;
    }
    let soft = (soft_total / n as f64) as f32;
    let (ws, wh) = (kd.soft_weight, kd.hard_weight());
    let value = ws * soft + wh * ce;
    let grad = soft_grad.iter().zip(&ce_grad).map(|(&g_s, &g_h)| ws * g_s + wh * g_h).collect();
    Ok((value, grad))
}

/// Uniform mean of several logit tensors of equal shape.
pub fn average_logits(all: &[Tensor]) -> Result<Tensor> {
    let first = all.first().ok_or_else(|| Error::InvalidArg("no logits to average".into()))?;
    let mut acc = vec![0.0f32; first.len()];
    for t in all {
        if t.shape() != first.shape() {
            return Err(Error::ShapeMismatch("logit shapes differ".into()));
        }
        for (a, &v) in acc.iter_mut().zip(t.data()) {
            *a += v;
        }
    }
    let k = all.len() as f32;
    acc.iter_mut().for_each(|v| *v /= k);
    Tensor::new(first.shape().to_vec(), acc)
}
