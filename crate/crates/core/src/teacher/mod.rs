//! Mean-teacher training: weight averaging, losses, optimizer, metrics and the
//! three-stage toy pipeline.

mod losses;
mod pipeline;

pub use losses::{kl_consistency, lovasz_class, lovasz_softmax, total_loss, LossConfig, Stage};
pub use pipeline::{
    evaluate, prepare_frames, run_toy_pipeline, CostSummary, FeatureNorm, PreparedFrame,
    PseudoSummary, StageReport, ToyConfig, ToyModel, ToyReport,
};

use serde::Serialize;

use crate::error::{Error, Result};

/// `teacher <- kappa * teacher + (1 - kappa) * student`, elementwise.
pub fn ema_update(teacher: &mut [f64], student: &[f64], kappa: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::Shape(format!(
            "teacher has {} parameters, student {}",
            teacher.len(),
            student.len()
        )));
    }
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::Validation(format!(
            "kappa must lie in [0, 1], got {kappa}"
        )));
    }
    for (t, &s) in teacher.iter_mut().zip(student) {
        *t = kappa * *t + (1.0 - kappa) * s;
    }
    Ok(())
}

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    /// Gradients with a larger global norm are rescaled to this norm.
    pub clip_norm: Option<f64>,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(n_params: usize, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            clip_norm: None,
            velocity: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.velocity.len() || grad.len() != params.len() {
            return Err(Error::Shape(
                "optimizer, parameter and gradient sizes differ".into(),
            ));
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for ((p, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g * scale;
            *p -= self.lr * *v;
        }
        Ok(())
    }
}

/// Rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    /// Adds pairs; ground-truth values outside the class range are skipped.
    pub fn add(&mut self, truth: &[u32], pred: &[u32]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::Shape(format!(
                "{} labels vs {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if (t as usize) < self.n_classes {
                if p as usize >= self.n_classes {
                    return Err(Error::Validation(format!(
                        "prediction {p} outside {} classes",
                        self.n_classes
                    )));
                }
                self.counts[t as usize * self.n_classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    /// IoU per class, `None` for classes absent from both truth and prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let c = self.n_classes;
        (0..c)
            .map(|k| {
                let tp = self.counts[k * c + k];
                let row: u64 = self.counts[k * c..(k + 1) * c].iter().sum();
                let col: u64 = (0..c).map(|r| self.counts[r * c + k]).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes that occur; 0 when none do.
    pub fn miou(&self) -> f64 {
        let v: Vec<f64> = self.iou().into_iter().flatten().collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}
