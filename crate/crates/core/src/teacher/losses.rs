use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudo::{IGNORE_LABEL, PROB_SUM_TOL};

/// Gradient of the Lovász extension of the Jaccard loss at foreground indicators
/// already sorted by decreasing error.
fn lovasz_grad(fg_sorted: &[f64]) -> Vec<f64> {
    let gts: f64 = fg_sorted.iter().sum();
    let mut out = Vec::with_capacity(fg_sorted.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &f in fg_sorted {
        cum_fg += f;
        cum_bg += 1.0 - f;
        let inter = gts - cum_fg;
        let union = gts + cum_bg;
        let jac = 1.0 - inter / union;
        out.push(jac - prev);
        prev = jac;
    }
    out
}

/// Lovász hinge of one class: `errors` against foreground indicators.
/// Returns the loss and its gradient with respect to `errors`.
pub fn lovasz_class(errors: &[f64], fg: &[f64]) -> (f64, Vec<f64>) {
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
    let fg_sorted: Vec<f64> = order.iter().map(|&i| fg[i]).collect();
    let g = lovasz_grad(&fg_sorted);
    let mut grad = vec![0.0; errors.len()];
    let mut loss = 0.0;
    for (k, &i) in order.iter().enumerate() {
        loss += errors[i] * g[k];
        grad[i] = g[k];
    }
    (loss, grad)
}

/// Lovász-softmax averaged over classes present in `labels`; voxels labeled
/// [`IGNORE_LABEL`] are left out. Returns the loss and its gradient with respect to `probs`.
pub fn lovasz_softmax(probs: &[f64], n_classes: usize, labels: &[u32]) -> Result<(f64, Vec<f64>)> {
    if n_classes == 0 || probs.len() != labels.len() * n_classes {
        return Err(Error::Shape(format!(
            "{} probabilities for {} labels and {n_classes} classes",
            probs.len(),
            labels.len()
        )));
    }
    if let Some(&l) = labels
        .iter()
        .find(|&&l| l != IGNORE_LABEL && l as usize >= n_classes)
    {
        return Err(Error::Validation(format!(
            "label {l} outside {n_classes} classes"
        )));
    }
    let kept: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] != IGNORE_LABEL)
        .collect();
    let mut grad = vec![0.0; probs.len()];
    let mut present: Vec<bool> = vec![false; n_classes];
    for &i in &kept {
        present[labels[i] as usize] = true;
    }
    let n_present = present.iter().filter(|&&p| p).count();
    if n_present == 0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    let w = 1.0 / n_present as f64;
    for c in (0..n_classes).filter(|&c| present[c]) {
        let fg: Vec<f64> = kept
            .iter()
            .map(|&i| if labels[i] as usize == c { 1.0 } else { 0.0 })
            .collect();
        let errors: Vec<f64> = kept
            .iter()
            .zip(&fg)
            .map(|(&i, &f)| (f - probs[i * n_classes + c]).abs())
            .collect();
        let (l, g) = lovasz_class(&errors, &fg);
        loss += w * l;
        for ((&i, &f), &gi) in kept.iter().zip(&fg).zip(&g) {
            // error = f - p for foreground, p - f otherwise
            let sign = if f == 1.0 { -1.0 } else { 1.0 };
            grad[i * n_classes + c] += w * sign * gi;
        }
    }
    Ok((loss, grad))
}

fn check_rows(p: &[f64], n_classes: usize, what: &str) -> Result<()> {
    for (i, row) in p.chunks(n_classes).enumerate() {
        if row.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Validation(format!(
                "{what} row {i} has a negative or non-finite entry"
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::Validation(format!("{what} row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// Mean over voxels of `KL(teacher || student)`, with its gradient with respect to `student`.
pub fn kl_consistency(
    student: &[f64],
    teacher: &[f64],
    n_classes: usize,
) -> Result<(f64, Vec<f64>)> {
    if n_classes == 0 || student.len() != teacher.len() || !student.len().is_multiple_of(n_classes)
    {
        return Err(Error::Shape(format!(
            "student has {} values, teacher {}, classes {n_classes}",
            student.len(),
            teacher.len()
        )));
    }
    check_rows(student, n_classes, "student")?;
    check_rows(teacher, n_classes, "teacher")?;
    let n = student.len() / n_classes;
    let mut grad = vec![0.0; student.len()];
    if n == 0 {
        return Ok((0.0, grad));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    for (j, (&s, &t)) in student.iter().zip(teacher).enumerate() {
        if t > 0.0 {
            let s = s.max(f64::MIN_POSITIVE);
            loss += t * (t / s).ln();
            grad[j] = -t / s * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Train,
    PseudoLabel,
    Distill,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kappa: f64,
    pub lambda_u: f64,
    pub lambda_c: f64,
    pub stage: Stage,
    /// Weight the contrastive term by `lambda_c^2` during distillation instead of `lambda_c`.
    #[serde(default)]
    pub literal_gate: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kappa: 0.99,
            lambda_u: 1.0,
            lambda_c: 0.3,
            stage: Stage::Train,
            literal_gate: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::Validation(format!(
                "kappa must lie in [0, 1], got {}",
                self.kappa
            )));
        }
        if !(self.lambda_u >= 0.0 && self.lambda_c >= 0.0) {
            return Err(Error::Validation("loss weights must be >= 0".into()));
        }
        Ok(())
    }

    /// Effective weight of the contrastive term: zero outside distillation.
    pub fn contrastive_weight(&self) -> f64 {
        match self.stage {
            Stage::Distill if self.literal_gate => self.lambda_c * self.lambda_c,
            Stage::Distill => self.lambda_c,
            _ => 0.0,
        }
    }
}

pub fn total_loss(ls: f64, lu: f64, lc: f64, cfg: &LossConfig) -> f64 {
    let w = cfg.contrastive_weight();
    ls + cfg.lambda_u * lu + if w == 0.0 { 0.0 } else { w * lc }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let probs = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let (l, _) = lovasz_softmax(&probs, 3, &[0, 1, 2]).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn hard_binary_is_one_minus_jaccard() {
        // predictions of class 1 on voxels {0, 1, 3}, truth {1, 2, 3}
        let pred = [1.0, 1.0, 0.0, 1.0, 0.0];
        let truth = [0.0, 1.0, 1.0, 1.0, 0.0];
        let errors: Vec<f64> = pred
            .iter()
            .zip(&truth)
            .map(|(p, t): (&f64, &f64)| (t - p).abs())
            .collect();
        let (l, _) = lovasz_class(&errors, &truth);
        assert!((l - (1.0 - 2.0 / 4.0)).abs() < 1e-12);
    }

    #[test]
    fn ignored_voxels_do_not_count() {
        let probs = [0.2, 0.8, 1.0, 0.0];
        let (l, g) = lovasz_softmax(&probs, 2, &[IGNORE_LABEL, 0]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(&g[..2], &[0.0, 0.0]);
        assert_eq!(
            lovasz_softmax(&probs, 2, &[IGNORE_LABEL; 2]).unwrap().0,
            0.0
        );
        assert!(lovasz_softmax(&probs, 2, &[0, 5]).is_err());
    }

    #[test]
    fn kl_values() {
        let (l, _) = kl_consistency(&[0.5, 0.5], &[1.0, 0.0], 2).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let (l, _) = kl_consistency(&[0.3, 0.7], &[0.3, 0.7], 2).unwrap();
        assert_eq!(l, 0.0);
        assert!(matches!(
            kl_consistency(&[0.3, 0.6], &[0.3, 0.7], 2),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn gate() {
        let mut cfg = LossConfig::default();
        assert_eq!(total_loss(1.0, 2.0, 5.0, &cfg), 3.0);
        cfg.stage = Stage::Distill;
        assert!((total_loss(0.0, 0.0, 2.0, &cfg) - 0.6).abs() < 1e-12);
        cfg.literal_gate = true;
        assert!((total_loss(0.0, 0.0, 2.0, &cfg) - 0.18).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &cfg), 0.0);
    }
}
