//! Pseudo-labels from teacher predictions and the contrastive loss on unreliable voxels.
//!
//! Low-entropy voxels become reliable pseudo-labels (further thinned per class and
//! range band). High-entropy voxels are not discarded: each one is pushed as a
//! negative into the bank of every class it is confidently *not*.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label written for voxels or points without a reliable pseudo-label.
pub const IGNORE_LABEL: u32 = u32::MAX;

/// Tolerance on the per-voxel probability sum.
pub const PROB_SUM_TOL: f64 = 1e-5;

pub const ANNULI: usize = 3;

/// Class probabilities and embeddings for every voxel of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelPredictions {
    n_classes: usize,
    probs: Vec<f64>,
    dim: usize,
    embeddings: Vec<f64>,
    /// Radial distance of each voxel, used for range bands.
    rho: Vec<f64>,
    gt: Option<Vec<Option<u32>>>,
    pub frame_id: u32,
}

impl VoxelPredictions {
    pub fn new(
        n_classes: usize,
        probs: Vec<f64>,
        dim: usize,
        embeddings: Vec<f64>,
        rho: Vec<f64>,
    ) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::Validation("need at least one class".into()));
        }
        if !probs.len().is_multiple_of(n_classes) {
            return Err(Error::Shape(format!(
                "{} probabilities for {n_classes} classes",
                probs.len()
            )));
        }
        let n = probs.len() / n_classes;
        if embeddings.len() != n * dim || rho.len() != n {
            return Err(Error::Shape(format!(
                "{n} voxels but {} embedding values (dim {dim}) and {} radii",
                embeddings.len(),
                rho.len()
            )));
        }
        for (i, row) in probs.chunks(n_classes).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
                return Err(Error::Validation(format!(
                    "voxel {i} has a negative or non-finite probability"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::Validation(format!(
                    "voxel {i} probabilities sum to {s}"
                )));
            }
        }
        let bad: Vec<usize> = (0..n)
            .filter(|&i| {
                embeddings[i * dim..(i + 1) * dim]
                    .iter()
                    .any(|v| !v.is_finite())
            })
            .collect();
        if !bad.is_empty() {
            return Err(Error::NonFinite { indices: bad });
        }
        Ok(Self {
            n_classes,
            probs,
            dim,
            embeddings,
            rho,
            gt: None,
            frame_id: 0,
        })
    }

    pub fn with_ground_truth(mut self, gt: Vec<Option<u32>>) -> Result<Self> {
        if gt.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} voxels",
                gt.len(),
                self.len()
            )));
        }
        if let Some(c) = gt.iter().flatten().find(|&&c| c as usize >= self.n_classes) {
            return Err(Error::Validation(format!(
                "label {c} outside {} classes",
                self.n_classes
            )));
        }
        self.gt = Some(gt);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn embedding_dim(&self) -> usize {
        self.dim
    }

    pub fn probs(&self, i: usize) -> &[f64] {
        &self.probs[i * self.n_classes..(i + 1) * self.n_classes]
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn ground_truth(&self, i: usize) -> Option<u32> {
        self.gt.as_ref().and_then(|g| g[i])
    }

    /// Highest-probability class, lowest id on ties.
    pub fn argmax(&self, i: usize) -> u32 {
        argmax(self.probs(i)) as u32
    }

    /// Shannon entropy (nats) of voxel `i`'s prediction.
    pub fn entropy(&self, i: usize) -> f64 {
        entropy(self.probs(i))
    }

    /// Near, mid or far third of the frame's radial extent.
    pub fn annuli(&self) -> Vec<usize> {
        let lo = self.rho.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.rho.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        self.rho
            .iter()
            .map(|&r| {
                if span > 0.0 {
                    (((r - lo) / span * ANNULI as f64).floor() as usize).min(ANNULI - 1)
                } else {
                    0
                }
            })
            .collect()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = j;
        }
    }
    best
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Linear interpolation between closest ranks, on sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Reliable voxels with their hard labels, and the unreliable remainder.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoLabelSet {
    pub reliable: BTreeMap<usize, u32>,
    pub unreliable: BTreeSet<usize>,
    pub entropy: Vec<f64>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.entropy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entropy.is_empty()
    }

    /// Per-voxel label, [`IGNORE_LABEL`] where unreliable.
    pub fn hard_labels(&self) -> Vec<u32> {
        (0..self.len())
            .map(|i| self.reliable.get(&i).copied().unwrap_or(IGNORE_LABEL))
            .collect()
    }

    /// Reliable counts per class and unreliable counts per predicted class.
    pub fn class_counts(&self, v: &VoxelPredictions) -> Vec<ClassCount> {
        let mut out = vec![ClassCount::default(); v.n_classes()];
        for &c in self.reliable.values() {
            out[c as usize].reliable += 1;
        }
        for &i in &self.unreliable {
            out[v.argmax(i) as usize].unreliable += 1;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCount {
    pub reliable: usize,
    pub unreliable: usize,
}

/// Splits voxels at the `percentile`-th entropy of the frame: strictly above is unreliable.
///
/// `percentile = 100` leaves every voxel reliable.
pub fn entropy_partition(v: &VoxelPredictions, percentile_rank: f64) -> Result<PseudoLabelSet> {
    if !(0.0..=100.0).contains(&percentile_rank) {
        return Err(Error::Validation(format!(
            "percentile must lie in [0, 100], got {percentile_rank}"
        )));
    }
    let ent: Vec<f64> = (0..v.len()).map(|i| v.entropy(i)).collect();
    let mut sorted = ent.clone();
    sorted.sort_by(f64::total_cmp);
    let threshold = percentile(&sorted, percentile_rank);
    let mut out = PseudoLabelSet {
        entropy: ent,
        ..Default::default()
    };
    for i in 0..v.len() {
        if out.entropy[i] > threshold {
            out.unreliable.insert(i);
        } else {
            out.reliable.insert(i, v.argmax(i));
        }
    }
    Ok(out)
}

/// Class- and range-balanced thinning of the reliable set.
///
/// Within each (class, range band) group, only the `ceil(keep * n)` most
/// confident voxels stay reliable; the rest are demoted.
pub fn crb_select(
    pls: &PseudoLabelSet,
    v: &VoxelPredictions,
    per_class_keep: f64,
) -> Result<PseudoLabelSet> {
    if !(per_class_keep > 0.0 && per_class_keep <= 1.0) {
        return Err(Error::Validation(format!(
            "per-class keep must lie in (0, 1], got {per_class_keep}"
        )));
    }
    if pls.len() != v.len() {
        return Err(Error::Shape(format!(
            "{} labeled voxels for {} predictions",
            pls.len(),
            v.len()
        )));
    }
    let bands = v.annuli();
    let mut groups: BTreeMap<(u32, usize), Vec<usize>> = BTreeMap::new();
    for (&i, &c) in &pls.reliable {
        groups.entry((c, bands[i])).or_default().push(i);
    }
    let mut out = pls.clone();
    for ((c, _), mut members) in groups {
        let keep = ((per_class_keep * members.len() as f64 - 1e-9).ceil() as usize)
            .clamp(1, members.len());
        // members arrive in index order; the stable sort keeps lower indices first on ties
        members.sort_by(|&a, &b| v.probs(b)[c as usize].total_cmp(&v.probs(a)[c as usize]));
        for &i in &members[keep..] {
            out.reliable.remove(&i);
            out.unreliable.insert(i);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    /// Minimum probability of the anchor's own class.
    pub delta_p: f64,
    pub tau: f64,
    /// Negatives drawn per anchor.
    pub n_negatives: usize,
    /// Bank capacity per class.
    pub capacity: usize,
    /// Most anchors used per class and step.
    pub max_anchors: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            delta_p: 0.7,
            tau: 0.5,
            n_negatives: 32,
            capacity: 256,
            max_anchors: 128,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_p > 0.0 && self.delta_p < 1.0) {
            return Err(Error::Validation(format!(
                "delta_p must lie in (0, 1), got {}",
                self.delta_p
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Validation(format!(
                "tau must be > 0, got {}",
                self.tau
            )));
        }
        if self.n_negatives == 0 {
            return Err(Error::Validation(
                "at least one negative per anchor is required".into(),
            ));
        }
        if self.capacity == 0 || self.max_anchors == 0 {
            return Err(Error::Validation(
                "bank capacity and anchor cap must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Target label of a voxel: ground truth where known, else its reliable pseudo-label.
pub fn target_label(v: &VoxelPredictions, labels: &PseudoLabelSet, i: usize) -> Option<u32> {
    v.ground_truth(i)
        .or_else(|| labels.reliable.get(&i).copied())
}

/// Voxel indices whose target is `c` and whose predicted `p(c)` exceeds `delta_p`.
pub fn build_anchor_set(
    v: &VoxelPredictions,
    labels: &PseudoLabelSet,
    cfg: &ContrastiveConfig,
    c: u32,
) -> Vec<usize> {
    (0..v.len())
        .filter(|&i| target_label(v, labels, i) == Some(c) && v.probs(i)[c as usize] > cfg.delta_p)
        .collect()
}

/// Mean of the given embeddings, `None` when there are none.
pub fn positive_center<'a, I>(anchors: I) -> Option<Vec<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut it = anchors.into_iter();
    let first = it.next()?;
    let mut sum = first.to_vec();
    let mut n = 1usize;
    for e in it {
        for (s, x) in sum.iter_mut().zip(e) {
            *s += x;
        }
        n += 1;
    }
    for s in &mut sum {
        *s /= n as f64;
    }
    Some(sum)
}

/// Fixed-capacity FIFO queues of negative embeddings, one per class.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    queues: Vec<VecDeque<Vec<f64>>>,
}

impl MemoryBank {
    pub fn new(n_classes: usize, dim: usize, capacity: usize) -> Self {
        Self {
            capacity,
            dim,
            queues: vec![VecDeque::with_capacity(capacity); n_classes],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn n_classes(&self) -> usize {
        self.queues.len()
    }

    pub fn len(&self, c: u32) -> usize {
        self.queues[c as usize].len()
    }

    pub fn is_empty(&self) -> bool {
        self.queues.iter().all(VecDeque::is_empty)
    }

    /// Oldest first.
    pub fn queue(&self, c: u32) -> impl ExactSizeIterator<Item = &[f64]> {
        self.queues[c as usize].iter().map(Vec::as_slice)
    }

    pub fn get(&self, c: u32, i: usize) -> &[f64] {
        &self.queues[c as usize][i]
    }

    pub fn push(&mut self, c: u32, embedding: &[f64]) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(Error::Shape(format!(
                "embedding of {} values for a {}-d bank",
                embedding.len(),
                self.dim
            )));
        }
        let q = self
            .queues
            .get_mut(c as usize)
            .ok_or_else(|| Error::Validation(format!("class {c} outside the bank")))?;
        if q.len() == self.capacity {
            q.pop_front();
        }
        q.push_back(embedding.to_vec());
        Ok(())
    }
}

/// Whether class `c` is among the `ceil(C/2)` least likely classes of `row`
/// (ascending probability, lower class id first on ties).
pub fn is_unlikely(row: &[f64], c: usize) -> bool {
    let rank = row
        .iter()
        .enumerate()
        .filter(|&(j, &p)| p < row[c] || (p == row[c] && j < c))
        .count();
    rank < row.len().div_ceil(2)
}

/// Pushes every unreliable voxel that is unlikely to be `c` into `c`'s queue, in voxel order.
/// Returns the number pushed.
pub fn bank_push_negatives(
    bank: &mut MemoryBank,
    v: &VoxelPredictions,
    pls: &PseudoLabelSet,
    c: u32,
) -> Result<usize> {
    let mut pushed = 0;
    for &i in &pls.unreliable {
        if is_unlikely(v.probs(i), c as usize) {
            bank.push(c, v.embedding(i))?;
            pushed += 1;
        }
    }
    Ok(pushed)
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine similarity and its gradients with respect to both arguments.
fn cosine_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateEmbedding(
            "zero-norm embedding in cosine similarity".into(),
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = dot / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| (y / nb - cos * x / na) / na)
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x / na - cos * y / nb) / nb)
        .collect();
    Ok((cos, ga, gb))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    cosine_with_grad(a, b).map(|t| t.0)
}

/// One class's contribution: anchors, their shared positive and per-anchor negatives.
#[derive(Debug, Clone)]
pub struct ContrastiveTerm<'a> {
    pub anchors: Vec<&'a [f64]>,
    pub positive: &'a [f64],
    /// `negatives[a]` are the negatives of anchor `a`.
    pub negatives: Vec<Vec<&'a [f64]>>,
}

/// Loss and gradients, indexed like the input terms.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNce {
    pub loss: f64,
    pub anchor_grads: Vec<Vec<Vec<f64>>>,
    pub positive_grads: Vec<Vec<f64>>,
    pub negative_grads: Vec<Vec<Vec<Vec<f64>>>>,
}

/// Mean over terms of the mean per-anchor InfoNCE loss with cosine similarity and temperature `tau`.
pub fn infonce_from_terms(terms: &[ContrastiveTerm<'_>], tau: f64) -> Result<InfoNce> {
    if !(tau > 0.0) {
        return Err(Error::Validation(format!("tau must be > 0, got {tau}")));
    }
    let mut out = InfoNce {
        loss: 0.0,
        anchor_grads: Vec::with_capacity(terms.len()),
        positive_grads: Vec::with_capacity(terms.len()),
        negative_grads: Vec::with_capacity(terms.len()),
    };
    if terms.is_empty() {
        return Ok(out);
    }
    let n_terms = terms.len() as f64;
    for t in terms {
        if t.anchors.is_empty() || t.negatives.len() != t.anchors.len() {
            return Err(Error::Shape(
                "every term needs anchors and one negative list per anchor".into(),
            ));
        }
        let w = 1.0 / (n_terms * t.anchors.len() as f64);
        let mut gpos = vec![0.0; t.positive.len()];
        let mut ganchors = Vec::with_capacity(t.anchors.len());
        let mut gnegs = Vec::with_capacity(t.anchors.len());
        for (a, negs) in t.anchors.iter().zip(&t.negatives) {
            let (sp, ga_p, gp) = cosine_with_grad(a, t.positive)?;
            let mut logits = Vec::with_capacity(negs.len() + 1);
            let mut neg_parts = Vec::with_capacity(negs.len());
            logits.push(sp / tau);
            for n in negs {
                let (sn, ga_n, gn) = cosine_with_grad(a, n)?;
                logits.push(sn / tau);
                neg_parts.push((ga_n, gn));
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let lse = max + z.ln();
            out.loss += w * (lse - logits[0]);
            // d loss / d logit_k = softmax_k - [k == 0]
            let soft: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
            let d_pos = w * (soft[0] - 1.0) / tau;
            let mut ga: Vec<f64> = ga_p.iter().map(|g| d_pos * g).collect();
            for (x, g) in gpos.iter_mut().zip(&gp) {
                *x += d_pos * g;
            }
            let mut gn_out = Vec::with_capacity(negs.len());
            for (k, (ga_n, gn)) in neg_parts.into_iter().enumerate() {
                let d = w * soft[k + 1] / tau;
                for (x, g) in ga.iter_mut().zip(&ga_n) {
                    *x += d * g;
                }
                gn_out.push(gn.into_iter().map(|g| d * g).collect());
            }
            ganchors.push(ga);
            gnegs.push(gn_out);
        }
        out.anchor_grads.push(ganchors);
        out.positive_grads.push(gpos);
        out.negative_grads.push(gnegs);
    }
    Ok(out)
}

/// Per-class anchors for the bank-driven loss.
#[derive(Debug, Clone)]
pub struct ClassAnchors {
    pub class: u32,
    pub anchors: Vec<Vec<f64>>,
    pub positive: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankLoss {
    pub loss: f64,
    /// Classes that contributed a term.
    pub classes: Vec<u32>,
    /// Gradient with respect to each anchor, aligned with the input anchors;
    /// empty for skipped classes.
    pub anchor_grads: Vec<Vec<Vec<f64>>>,
}

/// InfoNCE with negatives drawn without replacement from the bank; classes with
/// no anchors or fewer than `n_negatives` banked embeddings are skipped.
pub fn infonce_loss<R: Rng + ?Sized>(
    classes: &[ClassAnchors],
    bank: &MemoryBank,
    cfg: &ContrastiveConfig,
    rng: &mut R,
) -> Result<BankLoss> {
    cfg.validate()?;
    let mut participating = Vec::new();
    let mut terms = Vec::new();
    for (k, ca) in classes.iter().enumerate() {
        if ca.anchors.is_empty()
            || (ca.class as usize) >= bank.n_classes()
            || bank.len(ca.class) < cfg.n_negatives
        {
            continue;
        }
        let negatives = ca
            .anchors
            .iter()
            .map(|_| {
                rand::seq::index::sample(rng, bank.len(ca.class), cfg.n_negatives)
                    .into_iter()
                    .map(|j| bank.get(ca.class, j))
                    .collect()
            })
            .collect();
        participating.push(k);
        terms.push(ContrastiveTerm {
            anchors: ca.anchors.iter().map(Vec::as_slice).collect(),
            positive: &ca.positive,
            negatives,
        });
    }
    let res = infonce_from_terms(&terms, cfg.tau)?;
    let mut anchor_grads = vec![Vec::new(); classes.len()];
    for (slot, g) in participating.iter().zip(res.anchor_grads) {
        anchor_grads[*slot] = g;
    }
    Ok(BankLoss {
        loss: res.loss,
        classes: participating.iter().map(|&k| classes[k].class).collect(),
        anchor_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preds(rows: &[&[f64]]) -> VoxelPredictions {
        let c = rows[0].len();
        let probs: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let n = rows.len();
        let emb: Vec<f64> = (0..n).flat_map(|i| [1.0 + i as f64, 0.5]).collect();
        VoxelPredictions::new(c, probs, 2, emb, vec![1.0; n]).unwrap()
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(VoxelPredictions::new(2, vec![0.5, 0.6], 1, vec![1.0], vec![1.0]).is_err());
        assert!(VoxelPredictions::new(2, vec![-0.1, 1.1], 1, vec![1.0], vec![1.0]).is_err());
        assert!(matches!(
            VoxelPredictions::new(2, vec![0.5, 0.5], 1, vec![f64::NAN], vec![1.0]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0);
        let u = vec![1.0 / 19.0; 19];
        assert!((entropy(&u) - 19f64.ln()).abs() < 1e-12);
        assert!((19f64.ln() - 2.944).abs() < 1e-3);
    }

    #[test]
    fn two_voxel_median_split() {
        let v = preds(&[&[0.9, 0.1], &[0.6, 0.4]]);
        let p = entropy_partition(&v, 50.0).unwrap();
        assert_eq!(p.unreliable.iter().copied().collect::<Vec<_>>(), vec![1]);
        assert_eq!(p.reliable.get(&0), Some(&0));
    }

    #[test]
    fn uniform_voxel_is_unreliable() {
        let mut rows: Vec<Vec<f64>> = (0..9)
            .map(|i| {
                let mut r = vec![0.01 / 18.0; 19];
                r[i] = 0.99;
                r
            })
            .collect();
        rows.push(vec![1.0 / 19.0; 19]);
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let v = preds(&refs);
        for q in [1.0, 50.0, 99.0] {
            assert!(entropy_partition(&v, q).unwrap().unreliable.contains(&9));
        }
        assert!(entropy_partition(&v, 100.0).unwrap().unreliable.is_empty());
        assert!(entropy_partition(&v, 101.0).is_err());
    }

    #[test]
    fn one_hot_always_reliable() {
        let v = preds(&[&[1.0, 0.0], &[0.5, 0.5], &[0.7, 0.3]]);
        for q in [0.0, 10.0, 90.0] {
            assert!(entropy_partition(&v, q).unwrap().reliable.contains_key(&0));
        }
    }

    #[test]
    fn crb_keeps_top_third() {
        let v = preds(&[&[0.7, 0.3], &[0.9, 0.1], &[0.8, 0.2]]);
        let p = entropy_partition(&v, 100.0).unwrap();
        let kept = crb_select(&p, &v, 1.0 / 3.0).unwrap();
        assert_eq!(kept.reliable.keys().copied().collect::<Vec<_>>(), vec![1]);
        assert_eq!(
            kept.unreliable.iter().copied().collect::<Vec<_>>(),
            vec![0, 2]
        );
        assert_eq!(crb_select(&p, &v, 1.0).unwrap(), p);
        assert!(crb_select(&p, &v, 0.0).is_err());
    }

    #[test]
    fn crb_bands_are_independent() {
        let probs = vec![0.9, 0.1, 0.8, 0.2, 0.95, 0.05, 0.6, 0.4];
        let v = VoxelPredictions::new(2, probs, 1, vec![1.0; 4], vec![1.0, 1.0, 9.0, 9.0]).unwrap();
        let p = entropy_partition(&v, 100.0).unwrap();
        let kept = crb_select(&p, &v, 0.5).unwrap();
        assert_eq!(
            kept.reliable.keys().copied().collect::<Vec<_>>(),
            vec![0, 2]
        );
    }

    #[test]
    fn anchors_follow_threshold_and_targets() {
        let v = preds(&[&[0.9, 0.1], &[0.4, 0.6], &[0.75, 0.25]]);
        let mut p = entropy_partition(&v, 100.0).unwrap();
        p.reliable.remove(&2);
        p.unreliable.insert(2);
        let cfg = ContrastiveConfig {
            delta_p: 0.5,
            ..Default::default()
        };
        assert_eq!(build_anchor_set(&v, &p, &cfg, 0), vec![0]);
        assert_eq!(build_anchor_set(&v, &p, &cfg, 1), vec![1]);
        // ground truth overrides the pseudo-label and rescues unreliable voxels
        let v = v.with_ground_truth(vec![None, Some(0), Some(0)]).unwrap();
        assert_eq!(build_anchor_set(&v, &p, &cfg, 0), vec![0, 2]);
    }

    #[test]
    fn positive_center_mean() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        assert_eq!(positive_center([&a[..], &b[..]]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(positive_center([&a[..]]).unwrap(), vec![1.0, 0.0]);
        assert!(positive_center(std::iter::empty::<&[f64]>()).is_none());
    }

    #[test]
    fn bank_is_fifo() {
        let mut b = MemoryBank::new(2, 1, 2);
        for x in [1.0, 2.0, 3.0] {
            b.push(1, &[x]).unwrap();
        }
        assert_eq!(b.queue(1).map(|e| e[0]).collect::<Vec<_>>(), vec![2.0, 3.0]);
        assert_eq!(b.len(0), 0);
        assert!(b.push(0, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn negatives_go_to_unlikely_classes() {
        // classes: road, car, pole; voxel is torn between road and car
        let v = preds(&[&[0.45, 0.5, 0.05]]);
        let p = PseudoLabelSet {
            entropy: vec![v.entropy(0)],
            unreliable: [0].into(),
            ..Default::default()
        };
        let mut bank = MemoryBank::new(3, 2, 8);
        for c in 0..3 {
            bank_push_negatives(&mut bank, &v, &p, c).unwrap();
        }
        // bottom ceil(3/2) = 2 classes: pole and road
        assert_eq!((bank.len(0), bank.len(1), bank.len(2)), (1, 0, 1));
        let empty = PseudoLabelSet {
            entropy: vec![0.0],
            ..Default::default()
        };
        let before = bank.clone();
        bank_push_negatives(&mut bank, &v, &empty, 2).unwrap();
        assert_eq!(bank, before);
    }

    #[test]
    fn closed_form_losses() {
        let a = [1.0, 0.0];
        let neg = [0.0, 1.0];
        let t = ContrastiveTerm {
            anchors: vec![&a],
            positive: &a,
            negatives: vec![vec![&neg]],
        };
        let r = infonce_from_terms(&[t], 0.5).unwrap();
        let want = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((r.loss - want).abs() < 1e-12);
        assert!((want - 0.1269).abs() < 1e-4);

        let a = [1.0, 0.0, 0.0];
        let pos = [0.0, 1.0, 0.0];
        let n1 = [0.0, 0.0, 1.0];
        let n2 = [0.0, 0.0, -1.0];
        let n3 = [0.0, 2.0, 3.0];
        let t = ContrastiveTerm {
            anchors: vec![&a],
            positive: &pos,
            negatives: vec![vec![&n1, &n2, &n3]],
        };
        let r = infonce_from_terms(&[t], 0.5).unwrap();
        assert!((r.loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_is_degenerate() {
        let a = [0.0, 0.0];
        let b = [1.0, 0.0];
        let t = ContrastiveTerm {
            anchors: vec![&a],
            positive: &b,
            negatives: vec![vec![&b]],
        };
        assert!(matches!(
            infonce_from_terms(&[t], 0.5),
            Err(Error::DegenerateEmbedding(_))
        ));
    }

    #[test]
    fn bank_loss_skips_short_queues() {
        use rand::SeedableRng;
        let mut bank = MemoryBank::new(2, 2, 4);
        bank.push(0, &[0.0, 1.0]).unwrap();
        bank.push(0, &[0.3, 1.0]).unwrap();
        bank.push(1, &[1.0, 0.0]).unwrap();
        let cfg = ContrastiveConfig {
            n_negatives: 2,
            ..Default::default()
        };
        let classes = vec![
            ClassAnchors {
                class: 0,
                anchors: vec![vec![1.0, 0.0]],
                positive: vec![1.0, 0.1],
            },
            ClassAnchors {
                class: 1,
                anchors: vec![vec![0.0, 1.0]],
                positive: vec![0.0, 1.0],
            },
        ];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let r = infonce_loss(&classes, &bank, &cfg, &mut rng).unwrap();
        assert_eq!(r.classes, vec![0]);
        assert!(r.anchor_grads[1].is_empty());
        assert_eq!(r.anchor_grads[0].len(), 1);
        assert!(r.loss > 0.0);
    }
}
