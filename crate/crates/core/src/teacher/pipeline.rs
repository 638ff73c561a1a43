//! Desk-scale run of the full method on synthetic scenes.
//!
//! Stage 1 trains the student on sampled labeled frames with a weight-averaged
//! teacher. Stage 2 freezes the teacher, pseudo-labels the remaining frames and
//! fills the negative bank. Stage 3 retrains on everything with the
//! consistency and contrastive terms.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::losses::{kl_consistency, lovasz_softmax, LossConfig, Stage};
use super::{ema_update, ConfusionMatrix, Sgd};
use crate::backbone::{forward, BlockKind, Topology};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::pc_io::PointCloud;
use crate::pseudo::{
    bank_push_negatives, build_anchor_set, crb_select, entropy_partition, infonce_loss,
    positive_center, ClassAnchors, ClassCount, ContrastiveConfig, MemoryBank, PseudoLabelSet,
    VoxelPredictions, IGNORE_LABEL,
};
use crate::reflec::{augment, featurize, ReflecConfig};
use crate::sparse_conv::{cost, CostReport, Rulebook};
use crate::strfd::{calibrate_beta, frame_redundancy, SequenceRedundancy};
use crate::synth::{synth_sequence, SceneSpec, SYNTH_CLASSES};
use crate::voxel::{voxelize, CylGridSpec, Reducer, SparseVoxelTensor, Voxelized};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub seed: u64,
    pub labeled_fraction: f64,
    /// Subset of `{1, 2, 3}` in increasing order.
    pub stages: Vec<u8>,
    /// Optimizer steps in each training stage.
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub kappa: f64,
    pub lambda_u: f64,
    pub lambda_c: f64,
    pub literal_gate: bool,
    pub use_bank: bool,
    pub train_frames: usize,
    pub test_frames: usize,
    pub subset_size: usize,
    pub entropy_percentile: f64,
    pub crb_keep: f64,
    pub reflec: ReflecConfig,
    pub contrastive: ContrastiveConfig,
    pub grid: CylGridSpec,
    pub block: BlockKind,
    pub scene: SceneSpec,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            labeled_fraction: 1.0,
            stages: vec![1, 2, 3],
            steps: 200,
            lr: 0.1,
            momentum: 0.9,
            clip_norm: 5.0,
            kappa: 0.99,
            lambda_u: 1.0,
            lambda_c: 0.3,
            literal_gate: false,
            use_bank: true,
            train_frames: 24,
            test_frames: 12,
            subset_size: 20,
            entropy_percentile: 80.0,
            crb_keep: 0.8,
            reflec: ReflecConfig::default(),
            contrastive: ContrastiveConfig::default(),
            grid: CylGridSpec {
                n_rho: 20,
                n_phi: 64,
                n_z: 8,
                rho_max: 20.0,
                z_range: (-2.0, 1.2),
            },
            block: BlockKind::Sdsc,
            scene: SceneSpec::mixed(),
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::Validation(format!(
                "labeled fraction must lie in (0, 1], got {}",
                self.labeled_fraction
            )));
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| !(1..=3).contains(s)) {
            return Err(Error::Validation(format!(
                "stages must be drawn from 1, 2, 3: {:?}",
                self.stages
            )));
        }
        if self.stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(
                "stages must be listed once each, in order".into(),
            ));
        }
        if self.stages.contains(&3) && !self.stages.contains(&2) {
            return Err(Error::Validation(
                "stage 3 needs the pseudo-labels of stage 2".into(),
            ));
        }
        if self.train_frames == 0 || self.test_frames == 0 {
            return Err(Error::Validation(
                "train and test splits need at least one frame".into(),
            ));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Validation(
                "lr must be > 0 and momentum in [0, 1)".into(),
            ));
        }
        self.loss(Stage::Train).validate()?;
        self.reflec.validate()?;
        self.contrastive.validate()?;
        self.grid.validate()?;
        Ok(())
    }

    fn loss(&self, stage: Stage) -> LossConfig {
        LossConfig {
            kappa: self.kappa,
            lambda_u: self.lambda_u,
            lambda_c: self.lambda_c,
            stage,
            literal_gate: self.literal_gate,
        }
    }
}

/// Per-channel standardization fitted on training voxels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub fn fit(frames: &[PreparedFrame]) -> Self {
        let c = frames.first().map_or(0, |f| f.tensor.channels());
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut n = 0usize;
        for f in frames {
            for row in f.tensor.features().chunks(c) {
                for j in 0..c {
                    sum[j] += row[j];
                    sq[j] += row[j] * row[j];
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let v = (q / n - m * m).max(0.0).sqrt();
                if v > 1e-8 {
                    v
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, features: &[f64]) -> Vec<f64> {
        let c = self.mean.len();
        features
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % c]) / self.std[i % c])
            .collect()
    }
}

/// One voxelized frame ready for the network.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    pub tensor: SparseVoxelTensor,
    pub rulebook: Arc<Rulebook>,
    /// Majority point label of every voxel.
    pub labels: Vec<u32>,
    /// Radial distance of every voxel center.
    pub rho: Vec<f64>,
    pub gray: GrayImage,
}

fn voxel_frame(pc: &PointCloud, reflec: &ReflecConfig, grid: &CylGridSpec) -> Result<Voxelized> {
    let feats = featurize(pc, reflec)?;
    voxelize(&augment(pc, &feats)?, grid, Reducer::Mean)
}

fn center_rho(t: &SparseVoxelTensor) -> Vec<f64> {
    t.coords()
        .iter()
        .map(|&c| {
            let (x, y, _) = t.grid().center(c);
            x.hypot(y)
        })
        .collect()
}

/// Renders, featurizes and voxelizes a synthetic sequence.
pub fn prepare_frames(
    scene: &SceneSpec,
    n_frames: usize,
    seed: u64,
    reflec: &ReflecConfig,
    grid: &CylGridSpec,
) -> Result<Vec<PreparedFrame>> {
    let raw = synth_sequence(scene, n_frames, seed);
    raw.par_iter()
        .map(|(pc, img)| {
            let v = voxel_frame(pc, reflec, grid)?;
            let labels = v
                .tensor
                .labels()
                .ok_or_else(|| Error::Validation("synthetic frame without labels".into()))?
                .to_vec();
            let rulebook = Arc::new(Rulebook::build(&v.tensor, 3)?);
            Ok(PreparedFrame {
                rho: center_rho(&v.tensor),
                labels,
                rulebook,
                tensor: v.tensor,
                gray: img.to_gray(scene.sensor_range),
            })
        })
        .collect()
}

/// Everything needed to run a trained network on a new frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub topology: Topology,
    pub params: Vec<f64>,
    pub norm: FeatureNorm,
    pub grid: CylGridSpec,
    pub reflec: ReflecConfig,
}

impl ToyModel {
    /// Featurizes and voxelizes `pc`, then returns the network's voxel predictions.
    pub fn predict_frame(&self, pc: &PointCloud) -> Result<(VoxelPredictions, Voxelized)> {
        let v = voxel_frame(pc, &self.reflec, &self.grid)?;
        if v.tensor.channels() != self.topology.input_channels {
            return Err(Error::Shape(format!(
                "frame yields {} channels, model expects {}",
                v.tensor.channels(),
                self.topology.input_channels
            )));
        }
        let rb = Arc::new(Rulebook::build(&v.tensor, self.topology.kernel_size)?);
        let f = forward(
            &self.topology,
            &self.params,
            &rb,
            self.norm.apply(v.tensor.features()),
        )?;
        let preds = VoxelPredictions::new(
            self.topology.classes,
            f.probs().to_vec(),
            self.topology.embedding_dim(),
            f.embeddings().to_vec(),
            center_rho(&v.tensor),
        )?;
        Ok((preds, v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: Stage,
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub mean_loss: Option<f64>,
    pub mean_supervised: Option<f64>,
    pub mean_consistency: Option<f64>,
    pub mean_contrastive: Option<f64>,
    /// Steps in which at least one class produced a contrastive term.
    pub contrastive_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PseudoSummary {
    pub frames: usize,
    pub per_class: Vec<ClassCount>,
    pub bank_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostSummary {
    pub mean_active_sites: f64,
    pub model: CostReport,
    pub standard_equivalent: CostReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyReport {
    pub config: ToyConfig,
    pub beta: f64,
    pub labeled_frames: Vec<usize>,
    pub stages: Vec<StageReport>,
    pub pseudo: Option<PseudoSummary>,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub teacher_miou: f64,
    /// mIoU of the untrained initial weights.
    pub baseline_miou: f64,
    pub param_count: usize,
    pub cost: CostSummary,
}

/// Voxel-level confusion of `params` on `frames`.
pub fn evaluate(
    topo: &Topology,
    params: &[f64],
    norm: &FeatureNorm,
    frames: &[PreparedFrame],
) -> Result<ConfusionMatrix> {
    let preds: Vec<Vec<u32>> = frames
        .par_iter()
        .map(|f| {
            let fw = forward(topo, params, &f.rulebook, norm.apply(f.tensor.features()))?;
            Ok(fw
                .probs()
                .chunks(topo.classes)
                .map(|r| crate::pseudo::argmax(r) as u32)
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut m = ConfusionMatrix::new(topo.classes);
    for (f, p) in frames.iter().zip(&preds) {
        m.add(&f.labels, p)?;
    }
    Ok(m)
}

#[derive(Debug, Default, Clone, Copy)]
struct StepLosses {
    supervised: f64,
    consistency: f64,
    contrastive: Option<f64>,
    total: f64,
}

struct Trainer<'a> {
    topo: &'a Topology,
    cfg: &'a ToyConfig,
    norm: &'a FeatureNorm,
    student: Vec<f64>,
    teacher: Vec<f64>,
    opt: Sgd,
    rng: ChaCha8Rng,
}

impl Trainer<'_> {
    fn teacher_predictions(&self, f: &PreparedFrame) -> Result<VoxelPredictions> {
        let fw = forward(
            self.topo,
            &self.teacher,
            &f.rulebook,
            self.norm.apply(f.tensor.features()),
        )?;
        VoxelPredictions::new(
            self.topo.classes,
            fw.probs().to_vec(),
            self.topo.embedding_dim(),
            fw.embeddings().to_vec(),
            f.rho.clone(),
        )
    }

    /// Anchors of every class from the student's output on this frame. The
    /// positive center averages the teacher's embeddings of the same voxels, so
    /// it lives in the space the banked negatives come from.
    fn class_anchors(
        &mut self,
        preds: &VoxelPredictions,
        teacher: &VoxelPredictions,
        targets: &[u32],
    ) -> Vec<(ClassAnchors, Vec<usize>)> {
        let mut labels = PseudoLabelSet {
            entropy: vec![0.0; targets.len()],
            ..Default::default()
        };
        for (i, &t) in targets.iter().enumerate() {
            if t == IGNORE_LABEL {
                labels.unreliable.insert(i);
            } else {
                labels.reliable.insert(i, t);
            }
        }
        let mut out = Vec::new();
        for c in 0..self.topo.classes as u32 {
            let mut idx = build_anchor_set(preds, &labels, &self.cfg.contrastive, c);
            if idx.is_empty() {
                continue;
            }
            if idx.len() > self.cfg.contrastive.max_anchors {
                let mut pick = rand::seq::index::sample(
                    &mut self.rng,
                    idx.len(),
                    self.cfg.contrastive.max_anchors,
                )
                .into_vec();
                pick.sort_unstable();
                idx = pick.into_iter().map(|k| idx[k]).collect();
            }
            let anchors: Vec<Vec<f64>> = idx.iter().map(|&i| preds.embedding(i).to_vec()).collect();
            let positive = positive_center(idx.iter().map(|&i| teacher.embedding(i)))
                .expect("nonempty anchors");
            out.push((
                ClassAnchors {
                    class: c,
                    anchors,
                    positive,
                },
                idx,
            ));
        }
        out
    }

    fn step(
        &mut self,
        f: &PreparedFrame,
        targets: &[u32],
        stage: Stage,
        bank: Option<&MemoryBank>,
    ) -> Result<StepLosses> {
        let loss_cfg = self.cfg.loss(stage);
        let c = self.topo.classes;
        let teacher = self.teacher_predictions(f)?;
        let mut fw = forward(
            self.topo,
            &self.student,
            &f.rulebook,
            self.norm.apply(f.tensor.features()),
        )?;
        let probs = fw.probs().to_vec();
        let (ls, mut g) = lovasz_softmax(&probs, c, targets)?;
        let teacher_probs: Vec<f64> = (0..teacher.len())
            .flat_map(|i| teacher.probs(i).to_vec())
            .collect();
        let (lu, gu) = kl_consistency(&probs, &teacher_probs, c)?;
        for (a, b) in g.iter_mut().zip(&gu) {
            *a += loss_cfg.lambda_u * b;
        }
        let mut upstream = vec![(fw.probs, g)];
        let mut lc = None;
        let w = loss_cfg.contrastive_weight();
        if let (Some(bank), true) = (bank, w > 0.0) {
            let d = self.topo.embedding_dim();
            let student = VoxelPredictions::new(
                c,
                probs.clone(),
                d,
                fw.embeddings().to_vec(),
                f.rho.clone(),
            )?;
            let classes = self.class_anchors(&student, &teacher, targets);
            let (anchors, indices): (Vec<ClassAnchors>, Vec<Vec<usize>>) =
                classes.into_iter().unzip();
            let res = infonce_loss(&anchors, bank, &self.cfg.contrastive, &mut self.rng)?;
            if !res.classes.is_empty() {
                let mut ge = vec![0.0; student.len() * d];
                for (grads, idx) in res.anchor_grads.iter().zip(&indices) {
                    for (gr, &i) in grads.iter().zip(idx) {
                        for (slot, v) in ge[i * d..(i + 1) * d].iter_mut().zip(gr) {
                            *slot += w * v;
                        }
                    }
                }
                upstream.push((fw.embedding, ge));
                lc = Some(res.loss);
            }
        }
        let total = super::total_loss(ls, lu, lc.unwrap_or(0.0), &loss_cfg);
        if !total.is_finite() {
            return Err(Error::Divergence(format!(
                "loss became {total} in {stage:?}"
            )));
        }
        let grads = fw.graph.backward(&upstream)?;
        let flat = self.topo.flatten_grads(&grads);
        self.opt.step(&mut self.student, &flat)?;
        ema_update(&mut self.teacher, &self.student, self.cfg.kappa)?;
        Ok(StepLosses {
            supervised: ls,
            consistency: lu,
            contrastive: lc,
            total,
        })
    }
}

fn summarize(stage: Stage, losses: &[StepLosses]) -> StageReport {
    let mean = |f: &dyn Fn(&StepLosses) -> f64| {
        (!losses.is_empty()).then(|| losses.iter().map(f).sum::<f64>() / losses.len() as f64)
    };
    let lcs: Vec<f64> = losses.iter().filter_map(|l| l.contrastive).collect();
    StageReport {
        stage,
        steps: losses.len(),
        first_loss: losses.first().map(|l| l.total),
        last_loss: losses.last().map(|l| l.total),
        mean_loss: mean(&|l| l.total),
        mean_supervised: mean(&|l| l.supervised),
        mean_consistency: mean(&|l| l.consistency),
        mean_contrastive: (!lcs.is_empty()).then(|| lcs.iter().sum::<f64>() / lcs.len() as f64),
        contrastive_steps: lcs.len(),
    }
}

/// Runs the configured stages and reports held-out voxel IoU; also returns the trained teacher.
pub fn run_toy_pipeline(cfg: &ToyConfig) -> Result<(ToyReport, ToyModel)> {
    cfg.validate()?;
    let train = prepare_frames(
        &cfg.scene,
        cfg.train_frames,
        cfg.seed,
        &cfg.reflec,
        &cfg.grid,
    )?;
    let test = prepare_frames(
        &cfg.scene,
        cfg.test_frames,
        cfg.seed ^ 0x7E57_5EED_0000_0001,
        &cfg.reflec,
        &cfg.grid,
    )?;
    let norm = FeatureNorm::fit(&train);
    let topo = Topology::mini(train[0].tensor.channels(), SYNTH_CLASSES, cfg.block);

    // labeled split from the frame sampler, beta calibrated to the requested fraction
    let grays: Vec<GrayImage> = train.iter().map(|f| f.gray.clone()).collect();
    let seqs = [SequenceRedundancy {
        id: "train".into(),
        redundancy: frame_redundancy(&grays)?,
    }];
    let (beta, plan) = calibrate_beta(&seqs, cfg.subset_size, cfg.labeled_fraction)?;
    let labeled: Vec<usize> = plan.get("train").unwrap_or(&[]).to_vec();
    let is_labeled: Vec<bool> = (0..train.len())
        .map(|i| labeled.binary_search(&i).is_ok())
        .collect();

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = topo.init_params(&mut init_rng)?;
    let baseline_miou = evaluate(&topo, &init, &norm, &test)?.miou();
    let mut opt = Sgd::new(init.len(), cfg.lr, cfg.momentum);
    opt.clip_norm = Some(cfg.clip_norm);
    let mut tr = Trainer {
        topo: &topo,
        cfg,
        norm: &norm,
        student: init.clone(),
        teacher: init,
        opt,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)),
    };

    let mut stages = Vec::new();
    if cfg.stages.contains(&1) {
        let mut order = labeled.clone();
        let mut losses = Vec::with_capacity(cfg.steps);
        for s in 0..cfg.steps {
            if s % order.len() == 0 {
                order.shuffle(&mut tr.rng);
            }
            let f = &train[order[s % order.len()]];
            losses.push(tr.step(f, &f.labels, Stage::Train, None)?);
        }
        stages.push(summarize(Stage::Train, &losses));
    }

    let mut pseudo = None;
    let mut targets: Vec<Vec<u32>> = train.iter().map(|f| f.labels.clone()).collect();
    let mut bank = MemoryBank::new(topo.classes, topo.embedding_dim(), cfg.contrastive.capacity);
    if cfg.stages.contains(&2) {
        let mut per_class = vec![ClassCount::default(); topo.classes];
        let preds: Vec<VoxelPredictions> = train
            .iter()
            .map(|f| tr.teacher_predictions(f))
            .collect::<Result<_>>()?;
        for (i, p) in preds.iter().enumerate() {
            let pls = crb_select(
                &entropy_partition(p, cfg.entropy_percentile)?,
                p,
                cfg.crb_keep,
            )?;
            if !is_labeled[i] {
                targets[i] = pls.hard_labels();
                for (acc, c) in per_class.iter_mut().zip(pls.class_counts(p)) {
                    acc.reliable += c.reliable;
                    acc.unreliable += c.unreliable;
                }
            }
            if cfg.use_bank {
                for c in 0..topo.classes as u32 {
                    bank_push_negatives(&mut bank, p, &pls, c)?;
                }
            }
        }
        stages.push(StageReport {
            stage: Stage::PseudoLabel,
            steps: 0,
            first_loss: None,
            last_loss: None,
            mean_loss: None,
            mean_supervised: None,
            mean_consistency: None,
            mean_contrastive: None,
            contrastive_steps: 0,
        });
        pseudo = Some(PseudoSummary {
            frames: train.len() - labeled.len(),
            per_class,
            bank_sizes: (0..topo.classes as u32).map(|c| bank.len(c)).collect(),
        });
    }

    if cfg.stages.contains(&3) {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut losses = Vec::with_capacity(cfg.steps);
        for s in 0..cfg.steps {
            if s % order.len() == 0 {
                order.shuffle(&mut tr.rng);
            }
            let i = order[s % order.len()];
            let bank_ref = cfg.use_bank.then_some(&bank);
            losses.push(tr.step(&train[i], &targets[i], Stage::Distill, bank_ref)?);
            if cfg.use_bank {
                // refresh negatives from the updated teacher
                let p = tr.teacher_predictions(&train[i])?;
                let pls = entropy_partition(&p, cfg.entropy_percentile)?;
                for c in 0..topo.classes as u32 {
                    bank_push_negatives(&mut bank, &p, &pls, c)?;
                }
            }
        }
        stages.push(summarize(Stage::Distill, &losses));
    }

    let conf = evaluate(&topo, &tr.student, &norm, &test)?;
    let teacher_miou = evaluate(&topo, &tr.teacher, &norm, &test)?.miou();
    let teacher_params = tr.teacher;

    let mean_sites = test.iter().map(|f| f.tensor.len()).sum::<usize>() as f64 / test.len() as f64;
    let mean_pairs =
        test.iter().map(|f| f.rulebook.pair_count()).sum::<usize>() as f64 / test.len() as f64;
    let total = |t: &Topology| -> CostReport {
        t.layers()
            .iter()
            .map(|l| {
                let pairs = (l.kernel_size() > 1).then(|| mean_pairs.round() as u64);
                cost(l, mean_sites.round() as u64, pairs)
            })
            .sum()
    };
    let std_topo = Topology {
        block: BlockKind::Standard,
        ..topo.clone()
    };
    let report = ToyReport {
        config: cfg.clone(),
        beta,
        labeled_frames: labeled,
        stages,
        pseudo,
        per_class_iou: conf.iou(),
        miou: conf.miou(),
        teacher_miou,
        baseline_miou,
        param_count: topo.param_count(),
        cost: CostSummary {
            mean_active_sites: mean_sites,
            model: total(&topo),
            standard_equivalent: total(&std_topo),
        },
    };
    let model = ToyModel {
        topology: topo,
        params: teacher_params,
        norm,
        grid: cfg.grid,
        reflec: cfg.reflec.clone(),
    };
    Ok((report, model))
}
