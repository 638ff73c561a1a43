//! Spatio-temporal redundant frame downsampling.
//!
//! Each sequence is cut into consecutive subsets of `q` frames. A frame's
//! redundancy is the SSIM between its image and the next frame's (the last
//! frame of a sequence reuses the pair with its predecessor). Per subset, the
//! mean redundancy `m` sets a sampling budget `k = ceil(exp(-beta * m) * q)`, and
//! the `k` least redundant frames are kept.

mod ssim;

pub use ssim::{ssim, ssim_with_window, DEFAULT_WINDOW, DYNAMIC_RANGE, K1, K2};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Decay coefficients paired with the 5%, 10%, 20%, 40% and 100% labeled splits.
pub const REFERENCE_BETAS: [f64; 5] = [7.45, 5.72, 4.00, 2.28, 0.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RedundancySource {
    GrayscaleImage,
    RangeImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrfdConfig {
    pub subset_size: usize,
    pub beta: f64,
    pub redundancy_source: RedundancySource,
}

impl Default for StrfdConfig {
    fn default() -> Self {
        Self {
            subset_size: 20,
            beta: REFERENCE_BETAS[0],
            redundancy_source: RedundancySource::RangeImage,
        }
    }
}

impl StrfdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subset_size == 0 {
            return Err(Error::Validation("subset size must be >= 1".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Validation(format!(
                "beta must be finite and >= 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Chosen frame indices per sequence id; serializes as `{ "<seq>": [indices...] }`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SamplingPlan {
    pub entries: BTreeMap<String, Vec<usize>>,
}

impl SamplingPlan {
    pub fn total(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn get(&self, seq: &str) -> Option<&[usize]> {
        self.entries.get(seq).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub id: String,
    pub frames: Vec<GrayImage>,
}

/// Per-frame redundancy of one sequence, already computed.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRedundancy {
    pub id: String,
    pub redundancy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsetDecision {
    pub start: usize,
    pub len: usize,
    pub mean_redundancy: f64,
    pub budget: usize,
    pub chosen: Vec<usize>,
}

/// Decaying sampling fraction `exp(-beta * x)` for a redundancy `x` in `[0, 1]`.
pub fn supervisor(x: f64, beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!(
            "redundancy must lie in [0, 1], got {x}"
        )));
    }
    if !(beta >= 0.0) {
        return Err(Error::Domain(format!("beta must be >= 0, got {beta}")));
    }
    Ok((-beta * x).exp())
}

/// SSIM between each frame and its successor, clamped to `[0, 1]`; the final
/// frame repeats its predecessor's pair and a lone frame scores 0.
pub fn frame_redundancy(frames: &[GrayImage]) -> Result<Vec<f64>> {
    let p = frames.len();
    if p < 2 {
        return Ok(vec![0.0; p]);
    }
    let pairs: Vec<f64> = (0..p - 1)
        .into_par_iter()
        .map(|j| ssim(&frames[j], &frames[j + 1]).map(|s| s.clamp(0.0, 1.0)))
        .collect::<Result<_>>()?;
    let mut out = pairs.clone();
    out.push(pairs[p - 2]);
    Ok(out)
}

/// Subset-by-subset selection on precomputed redundancies.
pub fn plan_subsets(redundancy: &[f64], cfg: &StrfdConfig) -> Result<Vec<SubsetDecision>> {
    cfg.validate()?;
    let q = cfg.subset_size;
    let mut out = Vec::with_capacity(redundancy.len().div_ceil(q));
    for (i, chunk) in redundancy.chunks(q).enumerate() {
        let start = i * q;
        let mean = (chunk.iter().sum::<f64>() / chunk.len() as f64).clamp(0.0, 1.0);
        let budget =
            ((supervisor(mean, cfg.beta)? * q as f64).ceil() as usize).clamp(1, chunk.len());
        let mut order: Vec<usize> = (0..chunk.len()).collect();
        // least redundant first; stable sort keeps lower indices ahead on ties
        order.sort_by(|&a, &b| chunk[a].total_cmp(&chunk[b]));
        let mut chosen: Vec<usize> = order[..budget].iter().map(|&j| start + j).collect();
        chosen.sort_unstable();
        out.push(SubsetDecision {
            start,
            len: chunk.len(),
            mean_redundancy: mean,
            budget,
            chosen,
        });
    }
    Ok(out)
}

pub fn plan_from_redundancy(
    sequences: &[SequenceRedundancy],
    cfg: &StrfdConfig,
) -> Result<SamplingPlan> {
    let mut plan = SamplingPlan::default();
    for s in sequences {
        if s.redundancy.is_empty() {
            return Err(Error::Validation(format!(
                "sequence {} has no frames",
                s.id
            )));
        }
        let chosen = plan_subsets(&s.redundancy, cfg)?
            .into_iter()
            .flat_map(|d| d.chosen)
            .collect();
        plan.entries.insert(s.id.clone(), chosen);
    }
    Ok(plan)
}

pub fn redundancies(sequences: &[FrameSequence]) -> Result<Vec<SequenceRedundancy>> {
    sequences
        .iter()
        .map(|s| {
            if s.frames.is_empty() {
                return Err(Error::Validation(format!(
                    "sequence {} has no frames",
                    s.id
                )));
            }
            Ok(SequenceRedundancy {
                id: s.id.clone(),
                redundancy: frame_redundancy(&s.frames)?,
            })
        })
        .collect()
}

/// Frame selection over every sequence.
pub fn plan(sequences: &[FrameSequence], cfg: &StrfdConfig) -> Result<SamplingPlan> {
    cfg.validate()?;
    plan_from_redundancy(&redundancies(sequences)?, cfg)
}

/// Finds `beta` by bisection so the plan keeps as close to `target_fraction` of all
/// frames as the subset structure allows. Returns the chosen `beta` and its plan.
pub fn calibrate_beta(
    sequences: &[SequenceRedundancy],
    subset_size: usize,
    target_fraction: f64,
) -> Result<(f64, SamplingPlan)> {
    if !(target_fraction > 0.0 && target_fraction <= 1.0) {
        return Err(Error::Validation(format!(
            "target fraction must lie in (0, 1], got {target_fraction}"
        )));
    }
    let total: usize = sequences.iter().map(|s| s.redundancy.len()).sum();
    let target = (target_fraction * total as f64).round() as i64;
    let run = |beta: f64| -> Result<SamplingPlan> {
        let cfg = StrfdConfig {
            subset_size,
            beta,
            redundancy_source: RedundancySource::RangeImage,
        };
        plan_from_redundancy(sequences, &cfg)
    };
    let at_zero = run(0.0)?;
    if at_zero.total() as i64 <= target {
        return Ok((0.0, at_zero));
    }
    let mut lo = 0.0;
    let mut lo_plan = at_zero;
    let mut hi = 1.0;
    let mut hi_plan = run(hi)?;
    while hi_plan.total() as i64 > target {
        if hi > 1e6 {
            log::warn!(
                "target of {target} frames is below the one-per-subset floor; keeping {}",
                hi_plan.total()
            );
            return Ok((hi, hi_plan));
        }
        lo = hi;
        lo_plan = hi_plan;
        hi *= 2.0;
        hi_plan = run(hi)?;
    }
    for _ in 0..200 {
        if hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let p = run(mid)?;
        if p.total() as i64 > target {
            lo = mid;
            lo_plan = p;
        } else {
            hi = mid;
            hi_plan = p;
        }
    }
    let lo_err = (lo_plan.total() as i64 - target).abs();
    let hi_err = (hi_plan.total() as i64 - target).abs();
    Ok(if lo_err < hi_err {
        (lo, lo_plan)
    } else {
        (hi, hi_plan)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PassiveMode {
    Uniform,
    Random,
}

/// Redundancy-blind baselines: `ceil(fraction * n)` evenly spaced or seeded-random indices.
pub fn passive_baselines(
    n_frames: usize,
    fraction: f64,
    mode: PassiveMode,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Validation(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    // tolerance keeps e.g. 0.1 * 30 from rounding up to 4
    let k = ((fraction * n_frames as f64 - 1e-9).ceil().max(0.0) as usize).min(n_frames);
    let mut idx: Vec<usize> = match mode {
        PassiveMode::Uniform => (0..k).map(|i| i * n_frames / k).collect(),
        PassiveMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, n_frames, k).into_vec()
        }
    };
    idx.sort_unstable();
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(q: usize, beta: f64) -> StrfdConfig {
        StrfdConfig {
            subset_size: q,
            beta,
            redundancy_source: RedundancySource::GrayscaleImage,
        }
    }

    #[test]
    fn supervisor_values() {
        assert_eq!(supervisor(0.0, 7.45).unwrap(), 1.0);
        for x in [0.0, 0.3, 1.0] {
            assert_eq!(supervisor(x, 0.0).unwrap(), 1.0);
        }
        let v = supervisor(1.0, 7.45).unwrap();
        assert!((v - 5.82e-4).abs() < 1e-6, "{v}");
        assert!((v - std::f64::consts::E.powf(-7.45)).abs() < 1e-15);
        assert!(matches!(supervisor(1.5, 1.0), Err(Error::Domain(_))));
        assert!(matches!(supervisor(-0.1, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn identical_frames_keep_one_per_subset() {
        let img = GrayImage::from_fn(16, 16, |r, c| (r * 16 + c) as u8);
        let seq = FrameSequence {
            id: "00".into(),
            frames: vec![img; 30],
        };
        let p = plan(&[seq], &cfg(10, 7.45)).unwrap();
        assert_eq!(p.get("00").unwrap(), &[0, 10, 20]);
    }

    #[test]
    fn zero_beta_keeps_everything() {
        let red = vec![0.9, 1.0, 0.2, 0.5, 0.7];
        let p = plan_from_redundancy(
            &[SequenceRedundancy {
                id: "a".into(),
                redundancy: red,
            }],
            &cfg(2, 0.0),
        )
        .unwrap();
        assert_eq!(p.get("a").unwrap(), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn least_redundant_frames_win_with_low_index_ties() {
        let red = vec![0.9, 0.1, 0.5, 0.1];
        let d = plan_subsets(&red, &cfg(4, 1.0)).unwrap();
        // mean 0.4 -> exp(-0.4) * 4 = 2.68 -> 3 frames
        assert_eq!(d[0].budget, 3);
        assert_eq!(d[0].chosen, vec![1, 2, 3]);
        let d = plan_subsets(&[0.5, 0.5, 0.5, 0.5], &cfg(4, 2.0)).unwrap();
        assert_eq!(d[0].budget, 2);
        assert_eq!(d[0].chosen, vec![0, 1]);
    }

    #[test]
    fn partial_last_subset() {
        let d = plan_subsets(&[0.0; 7], &cfg(5, 3.0)).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[1].len, 2);
        assert_eq!(d[1].chosen, vec![5, 6]);
    }

    #[test]
    fn empty_sequence_rejected() {
        let seq = FrameSequence {
            id: "x".into(),
            frames: vec![],
        };
        assert!(plan(&[seq], &cfg(4, 1.0)).is_err());
        assert!(cfg(0, 1.0).validate().is_err());
        assert!(cfg(3, -1.0).validate().is_err());
    }

    #[test]
    fn uniform_baseline() {
        assert_eq!(
            passive_baselines(10, 0.5, PassiveMode::Uniform, 0).unwrap(),
            vec![0, 2, 4, 6, 8]
        );
        assert_eq!(
            passive_baselines(7, 1.0, PassiveMode::Uniform, 0).unwrap(),
            (0..7).collect::<Vec<_>>()
        );
        assert_eq!(
            passive_baselines(30, 0.1, PassiveMode::Uniform, 0)
                .unwrap()
                .len(),
            3
        );
        assert!(passive_baselines(10, 0.0, PassiveMode::Uniform, 0).is_err());
    }

    #[test]
    fn random_baseline_is_seeded() {
        let a = passive_baselines(100, 0.2, PassiveMode::Random, 9).unwrap();
        let b = passive_baselines(100, 0.2, PassiveMode::Random, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(
            passive_baselines(9, 1.0, PassiveMode::Random, 1).unwrap(),
            (0..9).collect::<Vec<_>>()
        );
    }

    #[test]
    fn plan_json_shape() {
        let mut p = SamplingPlan::default();
        p.entries.insert("00".into(), vec![1, 4]);
        assert_eq!(serde_json::to_string(&p).unwrap(), r#"{"00":[1,4]}"#);
    }

    #[test]
    fn calibration_hits_reachable_targets() {
        let red: Vec<f64> = (0..200).map(|i| ((i * 37) % 100) as f64 / 100.0).collect();
        let seqs = [SequenceRedundancy {
            id: "s".into(),
            redundancy: red,
        }];
        let (beta, p) = calibrate_beta(&seqs, 20, 0.3).unwrap();
        assert!(beta > 0.0);
        assert!((p.total() as i64 - 60).abs() <= 1, "{}", p.total());
        let (beta, p) = calibrate_beta(&seqs, 20, 1.0).unwrap();
        assert_eq!(beta, 0.0);
        assert_eq!(p.total(), 200);
    }
}
