//! Distance-normalized reflectivity and multi-resolution reflectivity histograms.
//!
//! For every scale the ground plane is split into `(n_rho, n_phi)` cylindrical
//! columns. Each column gets a histogram of normalized reflectivity over
//! `n_bins` equal bins of `[0, 1)`, divided by its largest count, and every point
//! receives the histograms of its columns concatenated over scales.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pc_io::{FeatureBlock, PointCloud};

/// Added to the frame maximum so normalized values stay below 1.
pub const NORMALIZE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReflecSource {
    /// `I * r^2`, normalized per frame.
    #[default]
    Reflectivity,
    /// Raw intensity, for ablations.
    Intensity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReflecConfig {
    pub n_bins: usize,
    /// `(n_rho, n_phi)` column counts, one pair per scale.
    pub bin_grids: Vec<(usize, usize)>,
    pub source: ReflecSource,
}

impl Default for ReflecConfig {
    fn default() -> Self {
        Self {
            n_bins: 10,
            bin_grids: vec![(20, 40), (40, 80), (80, 120)],
            source: ReflecSource::Reflectivity,
        }
    }
}

impl ReflecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_bins == 0 {
            return Err(Error::Validation("n_bins must be >= 1".into()));
        }
        if self.bin_grids.is_empty() {
            return Err(Error::Validation(
                "at least one bin grid is required".into(),
            ));
        }
        if let Some(g) = self.bin_grids.iter().find(|g| g.0 == 0 || g.1 == 0) {
            return Err(Error::Validation(format!(
                "bin grid {g:?} has a zero count"
            )));
        }
        Ok(())
    }

    /// Channels appended per point.
    pub fn feature_dim(&self) -> usize {
        self.n_bins * self.bin_grids.len()
    }
}

/// Per-point histogram block, row-major `n_points x dim`, entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflecFeatures {
    dim: usize,
    values: Vec<f32>,
}

impl ReflecFeatures {
    pub fn new(dim: usize, values: Vec<f32>) -> Result<Self> {
        if dim == 0 || !values.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "{} values do not form rows of {dim}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!(
                "feature value {v} outside [0, 1]"
            )));
        }
        Ok(Self { dim, values })
    }

    pub fn zeros(n_points: usize, dim: usize) -> Self {
        Self {
            dim,
            values: vec![0.0; n_points * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Little-endian `f32` rows, the on-disk `.feat` layout.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(dim: usize, bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(4) {
            return Err(Error::Format(format!(
                "{} bytes is not a whole number of f32",
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(dim, values)
    }
}

/// `I * (x^2 + y^2 + z^2)` per point.
pub fn reflectivity(pc: &PointCloud) -> Vec<f64> {
    pc.points()
        .iter()
        .map(|p| {
            let r = p.range();
            p.intensity as f64 * r * r
        })
        .collect()
}

/// Divides by `max + eps` so every value lands in `[0, 1)`.
pub fn normalize_reflectivity(r: &[f64]) -> Vec<f64> {
    let max = r.iter().copied().fold(0.0f64, f64::max);
    let scale = max + NORMALIZE_EPS;
    r.iter().map(|&v| v / scale).collect()
}

fn value_bin(v: f64, n_bins: usize) -> usize {
    ((v * n_bins as f64).floor() as usize).min(n_bins - 1)
}

/// Histogram features for every point from per-point values already scaled to `[0, 1)`.
///
/// Values equal to 1 fall into the last bin.
pub fn coarse_histograms(
    pc: &PointCloud,
    values: &[f64],
    cfg: &ReflecConfig,
) -> Result<ReflecFeatures> {
    cfg.validate()?;
    if values.len() != pc.len() {
        return Err(Error::Shape(format!(
            "{} values for {} points",
            values.len(),
            pc.len()
        )));
    }
    if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain(format!(
            "histogram input {} at point {i} is outside [0, 1]",
            values[i]
        )));
    }
    let n = pc.len();
    let nb = cfg.n_bins;
    let dim = cfg.feature_dim();
    let mut out = vec![0.0f32; n * dim];
    if n == 0 {
        return Ok(ReflecFeatures { dim, values: out });
    }

    let rhos: Vec<f64> = pc.points().iter().map(|p| p.rho()).collect();
    let phis: Vec<f64> = pc.points().iter().map(|p| p.azimuth()).collect();
    let rho_lo = rhos.iter().copied().fold(f64::INFINITY, f64::min);
    let rho_hi = rhos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let rho_span = rho_hi - rho_lo;
    let vbins: Vec<usize> = values.iter().map(|&v| value_bin(v, nb)).collect();

    for (s, &(n_rho, n_phi)) in cfg.bin_grids.iter().enumerate() {
        let column = |i: usize| {
            let r = if rho_span > 0.0 {
                (((rhos[i] - rho_lo) / rho_span * n_rho as f64).floor() as usize).min(n_rho - 1)
            } else {
                0
            };
            let t = (phis[i] + std::f64::consts::PI) / std::f64::consts::TAU;
            let f = ((t * n_phi as f64).floor() as usize) % n_phi;
            r * n_phi + f
        };
        let cols: Vec<usize> = (0..n).map(column).collect();
        let mut hist = vec![0u32; n_rho * n_phi * nb];
        for i in 0..n {
            hist[cols[i] * nb + vbins[i]] += 1;
        }
        let normalized: Vec<f32> = hist
            .chunks(nb)
            .flat_map(|h| {
                let max = *h.iter().max().expect("n_bins >= 1");
                h.iter().map(move |&c| {
                    if max == 0 {
                        0.0
                    } else {
                        (c as f64 / max as f64) as f32
                    }
                })
            })
            .collect();
        for i in 0..n {
            let src = &normalized[cols[i] * nb..(cols[i] + 1) * nb];
            out[i * dim + s * nb..i * dim + (s + 1) * nb].copy_from_slice(src);
        }
    }
    Ok(ReflecFeatures { dim, values: out })
}

/// Source values, normalization and histograms in one step.
pub fn featurize(pc: &PointCloud, cfg: &ReflecConfig) -> Result<ReflecFeatures> {
    let values = match cfg.source {
        ReflecSource::Reflectivity => normalize_reflectivity(&reflectivity(pc)),
        ReflecSource::Intensity => pc.points().iter().map(|p| p.intensity as f64).collect(),
    };
    coarse_histograms(pc, &values, cfg)
}

/// Appends the histogram block to every point's features. A cloud can be augmented once.
pub fn augment(pc: &PointCloud, f: &ReflecFeatures) -> Result<PointCloud> {
    if f.len() != pc.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} points",
            f.len(),
            pc.len()
        )));
    }
    pc.with_extra(FeatureBlock::new(f.dim, f.values.clone())?)
}
