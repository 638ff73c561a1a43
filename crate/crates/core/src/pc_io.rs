//! Point-cloud frames, the KITTI-style binary formats and range-image projection.
//!
//! Frames are stored as packed little-endian `f32` records `(x, y, z, intensity)`,
//! 16 bytes per point. Label files are a parallel stream of little-endian `u32`
//! class ids, one per point. Sequences follow the usual
//! `sequences/<seq>/velodyne/<frame>.bin` layout.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;

pub const POINT_RECORD_BYTES: usize = 16;
pub const LABEL_RECORD_BYTES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Self { x, y, z, intensity }
    }

    /// Euclidean distance from the sensor origin.
    pub fn range(&self) -> f64 {
        let (x, y, z) = (self.x as f64, self.y as f64, self.z as f64);
        (x * x + y * y + z * z).sqrt()
    }

    /// Distance from the sensor axis in the ground plane.
    pub fn rho(&self) -> f64 {
        (self.x as f64).hypot(self.y as f64)
    }

    pub fn azimuth(&self) -> f64 {
        (self.y as f64).atan2(self.x as f64)
    }
}

/// Extra per-point channels appended after `(x, y, z, intensity)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    dim: usize,
    values: Vec<f32>,
}

impl FeatureBlock {
    pub fn new(dim: usize, values: Vec<f32>) -> Result<Self> {
        if dim == 0 || !values.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "feature block of {} values is not a multiple of dim {dim}",
                values.len()
            )));
        }
        Ok(Self { dim, values })
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
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point>,
    labels: Option<Vec<u32>>,
    extra: Option<FeatureBlock>,
    pub frame_id: u32,
    pub sequence_id: u32,
}

impl PointCloud {
    /// Builds a cloud, rejecting non-finite records and clamping intensity into `[0, 1]`.
    pub fn new(mut points: Vec<Point>, labels: Option<Vec<u32>>) -> Result<Self> {
        let bad: Vec<usize> = points
            .iter()
            .enumerate()
            .filter(|(_, p)| {
                !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.intensity.is_finite())
            })
            .map(|(i, _)| i)
            .collect();
        if !bad.is_empty() {
            return Err(Error::NonFinite { indices: bad });
        }
        if let Some(l) = &labels {
            if l.len() != points.len() {
                return Err(Error::Shape(format!(
                    "{} labels for {} points",
                    l.len(),
                    points.len()
                )));
            }
        }
        let mut clamped = 0usize;
        for p in &mut points {
            if !(0.0..=1.0).contains(&p.intensity) {
                p.intensity = p.intensity.clamp(0.0, 1.0);
                clamped += 1;
            }
        }
        if clamped > 0 {
            log::warn!("clamped {clamped} intensities into [0, 1]");
        }
        Ok(Self {
            points,
            labels,
            extra: None,
            frame_id: 0,
            sequence_id: 0,
        })
    }

    pub fn with_ids(mut self, sequence_id: u32, frame_id: u32) -> Self {
        self.sequence_id = sequence_id;
        self.frame_id = frame_id;
        self
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn set_labels(&mut self, labels: Vec<u32>) -> Result<()> {
        if labels.len() != self.points.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} points",
                labels.len(),
                self.points.len()
            )));
        }
        self.labels = Some(labels);
        Ok(())
    }

    pub fn extra(&self) -> Option<&FeatureBlock> {
        self.extra.as_ref()
    }

    /// Number of per-point feature channels: the four base channels plus any extra block.
    pub fn feature_dim(&self) -> usize {
        4 + self.extra.as_ref().map_or(0, |b| b.dim())
    }

    /// Writes point `i`'s full feature vector `(x, y, z, I, extra...)` into `out`.
    pub fn point_features(&self, i: usize, out: &mut Vec<f64>) {
        let p = &self.points[i];
        out.clear();
        out.extend_from_slice(&[p.x as f64, p.y as f64, p.z as f64, p.intensity as f64]);
        if let Some(b) = &self.extra {
            out.extend(b.row(i).iter().map(|&v| v as f64));
        }
    }

    pub(crate) fn with_extra(&self, block: FeatureBlock) -> Result<Self> {
        if self.extra.is_some() {
            return Err(Error::Validation(
                "point cloud already carries an extra feature block".into(),
            ));
        }
        if block.len() != self.points.len() {
            return Err(Error::Shape(format!(
                "feature block has {} rows for {} points",
                block.len(),
                self.points.len()
            )));
        }
        let mut out = self.clone();
        out.extra = Some(block);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameFormat {
    KittiBin,
}

pub fn decode_kitti_bin(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(POINT_RECORD_BYTES) {
        return Err(Error::Format(format!(
            "frame length {} is not a multiple of {POINT_RECORD_BYTES} bytes",
            bytes.len()
        )));
    }
    let points = bytes
        .chunks_exact(POINT_RECORD_BYTES)
        .map(|r| {
            Point::new(
                LittleEndian::read_f32(&r[0..4]),
                LittleEndian::read_f32(&r[4..8]),
                LittleEndian::read_f32(&r[8..12]),
                LittleEndian::read_f32(&r[12..16]),
            )
        })
        .collect();
    PointCloud::new(points, None)
}

pub fn encode_kitti_bin(pc: &PointCloud) -> Vec<u8> {
    let mut out = vec![0u8; pc.len() * POINT_RECORD_BYTES];
    for (p, r) in pc
        .points
        .iter()
        .zip(out.chunks_exact_mut(POINT_RECORD_BYTES))
    {
        LittleEndian::write_f32(&mut r[0..4], p.x);
        LittleEndian::write_f32(&mut r[4..8], p.y);
        LittleEndian::write_f32(&mut r[8..12], p.z);
        LittleEndian::write_f32(&mut r[12..16], p.intensity);
    }
    out
}

pub fn load_frame(path: &Path, format: FrameFormat) -> Result<PointCloud> {
    match format {
        FrameFormat::KittiBin => {
            let bytes = fs::read(path)?;
            decode_kitti_bin(&bytes)
        }
    }
}

pub fn save_frame(path: &Path, pc: &PointCloud) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_kitti_bin(pc))?;
    Ok(())
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<u32>> {
    if !bytes.len().is_multiple_of(LABEL_RECORD_BYTES) {
        return Err(Error::Format(format!(
            "label length {} is not a multiple of {LABEL_RECORD_BYTES} bytes",
            bytes.len()
        )));
    }
    let mut labels = vec![0u32; bytes.len() / LABEL_RECORD_BYTES];
    LittleEndian::read_u32_into(bytes, &mut labels);
    Ok(labels)
}

pub fn encode_labels(labels: &[u32]) -> Vec<u8> {
    let mut out = vec![0u8; labels.len() * LABEL_RECORD_BYTES];
    LittleEndian::write_u32_into(labels, &mut out);
    out
}

pub fn load_labels(path: &Path) -> Result<Vec<u32>> {
    decode_labels(&fs::read(path)?)
}

pub fn save_labels(path: &Path, labels: &[u32]) -> Result<()> {
    fs::write(path, encode_labels(labels))?;
    Ok(())
}

/// Paths of one sequence inside a `sequences/` root.
#[derive(Debug, Clone)]
pub struct SequenceLayout {
    pub root: PathBuf,
    pub sequence: String,
}

impl SequenceLayout {
    pub fn new(root: impl Into<PathBuf>, sequence: impl Into<String>) -> Self {
        Self {
            root: root.into(),
            sequence: sequence.into(),
        }
    }

    pub fn dir(&self) -> PathBuf {
        self.root.join(&self.sequence)
    }

    pub fn velodyne_dir(&self) -> PathBuf {
        self.dir().join("velodyne")
    }

    pub fn labels_dir(&self) -> PathBuf {
        self.dir().join("labels")
    }

    pub fn image_dir(&self) -> PathBuf {
        self.dir().join("image")
    }

    pub fn frame_path(&self, frame: usize) -> PathBuf {
        self.velodyne_dir().join(format!("{frame:06}.bin"))
    }

    pub fn label_path(&self, frame: usize) -> PathBuf {
        self.labels_dir().join(format!("{frame:06}.label"))
    }

    pub fn image_path(&self, frame: usize) -> PathBuf {
        self.image_dir().join(format!("{frame:06}.pgm"))
    }

    /// Frame files under `velodyne/`, sorted by name.
    pub fn frame_files(&self) -> Result<Vec<PathBuf>> {
        sorted_files(&self.velodyne_dir(), "bin")
    }

    pub fn image_files(&self) -> Result<Vec<PathBuf>> {
        sorted_files(&self.image_dir(), "pgm")
    }
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

/// Names of the sequence directories below a `sequences/` root, sorted.
pub fn list_sequences(root: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort();
    Ok(names)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl RangeImage {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if width * height != values.len() {
            return Err(Error::Shape(format!(
                "{width}x{height} range image given {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation(
                "range values must be finite and >= 0".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn returns(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }

    /// Quantizes ranges onto an 8-bit grid, saturating at `max_range`.
    pub fn to_gray(&self, max_range: f64) -> GrayImage {
        let data = self
            .values
            .iter()
            .map(|&r| ((r as f64).min(max_range) / max_range * 255.0).round() as u8)
            .collect();
        GrayImage::new(self.width, self.height, data).expect("dimensions carried over")
    }
}

/// Resolution and vertical field of view (degrees) of a spherical projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeProjection {
    pub width: usize,
    pub height: usize,
    pub vfov_deg: (f64, f64),
}

impl Default for RangeProjection {
    fn default() -> Self {
        Self {
            width: 512,
            height: 64,
            vfov_deg: (-25.0, 3.0),
        }
    }
}

impl RangeProjection {
    pub fn project(&self, pc: &PointCloud) -> Result<RangeImage> {
        project_range_image(pc, self.width, self.height, self.vfov_deg)
    }
}

/// Spherical projection: azimuth selects the column, elevation the row, nearest return wins.
///
/// Elevations outside `(vfov.0, vfov.1]` and points at the origin are dropped.
pub fn project_range_image(
    pc: &PointCloud,
    width: usize,
    height: usize,
    vfov_deg: (f64, f64),
) -> Result<RangeImage> {
    let (lo, hi) = vfov_deg;
    if width == 0 || height == 0 {
        return Err(Error::Validation(format!(
            "range image must be at least 1x1, got {width}x{height}"
        )));
    }
    if !(lo < hi) {
        return Err(Error::Validation(format!(
            "vertical field of view must satisfy min < max, got ({lo}, {hi})"
        )));
    }
    let mut img = RangeImage::zeros(width, height);
    let two_pi = 2.0 * std::f64::consts::PI;
    for p in pc.points() {
        let r = p.range();
        if r <= 0.0 {
            continue;
        }
        let elevation = (p.z as f64).atan2(p.rho()).to_degrees();
        let v = (hi - elevation) / (hi - lo) * height as f64;
        if !(0.0..height as f64).contains(&v) {
            continue;
        }
        let row = v.floor() as usize;
        let u = (p.azimuth() + std::f64::consts::PI) / two_pi * width as f64;
        let col = (u.floor() as usize) % width;
        let px = &mut img.values[row * width + col];
        let rf = r as f32;
        if *px == 0.0 || rf < *px {
            *px = rf;
        }
    }
    Ok(img)
}
