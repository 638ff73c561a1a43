//! Cylindrical voxel grids and the sparse voxel tensor shared by every convolution.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::io::{Cursor, Read};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pc_io::{Point, PointCloud};

/// Largest dense expansion `densify` agrees to build, in scalars.
pub const DENSE_LIMIT: usize = 10_000_000;

const MAGIC: &[u8; 4] = b"L3DV";
const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelCoord {
    pub rho: u32,
    pub phi: u32,
    pub z: u32,
}

impl VoxelCoord {
    pub const fn new(rho: u32, phi: u32, z: u32) -> Self {
        Self { rho, phi, z }
    }
}

/// Uniform partition of `[0, rho_max) x [-pi, pi) x [z_min, z_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CylGridSpec {
    pub n_rho: u32,
    pub n_phi: u32,
    pub n_z: u32,
    pub rho_max: f64,
    pub z_range: (f64, f64),
}

impl CylGridSpec {
    pub fn new(
        n_rho: u32,
        n_phi: u32,
        n_z: u32,
        rho_max: f64,
        z_range: (f64, f64),
    ) -> Result<Self> {
        let g = Self {
            n_rho,
            n_phi,
            n_z,
            rho_max,
            z_range,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rho == 0 || self.n_phi == 0 || self.n_z == 0 {
            return Err(Error::Validation(format!(
                "grid counts must be >= 1: {self:?}"
            )));
        }
        if !(self.rho_max > 0.0 && self.rho_max.is_finite()) {
            return Err(Error::Validation(format!(
                "rho_max must be > 0, got {}",
                self.rho_max
            )));
        }
        if !(self.z_range.0 < self.z_range.1) {
            return Err(Error::Validation(format!(
                "z range must satisfy min < max, got {:?}",
                self.z_range
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.n_rho as usize, self.n_phi as usize, self.n_z as usize]
    }

    pub fn num_cells(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn contains(&self, c: VoxelCoord) -> bool {
        c.rho < self.n_rho && c.phi < self.n_phi && c.z < self.n_z
    }

    /// Half-open binning: a value on a bin edge belongs to the upper bin.
    pub fn locate(&self, p: &Point) -> Option<VoxelCoord> {
        let rho = p.rho();
        let z = p.z as f64;
        let (z0, z1) = self.z_range;
        if rho >= self.rho_max || z < z0 || z >= z1 {
            return None;
        }
        let i_rho = ((rho * self.n_rho as f64 / self.rho_max).floor() as u32).min(self.n_rho - 1);
        // atan2 returns (-pi, pi]; pi is the same direction as -pi
        let u = (p.azimuth() + PI) * self.n_phi as f64 / (2.0 * PI);
        let i_phi = (u.floor() as u32) % self.n_phi;
        let i_z = (((z - z0) * self.n_z as f64 / (z1 - z0)).floor() as u32).min(self.n_z - 1);
        Some(VoxelCoord::new(i_rho, i_phi, i_z))
    }

    /// Cylindrical center of a voxel as `(rho, phi, z)`.
    pub fn center(&self, c: VoxelCoord) -> (f64, f64, f64) {
        let drho = self.rho_max / self.n_rho as f64;
        let dphi = 2.0 * PI / self.n_phi as f64;
        let dz = (self.z_range.1 - self.z_range.0) / self.n_z as f64;
        (
            (c.rho as f64 + 0.5) * drho,
            -PI + (c.phi as f64 + 0.5) * dphi,
            self.z_range.0 + (c.z as f64 + 0.5) * dz,
        )
    }
}

/// Active voxels in ascending coordinate order, each carrying `channels` features.
#[derive(Debug, Clone)]
pub struct SparseVoxelTensor {
    grid: CylGridSpec,
    channels: usize,
    coords: Vec<VoxelCoord>,
    features: Vec<f64>,
    labels: Option<Vec<u32>>,
    index: HashMap<VoxelCoord, usize>,
}

impl PartialEq for SparseVoxelTensor {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid
            && self.channels == other.channels
            && self.coords == other.coords
            && self.features == other.features
            && self.labels == other.labels
    }
}

impl SparseVoxelTensor {
    pub fn empty(grid: CylGridSpec, channels: usize) -> Self {
        Self {
            grid,
            channels,
            coords: Vec::new(),
            features: Vec::new(),
            labels: None,
            index: HashMap::new(),
        }
    }

    /// Builds a tensor from unordered entries; rejects duplicates, out-of-grid
    /// coordinates, wrong feature lengths and non-finite values.
    pub fn from_entries(
        grid: CylGridSpec,
        channels: usize,
        mut entries: Vec<(VoxelCoord, Vec<f64>)>,
    ) -> Result<Self> {
        entries.sort_by_key(|e| e.0);
        let mut coords = Vec::with_capacity(entries.len());
        let mut features = Vec::with_capacity(entries.len() * channels);
        for (c, f) in entries {
            if f.len() != channels {
                return Err(Error::Shape(format!(
                    "voxel {c:?} has {} features, expected {channels}",
                    f.len()
                )));
            }
            coords.push(c);
            features.extend(f);
        }
        Self::from_sorted(grid, channels, coords, features, None)
    }

    pub fn from_sorted(
        grid: CylGridSpec,
        channels: usize,
        coords: Vec<VoxelCoord>,
        features: Vec<f64>,
        labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        grid.validate()?;
        if features.len() != coords.len() * channels {
            return Err(Error::Shape(format!(
                "{} feature values for {} sites x {channels} channels",
                features.len(),
                coords.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != coords.len() {
                return Err(Error::Shape(format!(
                    "{} voxel labels for {} sites",
                    l.len(),
                    coords.len()
                )));
            }
        }
        for w in coords.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Validation(format!(
                    "coordinates must be strictly increasing; found {:?} before {:?}",
                    w[0], w[1]
                )));
            }
        }
        if let Some(c) = coords.iter().find(|c| !grid.contains(**c)) {
            return Err(Error::Validation(format!(
                "voxel {c:?} lies outside the grid"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("voxel features must be finite".into()));
        }
        let index = coords.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Ok(Self {
            grid,
            channels,
            coords,
            features,
            labels,
            index,
        })
    }

    /// Same active set and labels, new features.
    pub fn with_features(&self, channels: usize, features: Vec<f64>) -> Result<Self> {
        if features.len() != self.coords.len() * channels {
            return Err(Error::Shape(format!(
                "{} feature values for {} sites x {channels} channels",
                features.len(),
                self.coords.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("voxel features must be finite".into()));
        }
        Ok(Self {
            grid: self.grid,
            channels,
            coords: self.coords.clone(),
            features,
            labels: self.labels.clone(),
            index: self.index.clone(),
        })
    }

    pub fn with_labels(mut self, labels: Option<Vec<u32>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != self.coords.len() {
                return Err(Error::Shape(format!(
                    "{} voxel labels for {} sites",
                    l.len(),
                    self.coords.len()
                )));
            }
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn grid(&self) -> &CylGridSpec {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature(&self, site: usize) -> &[f64] {
        &self.features[site * self.channels..(site + 1) * self.channels]
    }

    pub fn index_of(&self, c: VoxelCoord) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn get(&self, c: VoxelCoord) -> Option<&[f64]> {
        self.index_of(c).map(|i| self.feature(i))
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u16::<LittleEndian>(FORMAT_VERSION).unwrap();
        for n in [self.grid.n_rho, self.grid.n_phi, self.grid.n_z] {
            out.write_u32::<LittleEndian>(n).unwrap();
        }
        for v in [self.grid.rho_max, self.grid.z_range.0, self.grid.z_range.1] {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
        out.write_u32::<LittleEndian>(self.channels as u32).unwrap();
        out.write_u64::<LittleEndian>(self.coords.len() as u64)
            .unwrap();
        out.write_u8(self.labels.is_some() as u8).unwrap();
        for c in &self.coords {
            for v in [c.rho, c.phi, c.z] {
                out.write_u32::<LittleEndian>(v).unwrap();
            }
        }
        for &v in &self.features {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
        if let Some(labels) = &self.labels {
            for &l in labels {
                out.write_u32::<LittleEndian>(l).unwrap();
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("truncated sparse tensor: {e}"));
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a sparse voxel tensor file".into()));
        }
        let version = r.read_u16::<LittleEndian>().map_err(fmt)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported tensor format version {version}"
            )));
        }
        let n_rho = r.read_u32::<LittleEndian>().map_err(fmt)?;
        let n_phi = r.read_u32::<LittleEndian>().map_err(fmt)?;
        let n_z = r.read_u32::<LittleEndian>().map_err(fmt)?;
        let rho_max = r.read_f64::<LittleEndian>().map_err(fmt)?;
        let z0 = r.read_f64::<LittleEndian>().map_err(fmt)?;
        let z1 = r.read_f64::<LittleEndian>().map_err(fmt)?;
        let grid = CylGridSpec::new(n_rho, n_phi, n_z, rho_max, (z0, z1))?;
        let channels = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
        let n = r.read_u64::<LittleEndian>().map_err(fmt)? as usize;
        let has_labels = r.read_u8().map_err(fmt)? != 0;
        let expected = n * 12 + n * channels * 8 + if has_labels { n * 4 } else { 0 };
        if bytes.len() - r.position() as usize != expected {
            return Err(Error::Format(
                "sparse tensor payload length mismatch".into(),
            ));
        }
        let mut coords = Vec::with_capacity(n);
        for _ in 0..n {
            coords.push(VoxelCoord::new(
                r.read_u32::<LittleEndian>().map_err(fmt)?,
                r.read_u32::<LittleEndian>().map_err(fmt)?,
                r.read_u32::<LittleEndian>().map_err(fmt)?,
            ));
        }
        let mut features = vec![0.0; n * channels];
        r.read_f64_into::<LittleEndian>(&mut features)
            .map_err(fmt)?;
        let labels = if has_labels {
            let mut l = vec![0u32; n];
            r.read_u32_into::<LittleEndian>(&mut l).map_err(fmt)?;
            Some(l)
        } else {
            None
        };
        Self::from_sorted(grid, channels, coords, features, labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reducer {
    Mean,
    Max,
}

#[derive(Debug, Clone)]
pub struct Voxelized {
    pub tensor: SparseVoxelTensor,
    /// Points outside the grid extent.
    pub dropped: usize,
    /// Active-site index of every input point, `None` when dropped.
    pub point_sites: Vec<Option<usize>>,
}

/// Bins points into cylindrical voxels and reduces their full feature vectors.
///
/// Voxel labels are the majority of point labels, ties going to the smaller id.
pub fn voxelize(pc: &PointCloud, grid: &CylGridSpec, reducer: Reducer) -> Result<Voxelized> {
    grid.validate()?;
    let channels = pc.feature_dim();
    let located: Vec<Option<VoxelCoord>> = pc.points().iter().map(|p| grid.locate(p)).collect();
    let mut coords: Vec<VoxelCoord> = located.iter().flatten().copied().collect();
    coords.sort_unstable();
    coords.dedup();
    let index: HashMap<VoxelCoord, usize> =
        coords.iter().enumerate().map(|(i, &c)| (c, i)).collect();

    let init = match reducer {
        Reducer::Mean => 0.0,
        Reducer::Max => f64::NEG_INFINITY,
    };
    let mut features = vec![init; coords.len() * channels];
    let mut counts = vec![0usize; coords.len()];
    let mut votes: Vec<BTreeMap<u32, usize>> = match pc.labels() {
        Some(_) => vec![BTreeMap::new(); coords.len()],
        None => Vec::new(),
    };
    let mut point_sites = Vec::with_capacity(pc.len());
    let mut row = Vec::with_capacity(channels);
    let mut dropped = 0usize;
    for (i, loc) in located.iter().enumerate() {
        let Some(c) = loc else {
            dropped += 1;
            point_sites.push(None);
            continue;
        };
        let site = index[c];
        point_sites.push(Some(site));
        counts[site] += 1;
        pc.point_features(i, &mut row);
        let dst = &mut features[site * channels..(site + 1) * channels];
        for (d, &v) in dst.iter_mut().zip(&row) {
            match reducer {
                Reducer::Mean => *d += v,
                Reducer::Max => *d = d.max(v),
            }
        }
        if let Some(labels) = pc.labels() {
            *votes[site].entry(labels[i]).or_default() += 1;
        }
    }
    if reducer == Reducer::Mean {
        for (site, &n) in counts.iter().enumerate() {
            let inv = 1.0 / n as f64;
            for v in &mut features[site * channels..(site + 1) * channels] {
                *v *= inv;
            }
        }
    }
    let labels = pc.labels().map(|_| {
        votes
            .iter()
            .map(|v| {
                // BTreeMap iterates ascending, so the first maximum is the smallest id
                let mut best = (0u32, 0usize);
                for (&label, &n) in v {
                    if n > best.1 {
                        best = (label, n);
                    }
                }
                best.0
            })
            .collect()
    });
    if dropped > 0 {
        log::debug!(
            "voxelize dropped {dropped} of {} points outside the grid",
            pc.len()
        );
    }
    let tensor = SparseVoxelTensor::from_sorted(*grid, channels, coords, features, labels)?;
    Ok(Voxelized {
        tensor,
        dropped,
        point_sites,
    })
}

/// Dense `[n_rho][n_phi][n_z][channels]` array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrid {
    pub dims: [usize; 3],
    pub channels: usize,
    pub data: Vec<f64>,
}

impl DenseGrid {
    pub fn zeros(dims: [usize; 3], channels: usize) -> Self {
        Self {
            dims,
            channels,
            data: vec![0.0; dims[0] * dims[1] * dims[2] * channels],
        }
    }

    pub fn offset(&self, c: VoxelCoord) -> usize {
        ((c.rho as usize * self.dims[1] + c.phi as usize) * self.dims[2] + c.z as usize)
            * self.channels
    }

    pub fn at(&self, c: VoxelCoord) -> &[f64] {
        let o = self.offset(c);
        &self.data[o..o + self.channels]
    }

    pub fn at_mut(&mut self, c: VoxelCoord) -> &mut [f64] {
        let o = self.offset(c);
        &mut self.data[o..o + self.channels]
    }
}

pub fn densify(t: &SparseVoxelTensor) -> Result<DenseGrid> {
    let size = t.grid.num_cells().saturating_mul(t.channels);
    if size > DENSE_LIMIT {
        return Err(Error::Capacity(format!(
            "dense expansion of {size} values exceeds the limit of {DENSE_LIMIT}"
        )));
    }
    let mut dense = DenseGrid::zeros(t.grid.dims(), t.channels);
    for (i, &c) in t.coords.iter().enumerate() {
        dense.at_mut(c).copy_from_slice(t.feature(i));
    }
    Ok(dense)
}

/// Inverse of [`densify`]: every voxel with a nonzero feature becomes active.
pub fn sparsify(dense: &DenseGrid, grid: &CylGridSpec) -> Result<SparseVoxelTensor> {
    if dense.dims != grid.dims() {
        return Err(Error::Shape(format!(
            "dense dims {:?} do not match grid {:?}",
            dense.dims,
            grid.dims()
        )));
    }
    let mut coords = Vec::new();
    let mut features = Vec::new();
    for r in 0..grid.n_rho {
        for p in 0..grid.n_phi {
            for z in 0..grid.n_z {
                let c = VoxelCoord::new(r, p, z);
                let f = dense.at(c);
                if f.iter().any(|&v| v != 0.0) {
                    coords.push(c);
                    features.extend_from_slice(f);
                }
            }
        }
    }
    SparseVoxelTensor::from_sorted(*grid, dense.channels, coords, features, None)
}
