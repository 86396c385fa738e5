//! Voxel grids, label volumes and intensity preprocessing.
//!
//! Data is stored flat with axis 0 varying fastest (`x + nx * (y + ny * z)`),
//! the same order NIfTI uses on disk.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Direction in which an array axis increases, in patient coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AxisDir {
    R,
    L,
    A,
    P,
    S,
    I,
}

impl AxisDir {
    /// Anatomical axis: 0 = left–right, 1 = anterior–posterior, 2 = inferior–superior.
    pub fn anatomical_axis(self) -> usize {
        match self {
            AxisDir::R | AxisDir::L => 0,
            AxisDir::A | AxisDir::P => 1,
            AxisDir::S | AxisDir::I => 2,
        }
    }

    /// True when the axis increases toward R, A or S.
    pub fn is_positive(self) -> bool {
        matches!(self, AxisDir::R | AxisDir::A | AxisDir::S)
    }

    fn from_char(c: char) -> Option<Self> {
        Some(match c.to_ascii_uppercase() {
            'R' => AxisDir::R,
            'L' => AxisDir::L,
            'A' => AxisDir::A,
            'P' => AxisDir::P,
            'S' => AxisDir::S,
            'I' => AxisDir::I,
            _ => return None,
        })
    }

    fn as_char(self) -> char {
        match self {
            AxisDir::R => 'R',
            AxisDir::L => 'L',
            AxisDir::A => 'A',
            AxisDir::P => 'P',
            AxisDir::S => 'S',
            AxisDir::I => 'I',
        }
    }
}

/// Three-letter orientation code such as `RAS` or `LPS`.
///
/// The canonical convention used throughout the crate is `RAS`:
/// axis 0 = left–right, axis 1 = anterior–posterior, axis 2 = inferior–superior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Orientation(pub [AxisDir; 3]);

impl Orientation {
    pub const RAS: Orientation = Orientation([AxisDir::R, AxisDir::A, AxisDir::S]);

    pub fn new(dirs: [AxisDir; 3]) -> Result<Self> {
        let mut seen = [false; 3];
        for d in dirs {
            let a = d.anatomical_axis();
            if seen[a] {
                return Err(Error::format(format!(
                    "orientation {} repeats an anatomical axis",
                    Orientation(dirs)
                )));
            }
            seen[a] = true;
        }
        Ok(Orientation(dirs))
    }

    /// Array axes already map onto left–right, anterior–posterior,
    /// inferior–superior in that order (flips allowed).
    pub fn is_canonical_order(&self) -> bool {
        self.0.iter().enumerate().all(|(k, d)| d.anatomical_axis() == k)
    }
}

impl Default for Orientation {
    fn default() -> Self {
        Orientation::RAS
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in self.0 {
            write!(f, "{}", d.as_char())?;
        }
        Ok(())
    }
}

impl FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let chars: Vec<char> = s.trim().chars().collect();
        if chars.len() != 3 {
            return Err(Error::param(format!("orientation code '{s}' must have 3 letters")));
        }
        let mut dirs = [AxisDir::R; 3];
        for (slot, c) in dirs.iter_mut().zip(chars) {
            *slot = AxisDir::from_char(c)
                .ok_or_else(|| Error::param(format!("invalid orientation letter '{c}' in '{s}'")))?;
        }
        Orientation::new(dirs).map_err(|_| Error::param(format!("orientation '{s}' repeats an axis")))
    }
}

impl Serialize for Orientation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Orientation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Shape, spacing (mm) and orientation shared by every volume type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub orientation: Orientation,
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::with_orientation(dims, spacing, Orientation::RAS)
    }

    pub fn with_orientation(dims: [usize; 3], spacing: [f64; 3], orientation: Orientation) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::param(format!("dims {dims:?} must all be positive")));
        }
        if dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).is_none() {
            return Err(Error::param(format!("dims {dims:?} overflow the address space")));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::param(format!("spacing {spacing:?} must be positive and finite")));
        }
        Ok(Geometry {
            dims,
            spacing,
            orientation,
        })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let r = idx / self.dims[0];
        [x, r % self.dims[1], r / self.dims[1]]
    }

    /// Voxel volume in millilitres (mm³ / 1000).
    pub fn voxel_volume_ml(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2] / 1000.0
    }

    /// Same dims and orientation, spacing equal to within 1e-6 relative
    /// (spacing passes through 32-bit NIfTI header fields).
    pub fn matches(&self, other: &Geometry) -> bool {
        self.dims == other.dims
            && self.orientation == other.orientation
            && self
                .spacing
                .iter()
                .zip(other.spacing.iter())
                .all(|(a, b)| (a - b).abs() <= 1e-6 * a.abs().max(b.abs()))
    }

    pub fn ensure_matches(&self, other: &Geometry, what: &str) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::param(format!(
                "{what}: geometry mismatch, {} vs {}",
                self.describe(),
                other.describe()
            )))
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "{}x{}x{} @ {}x{}x{} mm ({})",
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.spacing[0],
            self.spacing[1],
            self.spacing[2],
            self.orientation
        )
    }

    /// Permutes and flips `data` so that the result is in RAS order.
    /// Lossless: only indices move.
    pub fn reorient_to_ras<T: Copy>(&self, data: &[T]) -> (Geometry, Vec<T>) {
        if self.orientation == Orientation::RAS {
            return (*self, data.to_vec());
        }
        let dirs = self.orientation.0;
        let mut dims = [0usize; 3];
        let mut spacing = [0f64; 3];
        for (k, d) in dirs.iter().enumerate() {
            dims[d.anatomical_axis()] = self.dims[k];
            spacing[d.anatomical_axis()] = self.spacing[k];
        }
        let out_geom = Geometry {
            dims,
            spacing,
            orientation: Orientation::RAS,
        };
        let mut out = Vec::with_capacity(data.len());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let dst = [x, y, z];
                    let mut src = [0usize; 3];
                    for (k, d) in dirs.iter().enumerate() {
                        let j = dst[d.anatomical_axis()];
                        src[k] = if d.is_positive() { j } else { self.dims[k] - 1 - j };
                    }
                    out.push(data[self.index(src[0], src[1], src[2])]);
                }
            }
        }
        (out_geom, out)
    }
}

// Spacing is validated finite, so equality is total.
impl Eq for Geometry {}

/// Scalar 3D field: PET SUV, CT HU or a probability map.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    geometry: Geometry,
    data: Vec<f32>,
}

impl VoxelGrid {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::param(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        let bad = data.iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            return Err(Error::Corruption(format!("{bad} non-finite voxel values")));
        }
        Ok(VoxelGrid { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: f32) -> Result<Self> {
        Self::new(geometry, vec![value; geometry.len()])
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geometry.index(x, y, z)]
    }

    /// Applies `f` to every voxel. The result must stay finite.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<VoxelGrid> {
        VoxelGrid::new(self.geometry, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Replaces the orientation tag without moving data (`--assume-axes`).
    pub fn with_orientation(mut self, orientation: Orientation) -> Self {
        self.geometry.orientation = orientation;
        self
    }

    pub fn to_ras(&self) -> VoxelGrid {
        let (geometry, data) = self.geometry.reorient_to_ras(&self.data);
        VoxelGrid { geometry, data }
    }

    /// Zeroes negative values.
    pub fn clamp_nonneg(&self) -> VoxelGrid {
        VoxelGrid {
            geometry: self.geometry,
            data: self.data.iter().map(|&v| v.max(0.0)).collect(),
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

pub const BACKGROUND_LABEL: u32 = 0;
pub const LESION_LABEL: u32 = 1;

/// Default vocabulary: `{0: background, 1: lesion}`.
pub fn base_vocabulary() -> BTreeMap<u32, String> {
    BTreeMap::from([
        (BACKGROUND_LABEL, "background".to_string()),
        (LESION_LABEL, "lesion".to_string()),
    ])
}

/// Integer segmentation volume with a label vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    geometry: Geometry,
    labels: Vec<u32>,
    vocabulary: BTreeMap<u32, String>,
}

impl LabelVolume {
    pub fn new(geometry: Geometry, labels: Vec<u32>, vocabulary: BTreeMap<u32, String>) -> Result<Self> {
        if labels.len() != geometry.len() {
            return Err(Error::param(format!(
                "label length {} does not match dims {:?}",
                labels.len(),
                geometry.dims
            )));
        }
        if let Some((i, l)) = labels
            .iter()
            .enumerate()
            .find(|(_, l)| **l != BACKGROUND_LABEL && !vocabulary.contains_key(l))
        {
            return Err(Error::param(format!("label {l} at voxel {i} is not in the vocabulary")));
        }
        Ok(LabelVolume {
            geometry,
            labels,
            vocabulary,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn vocabulary(&self) -> &BTreeMap<u32, String> {
        &self.vocabulary
    }

    pub fn with_orientation(mut self, orientation: Orientation) -> Self {
        self.geometry.orientation = orientation;
        self
    }

    /// Mask of voxels carrying label `id`.
    pub fn select(&self, id: u32) -> BinaryMask {
        BinaryMask {
            geometry: self.geometry,
            data: self.labels.iter().map(|&l| l == id).collect(),
        }
    }

    pub fn label_id(&self, name: &str) -> Option<u32> {
        self.vocabulary.iter().find(|(_, n)| n.as_str() == name).map(|(id, _)| *id)
    }
}

/// Binary lesion mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    geometry: Geometry,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(geometry: Geometry, data: Vec<bool>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::param(format!(
                "mask length {} does not match dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        Ok(BinaryMask { geometry, data })
    }

    pub fn empty(geometry: Geometry) -> Self {
        BinaryMask {
            data: vec![false; geometry.len()],
            geometry,
        }
    }

    /// Builds a mask with the listed voxel coordinates set.
    pub fn from_coords(geometry: Geometry, coords: &[[usize; 3]]) -> Result<Self> {
        let mut m = Self::empty(geometry);
        for c in coords {
            if (0..3).any(|k| c[k] >= geometry.dims[k]) {
                return Err(Error::param(format!("voxel {c:?} outside dims {:?}", geometry.dims)));
            }
            m.data[geometry.index(c[0], c[1], c[2])] = true;
        }
        Ok(m)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.geometry.index(x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn with_orientation(mut self, orientation: Orientation) -> Self {
        self.geometry.orientation = orientation;
        self
    }

    pub fn to_ras(&self) -> BinaryMask {
        let (geometry, data) = self.geometry.reorient_to_ras(&self.data);
        BinaryMask { geometry, data }
    }

    /// Voxelwise `self AND keep`.
    pub fn and_where(&self, keep: impl Fn(usize) -> bool) -> BinaryMask {
        BinaryMask {
            geometry: self.geometry,
            data: self.data.iter().enumerate().map(|(i, &b)| b && keep(i)).collect(),
        }
    }

    /// True if every foreground voxel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(other.data.iter()).all(|(&a, &b)| !a || b)
    }

    pub fn to_label_volume(&self) -> LabelVolume {
        LabelVolume {
            geometry: self.geometry,
            labels: self.data.iter().map(|&b| b as u32).collect(),
            vocabulary: base_vocabulary(),
        }
    }
}

impl TryFrom<&LabelVolume> for BinaryMask {
    type Error = Error;

    fn try_from(v: &LabelVolume) -> Result<Self> {
        if let Some((i, l)) = v.labels.iter().enumerate().find(|(_, l)| **l > 1) {
            return Err(Error::param(format!(
                "label {l} at voxel {i} is not binary (expected 0 or 1)"
            )));
        }
        Ok(BinaryMask {
            geometry: v.geometry,
            data: v.labels.iter().map(|&l| l == 1).collect(),
        })
    }
}

/// Record of the clipping and standardization applied to a volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: f64,
    pub std: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub percentile_lo: f64,
    pub percentile_hi: f64,
}

/// Default clipping percentiles for dataset-level normalization.
pub const DEFAULT_PERCENTILE_LO: f64 = 0.5;
pub const DEFAULT_PERCENTILE_HI: f64 = 99.5;

pub fn voxel_volume_ml(grid: &VoxelGrid) -> f64 {
    grid.geometry.voxel_volume_ml()
}

fn check_percentiles(lo_pct: f64, hi_pct: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&lo_pct) || !(0.0..=100.0).contains(&hi_pct) || lo_pct >= hi_pct {
        return Err(Error::param(format!(
            "percentile range [{lo_pct}, {hi_pct}] must satisfy 0 <= lo < hi <= 100"
        )));
    }
    Ok(())
}

/// Percentile of an ascending-sorted slice: the element at index
/// `round(q / 100 * n)`, clamped to the last element.
pub fn percentile_sorted(sorted: &[f32], q: f64) -> f32 {
    let n = sorted.len();
    let idx = ((q / 100.0) * n as f64).round() as usize;
    sorted[idx.min(n - 1)]
}

fn sorted_copy(values: impl Iterator<Item = f32>) -> Vec<f32> {
    let mut v: Vec<f32> = values.collect();
    v.sort_unstable_by(|a, b| a.total_cmp(b));
    v
}

/// Population mean and standard deviation, accumulated in f64.
fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Clamps every voxel into `[P_lo, P_hi]` of the volume's own values.
pub fn clip_percentile(grid: &VoxelGrid, lo_pct: f64, hi_pct: f64) -> Result<(VoxelGrid, NormalizationStats)> {
    check_percentiles(lo_pct, hi_pct)?;
    let sorted = sorted_copy(grid.data.iter().copied());
    let lo = percentile_sorted(&sorted, lo_pct);
    let hi = percentile_sorted(&sorted, hi_pct);
    let out = VoxelGrid {
        geometry: grid.geometry,
        data: grid.data.iter().map(|&v| v.clamp(lo, hi)).collect(),
    };
    let (mean, std) = mean_std(out.data.iter().map(|&v| v as f64));
    Ok((
        out,
        NormalizationStats {
            mean,
            std,
            clip_lo: lo as f64,
            clip_hi: hi as f64,
            percentile_lo: lo_pct,
            percentile_hi: hi_pct,
        },
    ))
}

fn standardize(data: &[f32], mean: f64, std: f64) -> Vec<f32> {
    if std > 0.0 {
        data.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect()
    } else {
        vec![0.0; data.len()]
    }
}

/// Per-volume z-score `(x - mean) / std` with population std.
/// A constant volume maps to zeros and reports `std = 0`.
pub fn zscore_normalize(grid: &VoxelGrid) -> (VoxelGrid, NormalizationStats) {
    let (mean, std) = mean_std(grid.data.iter().map(|&v| v as f64));
    let (lo, hi) = grid.min_max();
    let out = VoxelGrid {
        geometry: grid.geometry,
        data: standardize(&grid.data, mean, std),
    };
    (
        out,
        NormalizationStats {
            mean,
            std,
            clip_lo: lo as f64,
            clip_hi: hi as f64,
            percentile_lo: 0.0,
            percentile_hi: 100.0,
        },
    )
}

/// Dataset-level normalization: clip bounds and mean/std are computed
/// once over every voxel of every volume, then shared.
pub fn dataset_stats(grids: &[&VoxelGrid], lo_pct: f64, hi_pct: f64) -> Result<NormalizationStats> {
    check_percentiles(lo_pct, hi_pct)?;
    if grids.is_empty() {
        return Err(Error::param("dataset normalization needs at least one volume"));
    }
    let sorted = sorted_copy(grids.iter().flat_map(|g| g.data.iter().copied()));
    let lo = percentile_sorted(&sorted, lo_pct);
    let hi = percentile_sorted(&sorted, hi_pct);
    let (mean, std) = mean_std(sorted.iter().map(|&v| v.clamp(lo, hi) as f64));
    Ok(NormalizationStats {
        mean,
        std,
        clip_lo: lo as f64,
        clip_hi: hi as f64,
        percentile_lo: lo_pct,
        percentile_hi: hi_pct,
    })
}

/// Clips with `stats.clip_lo/hi` then standardizes with `stats.mean/std`.
pub fn apply_stats(grid: &VoxelGrid, stats: &NormalizationStats) -> VoxelGrid {
    let (lo, hi) = (stats.clip_lo as f32, stats.clip_hi as f32);
    let clipped: Vec<f32> = grid.data.iter().map(|&v| v.clamp(lo, hi)).collect();
    VoxelGrid {
        geometry: grid.geometry,
        data: standardize(&clipped, stats.mean, stats.std),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> VoxelGrid {
        VoxelGrid::new(Geometry::new(dims, spacing).unwrap(), data).unwrap()
    }

    #[test]
    fn voxel_volume_examples() {
        let g = |s| grid([1, 1, 1], s, vec![0.0]);
        assert_eq!(voxel_volume_ml(&g([1.0, 1.0, 1.0])), 0.001);
        assert_eq!(voxel_volume_ml(&g([10.0, 10.0, 10.0])), 1.0);
        assert!((voxel_volume_ml(&g([2.0, 2.0, 3.0])) - 0.012).abs() < 1e-15);
    }

    #[test]
    fn invalid_construction() {
        assert!(Geometry::new([0, 1, 1], [1.0; 3]).is_err());
        assert!(Geometry::new([1, 1, 1], [1.0, -1.0, 1.0]).is_err());
        assert!(Geometry::new([1, 1, 1], [1.0, f64::NAN, 1.0]).is_err());
        let g = Geometry::new([2, 1, 1], [1.0; 3]).unwrap();
        assert!(VoxelGrid::new(g, vec![0.0]).is_err());
        assert!(VoxelGrid::new(g, vec![0.0, f32::NAN]).is_err());
    }

    #[test]
    fn clip_constant_volume() {
        let g = grid([2, 2, 2], [1.0; 3], vec![5.0; 8]);
        let (out, stats) = clip_percentile(&g, 10.0, 90.0).unwrap();
        assert_eq!(out, g);
        assert_eq!((stats.clip_lo, stats.clip_hi), (5.0, 5.0));
    }

    #[test]
    fn clip_full_range_is_identity() {
        let data: Vec<f32> = (0..27).map(|i| (i as f32 * 0.37).sin()).collect();
        let g = grid([3, 3, 3], [1.0; 3], data);
        let (out, _) = clip_percentile(&g, 0.0, 100.0).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn clip_hundred_values() {
        // Oracle: sort the values, take element round(q * n / 100).
        let data: Vec<f32> = (0..100).rev().map(|i| i as f32).collect();
        let g = grid([10, 10, 1], [1.0; 3], data);
        let (out, stats) = clip_percentile(&g, 5.0, 95.0).unwrap();
        let (lo, hi) = out.min_max();
        assert_eq!((lo, hi), (5.0, 95.0));
        assert_eq!((stats.clip_lo, stats.clip_hi), (5.0, 95.0));
    }

    #[test]
    fn clip_rejects_bad_range() {
        let g = grid([2, 1, 1], [1.0; 3], vec![0.0, 1.0]);
        for (lo, hi) in [(50.0, 50.0), (60.0, 40.0), (-1.0, 50.0), (0.0, 101.0)] {
            assert!(matches!(clip_percentile(&g, lo, hi), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn zscore_examples() {
        let (out, stats) = zscore_normalize(&grid([2, 2, 1], [1.0; 3], vec![3.0; 4]));
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.std, 0.0);

        let (out, _) = zscore_normalize(&grid([2, 1, 1], [1.0; 3], vec![-1.0, 1.0]));
        assert_eq!(out.data(), &[-1.0, 1.0]);

        let (out, stats) = zscore_normalize(&grid([2, 1, 1], [1.0; 3], vec![0.0, 10.0]));
        assert_eq!(out.data(), &[-1.0, 1.0]);
        assert_eq!(stats.std, 5.0);
        assert_eq!(stats.mean, 5.0);
    }

    #[test]
    fn dataset_wrapper_shares_bounds() {
        let a = grid([2, 1, 1], [1.0; 3], vec![0.0, 10.0]);
        let b = grid([2, 1, 1], [1.0; 3], vec![20.0, 30.0]);
        let stats = dataset_stats(&[&a, &b], 0.0, 100.0).unwrap();
        assert_eq!((stats.clip_lo, stats.clip_hi), (0.0, 30.0));
        assert_eq!(stats.mean, 15.0);
        let na = apply_stats(&a, &stats);
        let nb = apply_stats(&b, &stats);
        let all: Vec<f32> = na.data().iter().chain(nb.data()).copied().collect();
        let (m, s) = mean_std(all.iter().map(|&v| v as f64));
        assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-6);
        assert!(dataset_stats(&[], 0.0, 100.0).is_err());
    }

    #[test]
    fn orientation_parse() {
        assert_eq!("ras".parse::<Orientation>().unwrap(), Orientation::RAS);
        assert!("RAR".parse::<Orientation>().is_err());
        assert!("RA".parse::<Orientation>().is_err());
        assert!("RAX".parse::<Orientation>().is_err());
        let o: Orientation = "PIR".parse().unwrap();
        assert!(!o.is_canonical_order());
        assert_eq!(o.to_string(), "PIR");
    }

    #[test]
    fn reorient_las_flips_axis0() {
        let geom = Geometry::with_orientation([3, 1, 1], [2.0, 1.0, 1.0], "LAS".parse().unwrap()).unwrap();
        let g = VoxelGrid::new(geom, vec![1.0, 2.0, 3.0]).unwrap();
        let r = g.to_ras();
        assert_eq!(r.data(), &[3.0, 2.0, 1.0]);
        assert_eq!(r.geometry().orientation, Orientation::RAS);
    }

    #[test]
    fn reorient_permutation() {
        // Array axes (S, R, A): axis 0 runs inferior→superior.
        let geom = Geometry::with_orientation([2, 3, 1], [3.0, 1.0, 2.0], "SRA".parse().unwrap()).unwrap();
        let data: Vec<f32> = (0..6).map(|i| i as f32).collect();
        let g = VoxelGrid::new(geom, data).unwrap();
        let r = g.to_ras();
        assert_eq!(r.dims(), [3, 1, 2]);
        assert_eq!(r.spacing(), [1.0, 2.0, 3.0]);
        for s in 0..2 {
            for rr in 0..3 {
                assert_eq!(r.get(rr, 0, s), g.get(s, rr, 0));
            }
        }
    }

    #[test]
    fn binary_mask_from_labels() {
        let geom = Geometry::new([3, 1, 1], [1.0; 3]).unwrap();
        let mut vocab = base_vocabulary();
        vocab.insert(4, "liver".into());
        let lv = LabelVolume::new(geom, vec![0, 1, 4], vocab.clone()).unwrap();
        assert!(BinaryMask::try_from(&lv).is_err());
        assert_eq!(lv.select(4).count(), 1);
        assert!(LabelVolume::new(geom, vec![0, 9, 1], vocab).is_err());
        let lv = LabelVolume::new(geom, vec![0, 1, 1], base_vocabulary()).unwrap();
        let m = BinaryMask::try_from(&lv).unwrap();
        assert_eq!(m.count(), 2);
        assert_eq!(m.to_label_volume(), lv);
    }
}
