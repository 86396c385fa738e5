//! NIfTI-1 single-file reader/writer and report emission.
//!
//! Reads little- and big-endian `.nii` files, gzip-compressed or not
//! (detected by magic bytes). Always writes little-endian with an sform
//! that encodes spacing and orientation; `.gz` paths are compressed.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{aggregate, SegMetrics};
use crate::postproc::SweepReport;
use crate::volume::{base_vocabulary, AxisDir, Geometry, LabelVolume, Orientation, VoxelGrid};

const HEADER_SIZE: usize = 348;
const NIFTI2_HEADER_SIZE: i32 = 540;
const WRITE_VOX_OFFSET: usize = 352;

/// On-disk voxel type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    F32,
    F64,
}

impl Datatype {
    pub const ALL: [Datatype; 4] = [Datatype::U8, Datatype::I16, Datatype::F32, Datatype::F64];

    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Datatype::U8),
            4 => Ok(Datatype::I16),
            16 => Ok(Datatype::F32),
            64 => Ok(Datatype::F64),
            other => Err(Error::format(format!("unsupported datatype {other}"))),
        }
    }

    pub fn bytes_per_voxel(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::F32 => 4,
            Datatype::F64 => 8,
        }
    }

    pub fn is_integer(self) -> bool {
        matches!(self, Datatype::U8 | Datatype::I16)
    }

    fn range(self) -> (f64, f64) {
        match self {
            Datatype::U8 => (0.0, u8::MAX as f64),
            Datatype::I16 => (i16::MIN as f64, i16::MAX as f64),
            Datatype::F32 => (f32::MIN as f64, f32::MAX as f64),
            Datatype::F64 => (f64::MIN, f64::MAX),
        }
    }
}

/// The subset of the NIfTI-1 header this crate interprets.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dims: [usize; 3],
    pub datatype: Datatype,
    pub pixdim: [f64; 3],
    pub scl_slope: f64,
    pub scl_inter: f64,
    pub vox_offset: usize,
    pub orientation: Orientation,
    pub big_endian: bool,
}

impl NiftiHeader {
    fn uses_scaling(&self) -> bool {
        self.scl_slope.is_finite()
            && self.scl_inter.is_finite()
            && self.scl_slope != 0.0
            && !(self.scl_slope == 1.0 && self.scl_inter == 0.0)
    }

    fn data_len(&self) -> Result<usize> {
        self.dims
            .iter()
            .try_fold(self.datatype.bytes_per_voxel(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(format!("dims {:?} overflow", self.dims)))
    }
}

/// Reader options.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    /// Use this orientation instead of the one in the header.
    pub assume_axes: Option<Orientation>,
}

struct Fields<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Fields<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn i32(&self, off: usize) -> i32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        if self.big_endian {
            i32::from_be_bytes(b)
        } else {
            i32::from_le_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

fn maybe_gunzip(bytes: &[u8]) -> Result<std::borrow::Cow<'_, [u8]>> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(|e| Error::Corruption(format!("gzip stream: {e}")))?;
        Ok(std::borrow::Cow::Owned(out))
    } else {
        Ok(std::borrow::Cow::Borrowed(bytes))
    }
}

/// Axis code of each column of a voxel-to-world matrix (RAS+ world).
fn orientation_from_matrix(m: [[f64; 3]; 3]) -> Result<Orientation> {
    let mut dirs = [AxisDir::R; 3];
    for (j, dir) in dirs.iter_mut().enumerate() {
        let col = [m[0][j], m[1][j], m[2][j]];
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("non-finite orientation matrix"));
        }
        let (i, v) = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        if *v == 0.0 {
            return Err(Error::format(format!("orientation matrix column {j} is zero")));
        }
        *dir = match (i, *v > 0.0) {
            (0, true) => AxisDir::R,
            (0, false) => AxisDir::L,
            (1, true) => AxisDir::A,
            (1, false) => AxisDir::P,
            (_, true) => AxisDir::S,
            (_, false) => AxisDir::I,
        };
    }
    Orientation::new(dirs)
}

fn qform_matrix(f: &Fields<'_>, qfac: f64) -> [[f64; 3]; 3] {
    let b = f.f32(256) as f64;
    let c = f.f32(260) as f64;
    let d = f.f32(264) as f64;
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let qfac = if qfac < 0.0 { -1.0 } else { 1.0 };
    [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), qfac * 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, qfac * 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), qfac * (a * a + d * d - c * c - b * b)],
    ]
}

/// Parses and validates the 348-byte header (after gzip inflation).
pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(format!(
            "file too small for a NIfTI-1 header ({} bytes, need {HEADER_SIZE})",
            bytes.len()
        )));
    }
    let le = Fields { bytes, big_endian: false };
    let be = Fields { bytes, big_endian: true };
    let f = if (1..=7).contains(&le.i16(40)) {
        le
    } else if (1..=7).contains(&be.i16(40)) {
        be
    } else {
        return Err(Error::format("dim[0] out of range in either byte order"));
    };

    let magic = &bytes[344..348];
    if magic == b"n+2\0" || f.i32(0) == NIFTI2_HEADER_SIZE {
        return Err(Error::format("NIfTI-2 files are not supported"));
    }
    if magic == b"ni1\0" {
        return Err(Error::format("NIfTI-1 header/image pairs (.hdr/.img) are not supported"));
    }
    if magic != b"n+1\0" {
        return Err(Error::format(format!("bad magic {magic:?}, expected \"n+1\\0\"")));
    }
    if f.i32(0) != HEADER_SIZE as i32 {
        return Err(Error::format(format!("sizeof_hdr is {}, expected 348", f.i32(0))));
    }

    let ndim = f.i16(40);
    if !(3..=4).contains(&ndim) {
        return Err(Error::format(format!("dim[0] = {ndim}; only 3D volumes are supported")));
    }
    let mut dims = [0usize; 3];
    for (k, d) in dims.iter_mut().enumerate() {
        let v = f.i16(42 + 2 * k);
        if v <= 0 {
            return Err(Error::format(format!("dim[{}] = {v} must be positive", k + 1)));
        }
        *d = v as usize;
    }
    if ndim == 4 && f.i16(48) != 1 {
        return Err(Error::format(format!("4D volume with dim[4] = {}; only 1 is supported", f.i16(48))));
    }

    let datatype = Datatype::from_code(f.i16(70))?;

    let mut pixdim = [0f64; 3];
    for (k, p) in pixdim.iter_mut().enumerate() {
        let v = f.f32(80 + 4 * k) as f64;
        if !v.is_finite() || v <= 0.0 {
            return Err(Error::format(format!("pixdim[{}] = {v} must be positive", k + 1)));
        }
        *p = v;
    }

    let vox_offset = f.f32(108);
    if !vox_offset.is_finite() || vox_offset < HEADER_SIZE as f32 || vox_offset > (u32::MAX as f32) {
        return Err(Error::format(format!("invalid vox_offset {vox_offset}")));
    }

    let qform_code = f.i16(252);
    let sform_code = f.i16(254);
    let orientation = if sform_code > 0 {
        let row = |off: usize| [f.f32(off) as f64, f.f32(off + 4) as f64, f.f32(off + 8) as f64];
        orientation_from_matrix([row(280), row(296), row(312)])?
    } else if qform_code > 0 {
        orientation_from_matrix(qform_matrix(&f, f.f32(76) as f64))?
    } else {
        Orientation::RAS
    };

    Ok(NiftiHeader {
        dims,
        datatype,
        pixdim,
        scl_slope: f.f32(112) as f64,
        scl_inter: f.f32(116) as f64,
        vox_offset: vox_offset as usize,
        orientation,
        big_endian: f.big_endian,
    })
}

/// Header plus voxel values after intensity scaling, in f64.
fn decode_raw(bytes: &[u8], opts: ReadOptions) -> Result<(NiftiHeader, Geometry, Vec<f64>)> {
    let bytes = maybe_gunzip(bytes)?;
    let hdr = parse_header(&bytes)?;
    let len = hdr.data_len()?;
    let end = hdr
        .vox_offset
        .checked_add(len)
        .ok_or_else(|| Error::format("data section overflows"))?;
    if end > bytes.len() {
        return Err(Error::Corruption(format!(
            "truncated data section: need {len} bytes at offset {}, file has {}",
            hdr.vox_offset,
            bytes.len()
        )));
    }
    let data = &bytes[hdr.vox_offset..end];
    let be = hdr.big_endian;
    let raw: Vec<f64> = match hdr.datatype {
        Datatype::U8 => data.iter().map(|&b| b as f64).collect(),
        Datatype::I16 => data
            .chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                (if be { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }) as f64
            })
            .collect(),
        Datatype::F32 => data
            .chunks_exact(4)
            .map(|c| {
                let b: [u8; 4] = c.try_into().unwrap();
                (if be { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }) as f64
            })
            .collect(),
        Datatype::F64 => data
            .chunks_exact(8)
            .map(|c| {
                let b: [u8; 8] = c.try_into().unwrap();
                if be {
                    f64::from_be_bytes(b)
                } else {
                    f64::from_le_bytes(b)
                }
            })
            .collect(),
    };
    let values = if hdr.uses_scaling() {
        raw.into_iter().map(|v| hdr.scl_slope * v + hdr.scl_inter).collect()
    } else {
        raw
    };
    let orientation = opts.assume_axes.unwrap_or(hdr.orientation);
    let geometry = Geometry::with_orientation(hdr.dims, hdr.pixdim, orientation)
        .map_err(|e| Error::format(e.to_string()))?;
    Ok((hdr, geometry, values))
}

pub fn decode_volume(bytes: &[u8], opts: ReadOptions) -> Result<VoxelGrid> {
    let (_, geometry, values) = decode_raw(bytes, opts)?;
    let data: Vec<f32> = values.iter().map(|&v| v as f32).collect();
    let bad = data.iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        return Err(Error::Corruption(format!("{bad} voxels are non-finite after scaling")));
    }
    VoxelGrid::new(geometry, data)
}

pub fn decode_labels(bytes: &[u8], opts: ReadOptions) -> Result<LabelVolume> {
    let (_, geometry, values) = decode_raw(bytes, opts)?;
    let mut labels = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        let r = v.round();
        if !v.is_finite() || (v - r).abs() > 1e-6 || r < 0.0 || r > u32::MAX as f64 {
            return Err(Error::format(format!(
                "voxel {i} has value {v}, expected a non-negative integer label"
            )));
        }
        labels.push(r as u32);
    }
    let mut vocabulary = base_vocabulary();
    for &l in &labels {
        vocabulary.entry(l).or_insert_with(|| format!("label_{l}"));
    }
    LabelVolume::new(geometry, labels, vocabulary)
}

fn header_bytes(geometry: &Geometry, datatype: Datatype) -> Result<Vec<u8>> {
    let mut h = vec![0u8; WRITE_VOX_OFFSET];
    let put_i16 = |h: &mut Vec<u8>, off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut Vec<u8>, off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    put_i16(&mut h, 40, 3);
    for k in 0..3 {
        let d = i16::try_from(geometry.dims[k])
            .map_err(|_| Error::Range(format!("dim {} too large for NIfTI-1", geometry.dims[k])))?;
        put_i16(&mut h, 42 + 2 * k, d);
    }
    for k in 3..7 {
        put_i16(&mut h, 42 + 2 * k, 1);
    }
    put_i16(&mut h, 70, datatype.code());
    put_i16(&mut h, 72, (datatype.bytes_per_voxel() * 8) as i16);
    put_f32(&mut h, 76, 1.0);
    for k in 0..3 {
        put_f32(&mut h, 80 + 4 * k, geometry.spacing[k] as f32);
    }
    put_f32(&mut h, 108, WRITE_VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    h[123] = 2; // mm
    put_i16(&mut h, 254, 1);
    let mut srow = [[0f32; 4]; 3];
    for (k, d) in geometry.orientation.0.iter().enumerate() {
        let sign = if d.is_positive() { 1.0 } else { -1.0 };
        srow[d.anatomical_axis()][k] = sign * geometry.spacing[k] as f32;
    }
    for (r, row) in srow.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            put_f32(&mut h, 280 + 16 * r + 4 * c, *v);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    Ok(h)
}

fn encode_values(geometry: &Geometry, values: impl Iterator<Item = f64>, datatype: Datatype) -> Result<Vec<u8>> {
    let mut out = header_bytes(geometry, datatype)?;
    out.reserve(geometry.len() * datatype.bytes_per_voxel());
    let (lo, hi) = datatype.range();
    for (i, v) in values.enumerate() {
        if datatype.is_integer() && (v.fract() != 0.0 || v < lo || v > hi) {
            return Err(Error::Range(format!(
                "voxel {i} value {v} is not representable as {datatype:?}"
            )));
        }
        match datatype {
            Datatype::U8 => out.push(v as u8),
            Datatype::I16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
            Datatype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Datatype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

pub fn encode_volume(grid: &VoxelGrid, datatype: Datatype) -> Result<Vec<u8>> {
    encode_values(grid.geometry(), grid.data().iter().map(|&v| v as f64), datatype)
}

pub fn encode_labels(labels: &LabelVolume, datatype: Datatype) -> Result<Vec<u8>> {
    if !datatype.is_integer() {
        return Err(Error::param(format!(
            "label volumes need an integer datatype, got {datatype:?}"
        )));
    }
    encode_values(labels.geometry(), labels.labels().iter().map(|&l| l as f64), datatype)
}

/// Either kind of volume, for [`write_volume`].
#[derive(Debug, Clone, Copy)]
pub enum VolumeRef<'a> {
    Grid(&'a VoxelGrid),
    Labels(&'a LabelVolume),
}

impl<'a> From<&'a VoxelGrid> for VolumeRef<'a> {
    fn from(g: &'a VoxelGrid) -> Self {
        VolumeRef::Grid(g)
    }
}

impl<'a> From<&'a LabelVolume> for VolumeRef<'a> {
    fn from(l: &'a LabelVolume) -> Self {
        VolumeRef::Labels(l)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Corruption(m) => Error::Corruption(format!("{}: {m}", path.display())),
        other => other,
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    read_volume_with(path, ReadOptions::default())
}

pub fn read_volume_with(path: impl AsRef<Path>, opts: ReadOptions) -> Result<VoxelGrid> {
    let path = path.as_ref();
    decode_volume(&read_file(path)?, opts).map_err(|e| with_path(path, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    read_labels_with(path, ReadOptions::default())
}

pub fn read_labels_with(path: impl AsRef<Path>, opts: ReadOptions) -> Result<LabelVolume> {
    let path = path.as_ref();
    decode_labels(&read_file(path)?, opts).map_err(|e| with_path(path, e))
}

/// Writes a volume; paths ending in `.gz` are gzip-compressed.
pub fn write_volume<'a>(volume: impl Into<VolumeRef<'a>>, path: impl AsRef<Path>, datatype: Datatype) -> Result<()> {
    let path = path.as_ref();
    let bytes = match volume.into() {
        VolumeRef::Grid(g) => encode_volume(g, datatype)?,
        VolumeRef::Labels(l) => encode_labels(l, datatype)?,
    };
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        let gz = enc.finish().map_err(|e| Error::io(path, e))?;
        write_file(path, &gz)
    } else {
        write_file(path, &bytes)
    }
}

/// Report serialization format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(Error::param(format!("unknown report format '{s}'"))),
        }
    }
}

/// Rounds to the 6 decimals used in every report.
pub fn round6(x: f64) -> f64 {
    format!("{x:.6}").parse().unwrap_or(x)
}

#[derive(Serialize)]
struct CaseRow<'a> {
    id: &'a str,
    dice: f64,
    fpv_ml: f64,
    fnv_ml: f64,
    empty_gt: bool,
}

#[derive(Serialize)]
struct AggregateRow {
    mean_dice: f64,
    mean_fpv_ml: f64,
    mean_fnv_ml: f64,
}

#[derive(Serialize)]
struct MetricsDoc<'a> {
    cases: Vec<CaseRow<'a>>,
    aggregate: AggregateRow,
}

fn sorted_cases(cases: &[SegMetrics]) -> Vec<&SegMetrics> {
    let mut sorted: Vec<&SegMetrics> = cases.iter().collect();
    sorted.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    sorted
}

pub fn render_metrics(cases: &[SegMetrics], format: ReportFormat) -> String {
    let sorted = sorted_cases(cases);
    match format {
        ReportFormat::Csv => {
            let mut s = String::from("case_id,dice,fpv_ml,fnv_ml\n");
            for c in sorted {
                s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", c.case_id, c.dice, c.fpv_ml, c.fnv_ml));
            }
            s
        }
        ReportFormat::Json => {
            let agg = aggregate(cases);
            let doc = MetricsDoc {
                cases: sorted
                    .iter()
                    .map(|c| CaseRow {
                        id: &c.case_id,
                        dice: round6(c.dice),
                        fpv_ml: round6(c.fpv_ml),
                        fnv_ml: round6(c.fnv_ml),
                        empty_gt: c.empty_gt,
                    })
                    .collect(),
                aggregate: AggregateRow {
                    mean_dice: round6(agg.mean_dice),
                    mean_fpv_ml: round6(agg.mean_fpv_ml),
                    mean_fnv_ml: round6(agg.mean_fnv_ml),
                },
            };
            let mut s = serde_json::to_string_pretty(&doc).expect("report serializes");
            s.push('\n');
            s
        }
    }
}

pub fn render_sweep(report: &SweepReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut s = String::from("threshold,delta_dice,delta_fpv_ml,delta_fnv_ml\n");
            for r in &report.rows {
                s.push_str(&format!(
                    "{},{:.6},{:.6},{:.6}\n",
                    r.threshold, r.delta_dice, r.delta_fpv_ml, r.delta_fnv_ml
                ));
            }
            s
        }
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(&report.rounded()).expect("report serializes");
            s.push('\n');
            s
        }
    }
}

pub fn write_metrics_report(cases: &[SegMetrics], path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    write_file(path.as_ref(), render_metrics(cases, format).as_bytes())
}

pub fn write_sweep_report(report: &SweepReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    write_file(path.as_ref(), render_sweep(report, format).as_bytes())
}
