//! Maximum-intensity projections and the 2D conditioning applied before
//! feature extraction.
//!
//! Image layout: row 0 is the most superior slice, so the projection reads
//! like a standing patient. Coronal columns run along axis 0 (left–right),
//! sagittal columns along axis 1 (anterior–posterior), both in increasing
//! array order of the RAS-reoriented volume.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Orientation, VoxelGrid};

/// Side length of the classifier input image.
pub const INPUT_SIZE: usize = 224;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Coronal,
    Sagittal,
}

impl Plane {
    pub const BOTH: [Plane; 2] = [Plane::Coronal, Plane::Sagittal];
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        })
    }
}

impl FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coronal" => Ok(Plane::Coronal),
            "sagittal" => Ok(Plane::Sagittal),
            _ => Err(Error::param(format!("plane must be 'coronal' or 'sagittal', got '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MipImage {
    pub plane: Plane,
    pub height: usize,
    pub width: usize,
    /// Row-major pixels.
    pub pixels: Vec<f32>,
    pub normalized: bool,
}

impl MipImage {
    pub fn new(plane: Plane, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::param(format!(
                "image {height}x{width} does not match {} pixels",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::param("image pixels must be finite"));
        }
        Ok(MipImage {
            plane,
            height,
            width,
            pixels,
            normalized: false,
        })
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.pixels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

pub fn project_mip(pet: &VoxelGrid, plane: Plane) -> MipImage {
    let reoriented;
    let pet = if pet.geometry().orientation == Orientation::RAS {
        pet
    } else {
        reoriented = pet.to_ras();
        &reoriented
    };
    let [nx, ny, nz] = pet.dims();
    let data = pet.data();
    let (width, height) = match plane {
        Plane::Coronal => (nx, nz),
        Plane::Sagittal => (ny, nz),
    };
    let mut pixels = vec![f32::NEG_INFINITY; width * height];
    let mut idx = 0;
    for z in 0..nz {
        let row = &mut pixels[(nz - 1 - z) * width..(nz - z) * width];
        for y in 0..ny {
            for x in 0..nx {
                let col = match plane {
                    Plane::Coronal => x,
                    Plane::Sagittal => y,
                };
                let v = data[idx];
                if v > row[col] {
                    row[col] = v;
                }
                idx += 1;
            }
        }
    }
    MipImage {
        plane,
        height,
        width,
        pixels,
        normalized: false,
    }
}

/// Source coordinate and weight for pixel-center bilinear sampling.
fn sample_axis(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    let v = a + t * (b - a);
    v.clamp(a.min(b), a.max(b))
}

/// Bilinear resize to `height`x`width`, pixel-center aligned.
pub fn resize(img: &MipImage, height: usize, width: usize) -> MipImage {
    let cols: Vec<(usize, usize, f64)> = (0..width).map(|c| sample_axis(c, width, img.width)).collect();
    let mut pixels = Vec::with_capacity(height * width);
    for r in 0..height {
        let (r0, r1, tr) = sample_axis(r, height, img.height);
        for &(c0, c1, tc) in &cols {
            let top = lerp(img.at(r0, c0) as f64, img.at(r0, c1) as f64, tc);
            let bottom = lerp(img.at(r1, c0) as f64, img.at(r1, c1) as f64, tc);
            pixels.push(lerp(top, bottom, tr) as f32);
        }
    }
    MipImage {
        plane: img.plane,
        height,
        width,
        pixels,
        normalized: img.normalized,
    }
}

/// Resize to the 224x224 classifier input.
pub fn resize_to_input(img: &MipImage) -> MipImage {
    resize(img, INPUT_SIZE, INPUT_SIZE)
}

/// Per-image z-score with population std; constant images become zeros.
pub fn normalize_mip(img: &MipImage) -> MipImage {
    let n = img.pixels.len() as f64;
    let mean = img.pixels.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = img.pixels.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let pixels = if std > 0.0 {
        img.pixels.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect()
    } else {
        vec![0.0; img.pixels.len()]
    };
    MipImage {
        pixels,
        normalized: true,
        ..*img
    }
}

pub fn flip_horizontal(img: &MipImage) -> MipImage {
    let mut pixels = img.pixels.clone();
    for row in pixels.chunks_exact_mut(img.width) {
        row.reverse();
    }
    MipImage { pixels, ..*img }
}

/// Projection, resize and normalization: the classifier's view of a volume.
pub fn prepare_mip(pet: &VoxelGrid, plane: Plane) -> MipImage {
    normalize_mip(&resize_to_input(&project_mip(pet, plane)))
}

/// 16-bit binary PGM (P5, maxval 65535, big-endian), min-max scaled.
pub fn encode_pgm16(img: &MipImage) -> Vec<u8> {
    let (lo, hi) = img.min_max();
    let range = (hi - lo) as f64;
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    out.reserve(img.pixels.len() * 2);
    for &v in &img.pixels {
        let q = if range > 0.0 {
            (((v - lo) as f64 / range) * 65535.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}
