//! Dice score, false positive volume and false negative volume.
//!
//! FPV sums the volume of predicted components that share no voxel with
//! ground-truth foreground; FNV is the same with the roles swapped. Only
//! the component structure of the mask being scored matters, the other
//! mask is used voxelwise. Volumes are in ml.

use serde::{Deserialize, Serialize};

use crate::cc::{label_components, Connectivity};
use crate::error::Result;
use crate::volume::BinaryMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub case_id: String,
    pub dice: f64,
    pub fpv_ml: f64,
    pub fnv_ml: f64,
    /// Ground truth has no foreground (Dice falls back to the empty convention).
    pub empty_gt: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub cases: usize,
    pub mean_dice: f64,
    pub mean_fpv_ml: f64,
    pub mean_fnv_ml: f64,
}

/// `2|P∩G| / (|P|+|G|)`; 1.0 when both masks are empty.
pub fn dice_score(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.geometry().ensure_matches(gt.geometry(), "dice")?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Total volume of components of `scored` with no voxel in `other`.
fn missed_volume(scored: &BinaryMask, other: &BinaryMask, conn: Connectivity) -> f64 {
    let cs = label_components(scored, conn);
    let other = other.data();
    let touched = cs.touched_by(|i| other[i]);
    let voxels: usize = cs
        .sizes
        .iter()
        .zip(&touched)
        .filter(|(_, &t)| !t)
        .map(|(&s, _)| s)
        .sum();
    voxels as f64 * scored.geometry().voxel_volume_ml()
}

pub fn false_positive_volume(pred: &BinaryMask, gt: &BinaryMask, conn: Connectivity) -> Result<f64> {
    pred.geometry().ensure_matches(gt.geometry(), "false positive volume")?;
    Ok(missed_volume(pred, gt, conn))
}

pub fn false_negative_volume(pred: &BinaryMask, gt: &BinaryMask, conn: Connectivity) -> Result<f64> {
    pred.geometry().ensure_matches(gt.geometry(), "false negative volume")?;
    Ok(missed_volume(gt, pred, conn))
}

pub fn evaluate_case(case_id: &str, pred: &BinaryMask, gt: &BinaryMask, conn: Connectivity) -> Result<SegMetrics> {
    Ok(SegMetrics {
        case_id: case_id.to_string(),
        dice: dice_score(pred, gt)?,
        fpv_ml: false_positive_volume(pred, gt, conn)?,
        fnv_ml: false_negative_volume(pred, gt, conn)?,
        empty_gt: gt.is_empty(),
    })
}

/// Unweighted means over cases; all zeros for an empty list.
pub fn aggregate(cases: &[SegMetrics]) -> Aggregate {
    if cases.is_empty() {
        return Aggregate::default();
    }
    let n = cases.len() as f64;
    Aggregate {
        cases: cases.len(),
        mean_dice: cases.iter().map(|c| c.dice).sum::<f64>() / n,
        mean_fpv_ml: cases.iter().map(|c| c.fpv_ml).sum::<f64>() / n,
        mean_fnv_ml: cases.iter().map(|c| c.fnv_ml).sum::<f64>() / n,
    }
}
