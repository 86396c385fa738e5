//! SUV thresholding, small-component removal, and threshold sweeps that
//! report metric deltas against the un-postprocessed baseline.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cc::{label_components, Connectivity};
use crate::classifier::TracerClass;
use crate::error::{Error, Result};
use crate::io::round6;
use crate::metrics::{aggregate, evaluate_case, Aggregate, SegMetrics};
use crate::volume::{BinaryMask, VoxelGrid};

/// Per-tracer postprocessing defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracerDefaults {
    pub suv_threshold: f64,
    /// Minimum component size in voxels; 0 disables removal.
    pub min_cc_voxels: usize,
}

impl TracerDefaults {
    pub fn for_tracer(tracer: TracerClass) -> Self {
        match tracer {
            TracerClass::Fdg => TracerDefaults {
                suv_threshold: 1.5,
                min_cc_voxels: 0,
            },
            TracerClass::Psma => TracerDefaults {
                suv_threshold: 1.0,
                min_cc_voxels: 0,
            },
        }
    }
}

/// Unit of the component-size threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeUnit {
    #[default]
    Voxels,
    Ml,
}

impl FromStr for SizeUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voxels" => Ok(SizeUnit::Voxels),
            "ml" => Ok(SizeUnit::Ml),
            _ => Err(Error::param(format!("size unit must be 'voxels' or 'ml', got '{s}'"))),
        }
    }
}

/// Keeps predicted voxels whose PET value is at least `t`.
pub fn suv_threshold_mask(pred: &BinaryMask, pet: &VoxelGrid, t: f64) -> Result<BinaryMask> {
    pred.geometry().ensure_matches(pet.geometry(), "suv threshold")?;
    let pet = pet.data();
    Ok(pred.and_where(|i| pet[i] as f64 >= t))
}

/// Drops components with fewer than `min_voxels` voxels.
pub fn remove_small_components(pred: &BinaryMask, min_voxels: usize, conn: Connectivity) -> BinaryMask {
    if min_voxels <= 1 {
        return pred.clone();
    }
    remove_components_where(pred, conn, |size, _| size < min_voxels)
}

/// Drops components whose volume is below `min_ml`.
pub fn remove_small_components_ml(pred: &BinaryMask, min_ml: f64, conn: Connectivity) -> BinaryMask {
    remove_components_where(pred, conn, |_, ml| ml < min_ml)
}

fn remove_components_where(pred: &BinaryMask, conn: Connectivity, drop: impl Fn(usize, f64) -> bool) -> BinaryMask {
    let cs = label_components(pred, conn);
    let keep: Vec<bool> = cs
        .sizes
        .iter()
        .zip(&cs.volumes_ml)
        .map(|(&s, &ml)| !drop(s, ml))
        .collect();
    pred.and_where(|i| {
        let l = cs.labels[i];
        l != 0 && keep[l as usize - 1]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Suv,
    CcSize,
}

impl FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "suv" => Ok(SweepKind::Suv),
            "cc" | "cc_size" | "cc-size" => Ok(SweepKind::CcSize),
            _ => Err(Error::param(format!("sweep kind must be 'suv' or 'cc', got '{s}'"))),
        }
    }
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepKind::Suv => "suv",
            SweepKind::CcSize => "cc_size",
        })
    }
}

/// One case of a sweep. `pet` is only needed for SUV sweeps.
#[derive(Debug, Clone)]
pub struct SweepCase {
    pub id: String,
    pub pred: BinaryMask,
    pub gt: BinaryMask,
    pub pet: Option<VoxelGrid>,
}

#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    pub connectivity: Connectivity,
    pub size_unit: SizeUnit,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            connectivity: Connectivity::default(),
            size_unit: SizeUnit::Voxels,
        }
    }
}

/// One threshold row. The `delta_*` fields are differences of means
/// (postprocessed mean minus baseline mean); `mean_case_delta_*` are
/// means of per-case differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub delta_dice: f64,
    pub delta_fpv_ml: f64,
    pub delta_fnv_ml: f64,
    pub mean_case_delta_dice: f64,
    pub mean_case_delta_fpv_ml: f64,
    pub mean_case_delta_fnv_ml: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSweep {
    pub case_id: String,
    pub baseline: SegMetrics,
    /// Per-threshold `[Δdice, Δfpv_ml, Δfnv_ml]`, aligned with `rows`.
    pub deltas: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: SweepKind,
    pub connectivity: String,
    pub baseline: Aggregate,
    pub rows: Vec<SweepRow>,
    pub cases: Vec<CaseSweep>,
}

impl SweepReport {
    /// Copy with every float rounded to 6 decimals, for serialization.
    pub fn rounded(&self) -> SweepReport {
        let mut r = self.clone();
        r.baseline.mean_dice = round6(r.baseline.mean_dice);
        r.baseline.mean_fpv_ml = round6(r.baseline.mean_fpv_ml);
        r.baseline.mean_fnv_ml = round6(r.baseline.mean_fnv_ml);
        for row in &mut r.rows {
            for v in [
                &mut row.delta_dice,
                &mut row.delta_fpv_ml,
                &mut row.delta_fnv_ml,
                &mut row.mean_case_delta_dice,
                &mut row.mean_case_delta_fpv_ml,
                &mut row.mean_case_delta_fnv_ml,
            ] {
                *v = round6(*v);
            }
        }
        for c in &mut r.cases {
            c.baseline.dice = round6(c.baseline.dice);
            c.baseline.fpv_ml = round6(c.baseline.fpv_ml);
            c.baseline.fnv_ml = round6(c.baseline.fnv_ml);
            for d in &mut c.deltas {
                for v in d.iter_mut() {
                    *v = round6(*v);
                }
            }
        }
        r
    }
}

/// Applies one postprocessing step to a case.
pub fn apply_operator(case: &SweepCase, kind: SweepKind, threshold: f64, opts: &SweepOptions) -> Result<BinaryMask> {
    match kind {
        SweepKind::Suv => {
            let pet = case
                .pet
                .as_ref()
                .ok_or_else(|| Error::param(format!("case {}: SUV sweep needs a PET volume", case.id)))?;
            suv_threshold_mask(&case.pred, pet, threshold)
        }
        SweepKind::CcSize => match opts.size_unit {
            SizeUnit::Voxels => {
                if threshold < 0.0 || threshold.fract() != 0.0 {
                    return Err(Error::param(format!(
                        "component size threshold {threshold} must be a non-negative integer voxel count"
                    )));
                }
                Ok(remove_small_components(&case.pred, threshold as usize, opts.connectivity))
            }
            SizeUnit::Ml => Ok(remove_small_components_ml(&case.pred, threshold, opts.connectivity)),
        },
    }
}

pub fn sweep(cases: &[SweepCase], kind: SweepKind, thresholds: &[f64], opts: &SweepOptions) -> Result<SweepReport> {
    if thresholds.is_empty() {
        return Err(Error::param("sweep needs at least one threshold"));
    }
    if thresholds.iter().any(|t| !t.is_finite()) || thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::param(format!("thresholds {thresholds:?} must be finite and strictly increasing")));
    }
    let conn = opts.connectivity;

    // metrics[case][0] is the baseline, metrics[case][1 + t] is threshold t.
    let per_case: Vec<Vec<SegMetrics>> = cases
        .par_iter()
        .map(|case| {
            let mut out = Vec::with_capacity(thresholds.len() + 1);
            out.push(evaluate_case(&case.id, &case.pred, &case.gt, conn)?);
            for &t in thresholds {
                let post = apply_operator(case, kind, t, opts)?;
                out.push(evaluate_case(&case.id, &post, &case.gt, conn)?);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let baseline_list: Vec<SegMetrics> = per_case.iter().map(|m| m[0].clone()).collect();
    let baseline = aggregate(&baseline_list);
    let n = cases.len().max(1) as f64;
    let rows = thresholds
        .iter()
        .enumerate()
        .map(|(ti, &threshold)| {
            let post: Vec<SegMetrics> = per_case.iter().map(|m| m[ti + 1].clone()).collect();
            let agg = aggregate(&post);
            let case_delta = |f: fn(&SegMetrics) -> f64| {
                per_case.iter().map(|m| f(&m[ti + 1]) - f(&m[0])).sum::<f64>() / n
            };
            SweepRow {
                threshold,
                delta_dice: agg.mean_dice - baseline.mean_dice,
                delta_fpv_ml: agg.mean_fpv_ml - baseline.mean_fpv_ml,
                delta_fnv_ml: agg.mean_fnv_ml - baseline.mean_fnv_ml,
                mean_case_delta_dice: case_delta(|m| m.dice),
                mean_case_delta_fpv_ml: case_delta(|m| m.fpv_ml),
                mean_case_delta_fnv_ml: case_delta(|m| m.fnv_ml),
            }
        })
        .collect();

    let mut case_rows: Vec<CaseSweep> = per_case
        .iter()
        .map(|m| CaseSweep {
            case_id: m[0].case_id.clone(),
            baseline: m[0].clone(),
            deltas: m[1..]
                .iter()
                .map(|p| [p.dice - m[0].dice, p.fpv_ml - m[0].fpv_ml, p.fnv_ml - m[0].fnv_ml])
                .collect(),
        })
        .collect();
    case_rows.sort_by(|a, b| a.case_id.cmp(&b.case_id));

    Ok(SweepReport {
        kind,
        connectivity: conn.to_string(),
        baseline,
        rows,
        cases: case_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn line(n: usize, on: &[usize]) -> BinaryMask {
        let g = Geometry::new([n, 1, 1], [1.0; 3]).unwrap();
        let coords: Vec<[usize; 3]> = on.iter().map(|&x| [x, 0, 0]).collect();
        BinaryMask::from_coords(g, &coords).unwrap()
    }

    #[test]
    fn tracer_defaults() {
        assert_eq!(TracerDefaults::for_tracer(TracerClass::Fdg).suv_threshold, 1.5);
        assert_eq!(TracerDefaults::for_tracer(TracerClass::Psma).suv_threshold, 1.0);
        assert_eq!(TracerDefaults::for_tracer(TracerClass::Fdg).min_cc_voxels, 0);
    }

    #[test]
    fn suv_threshold_examples() {
        let pred = line(4, &[0, 1, 2]);
        let pet = VoxelGrid::new(*pred.geometry(), vec![0.5, 1.2, 2.0, 9.0]).unwrap();
        assert_eq!(suv_threshold_mask(&pred, &pet, 1.5).unwrap(), line(4, &[2]));
        assert_eq!(suv_threshold_mask(&pred, &pet, 0.0).unwrap(), pred);
        assert!(suv_threshold_mask(&pred, &pet, f64::INFINITY).unwrap().is_empty());
        let other = VoxelGrid::new(Geometry::new([2, 2, 1], [1.0; 3]).unwrap(), vec![0.0; 4]).unwrap();
        assert!(matches!(suv_threshold_mask(&pred, &other, 1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn small_component_examples() {
        // Sizes {1, 4}.
        let pred = line(8, &[0, 3, 4, 5, 6]);
        let conn = Connectivity::Face6;
        assert_eq!(remove_small_components(&pred, 1, conn), pred);
        assert_eq!(remove_small_components(&pred, 0, conn), pred);
        assert_eq!(remove_small_components(&pred, 3, conn), line(8, &[3, 4, 5, 6]));
        assert!(remove_small_components(&pred, 5, conn).is_empty());
        let ml = remove_small_components_ml(&pred, 0.002, conn);
        assert_eq!(ml, line(8, &[3, 4, 5, 6]));
    }

    fn case(id: &str, pred: &[usize], gt: &[usize]) -> SweepCase {
        let pred = line(10, pred);
        let pet = VoxelGrid::new(*pred.geometry(), (0..10).map(|i| i as f32 * 0.25).collect()).unwrap();
        SweepCase {
            id: id.into(),
            pred,
            gt: line(10, gt),
            pet: Some(pet),
        }
    }

    #[test]
    fn identity_thresholds_give_zero_deltas() {
        let cases = vec![case("a", &[0, 2, 3, 7], &[2, 3]), case("b", &[5], &[8, 9])];
        let opts = SweepOptions::default();
        for (kind, t) in [(SweepKind::Suv, 0.0), (SweepKind::CcSize, 1.0)] {
            let r = sweep(&cases, kind, &[t], &opts).unwrap();
            let row = &r.rows[0];
            assert_eq!((row.delta_dice, row.delta_fpv_ml, row.delta_fnv_ml), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn sweep_rows_and_per_case_deltas() {
        let cases = vec![case("b", &[0, 2, 3, 7], &[2, 3]), case("a", &[5, 6], &[5, 6])];
        let opts = SweepOptions {
            connectivity: Connectivity::Face6,
            size_unit: SizeUnit::Voxels,
        };
        let r = sweep(&cases, SweepKind::CcSize, &[1.0, 2.0, 3.0], &opts).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.cases[0].case_id, "a");
        // Case b loses its two single-voxel false positives at threshold 2.
        let b = &r.cases[1];
        assert_eq!(b.deltas[1][1], -0.002);
        // At 3 the two-voxel lesions go too.
        assert!(r.rows[2].delta_fnv_ml > 0.0);
        assert!((r.rows[1].delta_fpv_ml - r.rows[1].mean_case_delta_fpv_ml).abs() < 1e-15);
    }

    #[test]
    fn sweep_rejects_bad_thresholds() {
        let cases = vec![case("a", &[0], &[0])];
        let opts = SweepOptions::default();
        assert!(sweep(&cases, SweepKind::Suv, &[], &opts).is_err());
        assert!(sweep(&cases, SweepKind::Suv, &[1.0, 1.0], &opts).is_err());
        assert!(sweep(&cases, SweepKind::CcSize, &[1.5], &opts).is_err());
        let mut no_pet = case("a", &[0], &[0]);
        no_pet.pet = None;
        assert!(sweep(&[no_pet], SweepKind::Suv, &[1.0], &opts).is_err());
    }
}
