//! Classify the tracer, apply that tracer's postprocessing defaults to an
//! externally produced prediction mask, and optionally evaluate.

use serde::{Deserialize, Serialize};

use crate::cc::Connectivity;
use crate::classifier::{TracerClass, TracerModel, TracerPrediction};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_case, SegMetrics};
use crate::postproc::{remove_small_components, remove_small_components_ml, suv_threshold_mask, SizeUnit, TracerDefaults};
use crate::volume::{BinaryMask, VoxelGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub fdg: TracerDefaults,
    pub psma: TracerDefaults,
    pub connectivity: Connectivity,
    /// Skips classification when set.
    pub tracer: Option<TracerClass>,
    /// Replaces the tracer's SUV threshold.
    pub suv_threshold: Option<f64>,
    /// Replaces the tracer's minimum component size, in `size_unit`.
    pub min_cc: Option<f64>,
    pub size_unit: SizeUnit,
    pub clamp_nonneg: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            fdg: TracerDefaults::for_tracer(TracerClass::Fdg),
            psma: TracerDefaults::for_tracer(TracerClass::Psma),
            connectivity: Connectivity::default(),
            tracer: None,
            suv_threshold: None,
            min_cc: None,
            size_unit: SizeUnit::Voxels,
            clamp_nonneg: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let thresholds = [
            Some(self.fdg.suv_threshold),
            Some(self.psma.suv_threshold),
            self.suv_threshold,
            self.min_cc,
        ];
        for t in thresholds.into_iter().flatten() {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::param(format!("thresholds must be finite and >= 0, got {t}")));
            }
        }
        Ok(())
    }

    pub fn defaults_for(&self, tracer: TracerClass) -> TracerDefaults {
        match tracer {
            TracerClass::Fdg => self.fdg,
            TracerClass::Psma => self.psma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub tracer: TracerClass,
    /// Absent when the tracer was given rather than classified.
    pub classification: Option<TracerPrediction>,
    pub suv_threshold: f64,
    pub min_cc: f64,
    pub size_unit: SizeUnit,
    pub input_voxels: usize,
    pub output_voxels: usize,
    pub metrics: Option<SegMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub mask: BinaryMask,
    pub report: PipelineReport,
}

/// Inputs for one pipeline run.
pub struct PipelineInputs<'a> {
    pub case_id: &'a str,
    pub pet: &'a VoxelGrid,
    pub ct: Option<&'a VoxelGrid>,
    pub pred: &'a BinaryMask,
    pub gt: Option<&'a BinaryMask>,
}

pub fn run_pipeline(inputs: &PipelineInputs<'_>, model: Option<&TracerModel>, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let pet_geom = inputs.pet.geometry();
    if let Some(ct) = inputs.ct {
        pet_geom.ensure_matches(ct.geometry(), "pet/ct")?;
    }
    pet_geom.ensure_matches(inputs.pred.geometry(), "pet/pred")?;
    if let Some(gt) = inputs.gt {
        pet_geom.ensure_matches(gt.geometry(), "pet/gt")?;
    }

    let clamped;
    let pet = if cfg.clamp_nonneg {
        clamped = inputs.pet.clamp_nonneg();
        &clamped
    } else {
        inputs.pet
    };

    let (tracer, classification) = match cfg.tracer {
        Some(t) => (t, None),
        None => {
            let model = model.ok_or_else(|| Error::param("a classifier model is required unless the tracer is given"))?;
            let p = model.classify_volume(pet)?;
            (p.fused.class, Some(p))
        }
    };
    log::info!("case {}: tracer {tracer}", inputs.case_id);

    let defaults = cfg.defaults_for(tracer);
    let suv_threshold = cfg.suv_threshold.unwrap_or(defaults.suv_threshold);
    let min_cc = cfg.min_cc.unwrap_or(defaults.min_cc_voxels as f64);

    let mut mask = suv_threshold_mask(inputs.pred, pet, suv_threshold)?;
    if min_cc > 0.0 {
        mask = match cfg.size_unit {
            SizeUnit::Voxels => remove_small_components(&mask, min_cc.ceil() as usize, cfg.connectivity),
            SizeUnit::Ml => remove_small_components_ml(&mask, min_cc, cfg.connectivity),
        };
    }

    let metrics = inputs
        .gt
        .map(|gt| evaluate_case(inputs.case_id, &mask, gt, cfg.connectivity))
        .transpose()?;

    let report = PipelineReport {
        tracer,
        classification,
        suv_threshold,
        min_cc,
        size_unit: cfg.size_unit,
        input_voxels: inputs.pred.count(),
        output_voxels: mask.count(),
        metrics,
    };
    Ok(PipelineOutput { mask, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn setup() -> (VoxelGrid, BinaryMask) {
        let g = Geometry::new([4, 4, 4], [2.0, 2.0, 2.0]).unwrap();
        let mut pet = vec![0.5f32; 64];
        let mut pred = vec![false; 64];
        for (i, v) in [(0, 3.0), (1, 1.2), (2, 0.8), (40, 1.6)] {
            pet[i] = v;
            pred[i] = true;
        }
        (VoxelGrid::new(g, pet).unwrap(), BinaryMask::new(g, pred).unwrap())
    }

    fn inputs<'a>(pet: &'a VoxelGrid, pred: &'a BinaryMask, gt: Option<&'a BinaryMask>) -> PipelineInputs<'a> {
        PipelineInputs {
            case_id: "c",
            pet,
            ct: None,
            pred,
            gt,
        }
    }

    #[test]
    fn override_uses_tracer_threshold() {
        let (pet, pred) = setup();
        let mut cfg = PipelineConfig {
            tracer: Some(TracerClass::Fdg),
            ..Default::default()
        };
        let out = run_pipeline(&inputs(&pet, &pred, None), None, &cfg).unwrap();
        assert_eq!(out.mask.count(), 2);
        assert_eq!(out.report.suv_threshold, 1.5);
        assert!(out.report.classification.is_none());
        cfg.tracer = Some(TracerClass::Psma);
        let out = run_pipeline(&inputs(&pet, &pred, None), None, &cfg).unwrap();
        assert_eq!(out.mask.count(), 3);
    }

    #[test]
    fn min_cc_removes_isolated_voxel() {
        let (pet, pred) = setup();
        let cfg = PipelineConfig {
            tracer: Some(TracerClass::Psma),
            min_cc: Some(2.0),
            ..Default::default()
        };
        let out = run_pipeline(&inputs(&pet, &pred, None), None, &cfg).unwrap();
        assert_eq!(out.mask.count(), 2);
        assert!(!out.mask.data()[40]);
    }

    #[test]
    fn empty_prediction_stays_empty() {
        let (pet, pred) = setup();
        let empty = BinaryMask::empty(*pred.geometry());
        let cfg = PipelineConfig {
            tracer: Some(TracerClass::Fdg),
            ..Default::default()
        };
        let out = run_pipeline(&inputs(&pet, &empty, Some(&pred)), None, &cfg).unwrap();
        assert!(out.mask.is_empty());
        assert_eq!(out.report.metrics.unwrap().fpv_ml, 0.0);
    }

    #[test]
    fn errors() {
        let (pet, pred) = setup();
        let cfg = PipelineConfig::default();
        assert!(matches!(run_pipeline(&inputs(&pet, &pred, None), None, &cfg), Err(Error::Parameter(_))));
        let other = BinaryMask::empty(Geometry::new([4, 4, 5], [2.0; 3]).unwrap());
        let cfg = PipelineConfig {
            tracer: Some(TracerClass::Fdg),
            ..Default::default()
        };
        assert!(run_pipeline(&inputs(&pet, &other, None), None, &cfg).is_err());
        let bad = PipelineConfig {
            suv_threshold: Some(-1.0),
            ..cfg
        };
        assert!(run_pipeline(&inputs(&pet, &pred, None), None, &bad).is_err());
    }
}
