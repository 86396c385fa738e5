use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use petpipe_core::classifier::{
    cross_validate, evaluate_accuracy, volume_features, LabeledFeatures, Sample, TracerClass, TracerModel,
    TrainConfig,
};
use petpipe_core::io::{
    read_labels_with, read_volume_with, render_metrics, render_sweep, round6, write_volume, Datatype, ReadOptions,
    ReportFormat,
};
use petpipe_core::loss::{finite_difference_check, weighted_dice_ce, LogitsField, LossConfig, TargetField};
use petpipe_core::metrics::{evaluate_case, SegMetrics};
use petpipe_core::mip::{encode_pgm16, prepare_mip, project_mip, Plane};
use petpipe_core::phantom::{cohort_specs, generate_phantom, CohortSpec, PhantomSpec};
use petpipe_core::pipeline::{run_pipeline, PipelineConfig, PipelineInputs};
use petpipe_core::postproc::{
    remove_small_components, remove_small_components_ml, suv_threshold_mask, sweep, SizeUnit, SweepCase, SweepOptions,
};
use petpipe_core::volume::{zscore_normalize, BinaryMask, Orientation, VoxelGrid};
use petpipe_core::{Error, Result};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use crate::{
    ClassifyArgs, Command, EvalArgs, LossCheckArgs, MipArgs, PhantomArgs, PipelineArgs, PostprocArgs, ReadArgs,
    SweepArgs, TrainArgs,
};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pipeline(a) => pipeline(a),
        Command::Classify(a) => classify(a),
        Command::TrainClassifier(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Postproc(a) => postproc(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Phantom(a) => phantom(a),
        Command::Mip(a) => mip(a),
        Command::LossCheck(a) => loss_check(a),
    }
}

fn param(msg: impl Into<String>) -> Error {
    Error::Parameter(msg.into())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(param(format!("{what} file {} does not exist", path.display())))
    }
}

fn read_opts(assume_axes: Option<Orientation>) -> ReadOptions {
    ReadOptions { assume_axes }
}

fn read_pet(path: &Path, read: &ReadArgs) -> Result<VoxelGrid> {
    require_file(path, "PET")?;
    let pet = read_volume_with(path, read_opts(read.assume_axes))?;
    Ok(if read.clamp_nonneg { pet.clamp_nonneg() } else { pet })
}

fn read_mask(path: &Path, what: &str, assume_axes: Option<Orientation>) -> Result<BinaryMask> {
    require_file(path, what)?;
    let labels = read_labels_with(path, read_opts(assume_axes))?;
    BinaryMask::try_from(&labels).map_err(|e| param(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io {
            path: p.into(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json value serializes");
    s.push('\n');
    s
}

fn write_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    write_volume(&mask.to_label_volume(), path, Datatype::U8)
}

/// File name without `.nii` / `.nii.gz`.
fn case_id(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(&name)
        .to_string()
}

fn list_cases(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::Io {
                path: dir.into(),
                source: e,
            })?
            .path();
        let name = path.to_string_lossy();
        if path.is_file() && (name.ends_with(".nii") || name.ends_with(".nii.gz")) {
            out.insert(case_id(&path), path);
        }
    }
    if out.is_empty() {
        return Err(param(format!("no .nii or .nii.gz files in {}", dir.display())));
    }
    Ok(out)
}

/// Pairs files by case id across directories; every directory must hold the same ids.
fn match_dirs(dirs: &[(&Path, &str)]) -> Result<Vec<(String, Vec<PathBuf>)>> {
    let listed = dirs
        .iter()
        .map(|(d, _)| list_cases(d))
        .collect::<Result<Vec<_>>>()?;
    for (i, l) in listed.iter().enumerate().skip(1) {
        if l.keys().ne(listed[0].keys()) {
            let missing: Vec<&String> = listed[0].keys().filter(|k| !l.contains_key(*k)).collect();
            let extra: Vec<&String> = l.keys().filter(|k| !listed[0].contains_key(*k)).collect();
            return Err(param(format!(
                "{} directory does not match {}: missing {missing:?}, unexpected {extra:?}",
                dirs[i].1, dirs[0].1
            )));
        }
    }
    Ok(listed[0]
        .keys()
        .map(|id| (id.clone(), listed.iter().map(|l| l[id].clone()).collect()))
        .collect())
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    for (p, what) in [(&a.ct, "CT"), (&a.pred, "prediction")] {
        require_file(p, what)?;
    }
    let model = match (&a.model, a.tracer) {
        (_, Some(_)) => None,
        (Some(path), None) => {
            require_file(path, "model")?;
            Some(TracerModel::load(path)?)
        }
        (None, None) => return Err(param("either --model or --tracer is required")),
    };
    let pet = read_pet(&a.pet, &a.read)?;
    let ct = read_volume_with(&a.ct, read_opts(a.read.assume_axes))?;
    let pred = read_mask(&a.pred, "prediction", a.read.assume_axes)?;
    let gt = a.gt.as_deref().map(|p| read_mask(p, "ground-truth", a.read.assume_axes)).transpose()?;

    let cfg = PipelineConfig {
        connectivity: a.post.connectivity,
        tracer: a.tracer.map(Into::into),
        suv_threshold: a.post.suv_thresh,
        min_cc: a.post.min_cc,
        size_unit: a.post.cc_size_unit.into(),
        // Clamping already happened on load.
        clamp_nonneg: false,
        ..PipelineConfig::default()
    };
    let id = case_id(&a.pred);
    let inputs = PipelineInputs {
        case_id: &id,
        pet: &pet,
        ct: Some(&ct),
        pred: &pred,
        gt: gt.as_ref(),
    };
    let out = run_pipeline(&inputs, model.as_ref(), &cfg)?;
    write_mask(&out.mask, &a.out)?;

    let r = &out.report;
    let text = match ReportFormat::from(a.format) {
        ReportFormat::Json => pretty(&json!({
            "case_id": id,
            "tracer": r.tracer,
            "probability": r.classification.map(|c| round6(c.fused.probability)),
            "classification": r.classification,
            "suv_threshold": r.suv_threshold,
            "min_cc": r.min_cc,
            "size_unit": r.size_unit,
            "input_voxels": r.input_voxels,
            "output_voxels": r.output_voxels,
            "metrics": r.metrics.as_ref().map(|m| json!({
                "dice": round6(m.dice),
                "fpv_ml": round6(m.fpv_ml),
                "fnv_ml": round6(m.fnv_ml),
                "empty_gt": m.empty_gt,
            })),
            "mask": a.out,
        })),
        ReportFormat::Csv => {
            let prob = r.classification.map(|c| format!("{:.6}", c.fused.probability)).unwrap_or_default();
            let metrics = r
                .metrics
                .as_ref()
                .map(|m| format!("{:.6},{:.6},{:.6}", m.dice, m.fpv_ml, m.fnv_ml))
                .unwrap_or_else(|| ",,".into());
            format!(
                "case_id,tracer,probability,suv_threshold,output_voxels,dice,fpv_ml,fnv_ml\n{id},{},{prob},{},{},{metrics}\n",
                r.tracer, r.suv_threshold, r.output_voxels
            )
        }
    };
    emit(None, &text)
}

fn classify(a: ClassifyArgs) -> Result<()> {
    require_file(&a.model, "model")?;
    let model = TracerModel::load(&a.model)?;
    let pet = read_pet(&a.pet, &a.read)?;
    let p = model.classify_volume(&pet)?;
    let text = pretty(&json!({
        "tracer": p.fused.class,
        "probability": p.fused.probability,
        "probs": { "fdg": p.fused.probs[0], "psma": p.fused.probs[1] },
        "coronal": p.coronal,
        "sagittal": p.sagittal,
    }));
    emit(a.out.as_deref(), &text)
}

fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, TracerClass)>> {
    require_file(path, "manifest")?;
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (file, tracer) = line
            .split_once(',')
            .ok_or_else(|| Error::Format(format!("{} line {}: expected `path,tracer`", path.display(), n + 1)))?;
        let tracer = match tracer.trim().parse::<TracerClass>() {
            Ok(t) => t,
            Err(_) if n == 0 => continue, // header row
            Err(e) => return Err(Error::Format(format!("{} line {}: {e}", path.display(), n + 1))),
        };
        rows.push((base.join(file.trim()), tracer));
    }
    Ok(rows)
}

fn train(a: TrainArgs) -> Result<()> {
    let data: Vec<LabeledFeatures> = if let Some(manifest) = &a.manifest {
        let rows = read_manifest(manifest)?;
        rows.par_iter()
            .map(|(path, label)| {
                let (coronal, sagittal) = volume_features(&read_pet(path, &a.read)?)?;
                Ok(LabeledFeatures {
                    coronal,
                    sagittal,
                    label: *label,
                })
            })
            .collect::<Result<_>>()?
    } else {
        let n = a.phantoms.expect("clap requires --manifest or --phantoms");
        cohort_specs(n, &CohortSpec::default(), a.seed)?
            .par_iter()
            .map(|spec| {
                let (coronal, sagittal) = volume_features(&generate_phantom(spec)?.pet)?;
                Ok(LabeledFeatures {
                    coronal,
                    sagittal,
                    label: spec.tracer,
                })
            })
            .collect::<Result<_>>()?
    };
    let mut plane_cfg = TrainConfig::plane().with_seed(a.seed);
    plane_cfg.epochs = a.epochs.unwrap_or(plane_cfg.epochs);
    plane_cfg.learning_rate = a.lr.unwrap_or(plane_cfg.learning_rate);
    let mut fusion_cfg = TrainConfig::fusion().with_seed(a.seed);
    fusion_cfg.epochs = a.fusion_epochs.unwrap_or(fusion_cfg.epochs);
    fusion_cfg.learning_rate = a.fusion_lr.unwrap_or(fusion_cfg.learning_rate);
    let model = TracerModel::train(&data, &plane_cfg, &fusion_cfg)?;
    model.save(&a.out)?;

    let sets: [(&str, Vec<Sample>, &TrainConfig, _); 3] = [
        ("coronal", data.iter().map(|d| d.plane_sample(Plane::Coronal)).collect(), &plane_cfg, &model.coronal),
        ("sagittal", data.iter().map(|d| d.plane_sample(Plane::Sagittal)).collect(), &plane_cfg, &model.sagittal),
        ("fusion", data.iter().map(LabeledFeatures::fused_sample).collect(), &fusion_cfg, &model.fusion),
    ];
    let mut report = serde_json::Map::new();
    report.insert("samples".into(), json!(data.len()));
    for (name, samples, cfg, params) in &sets {
        let mut entry = json!({ "train_accuracy": evaluate_accuracy(params, samples)? });
        if let Some(k) = a.cv {
            let cv = cross_validate(samples, k, cfg)?;
            entry["cv_mean"] = json!(cv.mean);
            entry["cv_folds"] = json!(cv.fold_accuracies);
        }
        report.insert((*name).into(), entry);
    }
    if evaluate_accuracy(&model.fusion, &sets[2].1)? < 1.0 {
        log::warn!("fusion model does not fit its training set; consider more --fusion-epochs");
    }
    report.insert("model".into(), json!(a.out));
    emit(None, &pretty(&serde_json::Value::Object(report)))
}

fn eval(a: EvalArgs) -> Result<()> {
    let results: Vec<SegMetrics> = if a.pred.is_dir() {
        if !a.gt.is_dir() {
            return Err(param("--pred is a directory, so --gt must be one too"));
        }
        let cases = match_dirs(&[(&a.pred, "prediction"), (&a.gt, "ground-truth")])?;
        cases
            .par_iter()
            .map(|(id, files)| {
                let pred = read_mask(&files[0], "prediction", a.assume_axes)?;
                let gt = read_mask(&files[1], "ground-truth", a.assume_axes)?;
                evaluate_case(id, &pred, &gt, a.connectivity)
            })
            .collect::<Result<_>>()?
    } else {
        let pred = read_mask(&a.pred, "prediction", a.assume_axes)?;
        let gt = read_mask(&a.gt, "ground-truth", a.assume_axes)?;
        vec![evaluate_case(&case_id(&a.pred), &pred, &gt, a.connectivity)?]
    };
    emit(a.out.as_deref(), &render_metrics(&results, a.format.into()))
}

fn postproc(a: PostprocArgs) -> Result<()> {
    if a.post.suv_thresh.is_none() && a.post.min_cc.is_none() {
        return Err(param("give --suv-thresh and/or --min-cc"));
    }
    let pred = read_mask(&a.pred, "prediction", a.read.assume_axes)?;
    let mut mask = pred.clone();
    if let Some(t) = a.post.suv_thresh {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(param(format!("--suv-thresh must be finite and >= 0, got {t}")));
        }
        let pet_path = a.pet.as_deref().ok_or_else(|| param("--suv-thresh needs --pet"))?;
        mask = suv_threshold_mask(&mask, &read_pet(pet_path, &a.read)?, t)?;
    }
    if let Some(min) = a.post.min_cc {
        if !(min >= 0.0 && min.is_finite()) {
            return Err(param(format!("--min-cc must be finite and >= 0, got {min}")));
        }
        mask = match SizeUnit::from(a.post.cc_size_unit) {
            SizeUnit::Voxels => remove_small_components(&mask, min.ceil() as usize, a.post.connectivity),
            SizeUnit::Ml => remove_small_components_ml(&mask, min, a.post.connectivity),
        };
    }
    write_mask(&mask, &a.out)?;
    emit(
        None,
        &pretty(&json!({ "input_voxels": pred.count(), "output_voxels": mask.count(), "mask": a.out })),
    )
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let kind = a.kind.into();
    let needs_pet = matches!(a.kind, crate::KindArg::Suv);
    if needs_pet && a.pet.is_none() {
        return Err(param("--kind suv needs --pet"));
    }
    let mut dirs: Vec<(&Path, &str)> = vec![(&a.pred, "prediction"), (&a.gt, "ground-truth")];
    if let (true, Some(pet)) = (needs_pet, a.pet.as_deref()) {
        dirs.push((pet, "PET"));
    }
    let files: Vec<(String, Vec<PathBuf>)> = if a.pred.is_dir() {
        if dirs.iter().any(|(d, _)| !d.is_dir()) {
            return Err(param("with a --pred directory, --gt and --pet must be directories too"));
        }
        match_dirs(&dirs)?
    } else {
        vec![(case_id(&a.pred), dirs.iter().map(|(p, _)| p.to_path_buf()).collect())]
    };
    let cases: Vec<SweepCase> = files
        .par_iter()
        .map(|(id, f)| {
            Ok(SweepCase {
                id: id.clone(),
                pred: read_mask(&f[0], "prediction", a.read.assume_axes)?,
                gt: read_mask(&f[1], "ground-truth", a.read.assume_axes)?,
                pet: f.get(2).map(|p| read_pet(p, &a.read)).transpose()?,
            })
        })
        .collect::<Result<_>>()?;
    let opts = SweepOptions {
        connectivity: a.connectivity,
        size_unit: a.cc_size_unit.into(),
    };
    let report = sweep(&cases, kind, &a.thresholds, &opts)?;
    emit(a.out.as_deref(), &render_sweep(&report, a.format.into()))
}

fn phantom(a: PhantomArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(path) => {
            require_file(path, "spec")?;
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            serde_json::from_str::<PhantomSpec>(&text).map_err(|e| Error::Json {
                path: path.clone(),
                source: e,
            })?
        }
        None => PhantomSpec::default_for(a.tracer.into(), a.seed),
    };
    spec.rng_seed = a.seed;
    if let Some(n) = a.lesions {
        spec.lesions.count = n;
    }
    let p = generate_phantom(&spec)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let path = |name: &str| a.out.join(name);
    write_volume(&p.pet, path("pet.nii.gz"), Datatype::F32)?;
    write_volume(&p.ct, path("ct.nii.gz"), Datatype::I16)?;
    write_mask(&p.gt, &path("gt.nii.gz"))?;
    write_volume(&p.anatomy, path("anatomy.nii.gz"), Datatype::U8)?;
    let spec_json = serde_json::to_string_pretty(&spec).expect("spec serializes");
    fs::write(path("spec.json"), spec_json + "\n").map_err(|e| Error::Io {
        path: path("spec.json"),
        source: e,
    })?;
    emit(
        None,
        &pretty(&json!({
            "tracer": spec.tracer,
            "seed": spec.rng_seed,
            "lesions": spec.lesions.count,
            "lesion_voxels": p.gt.count(),
            "dir": a.out,
        })),
    )
}

fn mip(a: MipArgs) -> Result<()> {
    let pet = read_pet(&a.pet, &a.read)?;
    let plane = a.plane.into();
    let img = if a.raw {
        project_mip(&pet, plane)
    } else {
        prepare_mip(&zscore_normalize(&pet).0, plane)
    };
    fs::write(&a.out, encode_pgm16(&img)).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })
}

fn loss_check(a: LossCheckArgs) -> Result<()> {
    if a.voxels == 0 || a.coords == 0 {
        return Err(param("--voxels and --coords must be at least 1"));
    }
    let cfg = LossConfig {
        dice_include_background: a.dice_include_background,
        ..LossConfig::new(a.classes, a.lambda)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let total = a.classes * a.voxels;
    let logits = LogitsField::new(
        a.classes,
        a.voxels,
        (0..total).map(|_| rng.gen_range(-3.0..3.0)).collect(),
    )?;
    let targets = TargetField::new((0..a.voxels).map(|_| rng.gen_range(0..a.classes)).collect());
    let picked: Vec<(usize, usize)> = sample(&mut rng, total, a.coords.min(total))
        .into_iter()
        .map(|i| (i / a.voxels, i % a.voxels))
        .collect();
    let out = weighted_dice_ce(&logits, &targets, &cfg)?;
    let err = finite_difference_check(&logits, &targets, &cfg, &picked)?;
    let text = pretty(&json!({
        "classes": a.classes,
        "voxels": a.voxels,
        "lambda": a.lambda,
        "dice_include_background": a.dice_include_background,
        "loss": out.loss,
        "ce": out.ce,
        "dice": out.dice,
        "coords_checked": picked.len(),
        "max_relative_error": err,
        "passed": err < 1e-4,
    }));
    emit(a.out.as_deref(), &text)
}
