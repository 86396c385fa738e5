//! FDG vs PSMA tracer classification from coronal and sagittal MIPs.
//!
//! Each plane is encoded by a fixed 8x8 mean-pool of its normalized
//! 224x224 MIP (64 features). A small MLP (`in → 32 ReLU → 2`) is trained
//! per plane, and a fusion MLP is trained on the concatenated coronal and
//! sagittal features. The encoder has no parameters, so the fusion stage
//! sees exactly the features the per-plane models were trained on.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mip::{prepare_mip, MipImage, Plane, INPUT_SIZE};
use crate::volume::{zscore_normalize, VoxelGrid};

pub const POOL_GRID: usize = 8;
pub const POOL_BLOCK: usize = INPUT_SIZE / POOL_GRID;
pub const FEATURE_LEN: usize = POOL_GRID * POOL_GRID;
pub const HIDDEN_UNITS: usize = 32;
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TracerClass {
    Fdg,
    Psma,
}

impl TracerClass {
    pub const ALL: [TracerClass; 2] = [TracerClass::Fdg, TracerClass::Psma];

    /// Logit index: FDG = 0, PSMA = 1.
    pub fn index(self) -> usize {
        match self {
            TracerClass::Fdg => 0,
            TracerClass::Psma => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            TracerClass::Fdg
        } else {
            TracerClass::Psma
        }
    }
}

impl fmt::Display for TracerClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TracerClass::Fdg => "fdg",
            TracerClass::Psma => "psma",
        })
    }
}

impl FromStr for TracerClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fdg" => Ok(TracerClass::Fdg),
            "psma" => Ok(TracerClass::Psma),
            _ => Err(Error::param(format!("tracer must be 'fdg' or 'psma', got '{s}'"))),
        }
    }
}

/// Pooled features of one plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != FEATURE_LEN || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param(format!(
                "feature vector needs {FEATURE_LEN} finite values, got {}",
                values.len()
            )));
        }
        Ok(FeatureVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Features of the horizontally flipped image: each block row reversed.
    pub fn flipped(&self) -> FeatureVector {
        let mut v = self.0.clone();
        for row in v.chunks_exact_mut(POOL_GRID) {
            row.reverse();
        }
        FeatureVector(v)
    }
}

/// Mean of each 28x28 block of a 224x224 image, blocks in row-major order.
pub fn extract_features(img: &MipImage) -> Result<FeatureVector> {
    if img.height != INPUT_SIZE || img.width != INPUT_SIZE {
        return Err(Error::param(format!(
            "feature extraction needs a {INPUT_SIZE}x{INPUT_SIZE} image, got {}x{}",
            img.height, img.width
        )));
    }
    let mut sums = vec![0.0f64; FEATURE_LEN];
    for r in 0..INPUT_SIZE {
        let row = &img.pixels[r * INPUT_SIZE..(r + 1) * INPUT_SIZE];
        let base = (r / POOL_BLOCK) * POOL_GRID;
        for (bc, chunk) in row.chunks_exact(POOL_BLOCK).enumerate() {
            sums[base + bc] += chunk.iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    let area = (POOL_BLOCK * POOL_BLOCK) as f64;
    FeatureVector::new(sums.into_iter().map(|s| s / area).collect())
}

/// Coronal and sagittal features of a PET volume: z-score, project,
/// resize, normalize, pool.
pub fn volume_features(pet: &VoxelGrid) -> Result<(FeatureVector, FeatureVector)> {
    let (z, _) = zscore_normalize(pet);
    Ok((
        extract_features(&prepare_mip(&z, Plane::Coronal))?,
        extract_features(&prepare_mip(&z, Plane::Sagittal))?,
    ))
}

/// Concatenation used as fusion input, coronal first.
pub fn fuse(coronal: &FeatureVector, sagittal: &FeatureVector) -> Vec<f64> {
    let mut v = Vec::with_capacity(2 * FEATURE_LEN);
    v.extend_from_slice(coronal.values());
    v.extend_from_slice(sagittal.values());
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// L2 penalty added to the gradient before the Adam update.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub rng_seed: u64,
    /// Randomly flip each sample's pooled planes with probability 1/2.
    pub hflip: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl TrainConfig {
    /// Per-plane model defaults.
    pub fn plane() -> Self {
        TrainConfig {
            epochs: 50,
            learning_rate: 5e-4,
            weight_decay: 5e-4,
            batch_size: 16,
            rng_seed: 0,
            hflip: true,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Fusion model defaults.
    pub fn fusion() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            hflip: false,
            ..Self::plane()
        }
    }

    pub fn with_seed(self, rng_seed: u64) -> Self {
        TrainConfig { rng_seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::param(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub activation: String,
}

/// Weights of the two-layer perceptron. Matrices are row-major with one
/// row per output unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub architecture: Architecture,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub rng_seed: u64,
    pub config: TrainConfig,
}

/// Gradient with the same layout as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpParams {
    /// PyTorch-style init: every weight and bias ~ U(±1/sqrt(fan_in)).
    pub fn init(input: usize, config: TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        let w1 = uniform(HIDDEN_UNITS * input, input);
        let b1 = uniform(HIDDEN_UNITS, input);
        let w2 = uniform(NUM_CLASSES * HIDDEN_UNITS, HIDDEN_UNITS);
        let b2 = uniform(NUM_CLASSES, HIDDEN_UNITS);
        MlpParams {
            architecture: Self::architecture(input),
            w1,
            b1,
            w2,
            b2,
            rng_seed: config.rng_seed,
            config,
        }
    }

    /// All-zero parameters: logits are (0, 0) for every input.
    pub fn zeros(input: usize) -> Self {
        MlpParams {
            architecture: Self::architecture(input),
            w1: vec![0.0; HIDDEN_UNITS * input],
            b1: vec![0.0; HIDDEN_UNITS],
            w2: vec![0.0; NUM_CLASSES * HIDDEN_UNITS],
            b2: vec![0.0; NUM_CLASSES],
            rng_seed: 0,
            config: TrainConfig::plane(),
        }
    }

    fn architecture(input: usize) -> Architecture {
        Architecture {
            input,
            hidden: HIDDEN_UNITS,
            output: NUM_CLASSES,
            activation: "relu".into(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.architecture.input
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.architecture;
        let ok = a.output == NUM_CLASSES
            && a.activation == "relu"
            && self.w1.len() == a.hidden * a.input
            && self.b1.len() == a.hidden
            && self.w2.len() == a.output * a.hidden
            && self.b2.len() == a.output;
        if !ok {
            return Err(Error::format("model weights do not match the declared architecture"));
        }
        let finite = [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::format("model weights must be finite"));
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::param(format!(
                "feature dimension {} does not match model input {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let n_in = self.input_dim();
        (0..self.architecture.hidden)
            .map(|h| {
                let row = &self.w1[h * n_in..(h + 1) * n_in];
                let pre = self.b1[h] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                pre.max(0.0)
            })
            .collect()
    }

    fn output(&self, hidden: &[f64]) -> [f64; NUM_CLASSES] {
        let nh = self.architecture.hidden;
        let mut out = [0.0; NUM_CLASSES];
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.b2[k] + self.w2[k * nh..(k + 1) * nh].iter().zip(hidden).map(|(w, h)| w * h).sum::<f64>();
        }
        out
    }

    pub fn logits(&self, x: &[f64]) -> Result<[f64; NUM_CLASSES]> {
        self.check_input(x)?;
        Ok(self.output(&self.hidden(x)))
    }

    /// Mean softmax cross-entropy over `batch` and its gradient.
    pub fn loss_and_grad(&self, batch: &[(&[f64], TracerClass)]) -> Result<(f64, MlpGrads)> {
        let (n_in, nh) = (self.input_dim(), self.architecture.hidden);
        let mut g = MlpGrads {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; nh],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; NUM_CLASSES],
        };
        if batch.is_empty() {
            return Err(Error::param("empty batch"));
        }
        let inv = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for &(x, label) in batch {
            self.check_input(x)?;
            let h = self.hidden(x);
            let z = self.output(&h);
            let p = softmax2(z);
            loss -= p[label.index()].max(f64::MIN_POSITIVE).ln();
            let dz: [f64; NUM_CLASSES] = std::array::from_fn(|k| inv * (p[k] - (k == label.index()) as u8 as f64));
            let mut dh = vec![0.0; nh];
            for k in 0..NUM_CLASSES {
                g.b2[k] += dz[k];
                for j in 0..nh {
                    g.w2[k * nh + j] += dz[k] * h[j];
                    dh[j] += dz[k] * self.w2[k * nh + j];
                }
            }
            for j in 0..nh {
                if h[j] <= 0.0 {
                    continue;
                }
                g.b1[j] += dh[j];
                let row = &mut g.w1[j * n_in..(j + 1) * n_in];
                for (gw, &xv) in row.iter_mut().zip(x) {
                    *gw += dh[j] * xv;
                }
            }
        }
        Ok((loss * inv, g))
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

impl MlpGrads {
    fn tensors(&self) -> [&Vec<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }
}

fn softmax2(z: [f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let m = z[0].max(z[1]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

/// Adam with L2 weight decay folded into the gradient.
struct Adam {
    cfg: TrainConfig,
    step: i32,
    m: [Vec<f64>; 4],
    v: [Vec<f64>; 4],
}

impl Adam {
    fn new(params: &MlpParams, cfg: TrainConfig) -> Self {
        let zeros = |n: usize| vec![0.0; n];
        Adam {
            cfg,
            step: 0,
            m: [zeros(params.w1.len()), zeros(params.b1.len()), zeros(params.w2.len()), zeros(params.b2.len())],
            v: [zeros(params.w1.len()), zeros(params.b1.len()), zeros(params.w2.len()), zeros(params.b2.len())],
        }
    }

    fn update(&mut self, params: &mut MlpParams, grads: &MlpGrads) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (t, (p, g)) in params.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
            for i in 0..p.len() {
                let gi = g[i] + c.weight_decay * p[i];
                self.m[t][i] = c.beta1 * self.m[t][i] + (1.0 - c.beta1) * gi;
                self.v[t][i] = c.beta2 * self.v[t][i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = self.m[t][i] / bc1;
                let v_hat = self.v[t][i] / bc2;
                p[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
    }
}

/// One labeled feature vector (per-plane or fused).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: TracerClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub params: MlpParams,
    /// Full-dataset loss before the first update.
    pub initial_loss: f64,
    /// Full-dataset loss after the last epoch.
    pub final_loss: f64,
}

fn dataset_loss(params: &MlpParams, samples: &[Sample]) -> Result<f64> {
    let batch: Vec<(&[f64], TracerClass)> = samples.iter().map(|s| (s.features.as_slice(), s.label)).collect();
    Ok(params.loss_and_grad(&batch)?.0)
}

fn flip_blocks(features: &[f64]) -> Vec<f64> {
    let mut v = features.to_vec();
    for row in v.chunks_exact_mut(POOL_GRID) {
        row.reverse();
    }
    v
}

/// Trains an MLP on feature samples. Deterministic for a given config.
pub fn train_mlp(samples: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Training("training set is empty".into()));
    }
    if !TracerClass::ALL.iter().all(|c| samples.iter().any(|s| s.label == *c)) {
        return Err(Error::Training("training set must contain both tracer classes".into()));
    }
    let dim = samples[0].features.len();
    if dim == 0 || samples.iter().any(|s| s.features.len() != dim) {
        return Err(Error::param("training samples have inconsistent feature dimensions"));
    }
    let flip_ok = cfg.hflip && dim % FEATURE_LEN == 0;

    let mut params = MlpParams::init(dim, *cfg);
    let initial_loss = dataset_loss(&params, samples)?;
    let mut adam = Adam::new(&params, *cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let inputs: Vec<std::borrow::Cow<'_, [f64]>> = chunk
                .iter()
                .map(|&i| {
                    let f = samples[i].features.as_slice();
                    if flip_ok && rng.gen_bool(0.5) {
                        std::borrow::Cow::Owned(flip_blocks(f))
                    } else {
                        std::borrow::Cow::Borrowed(f)
                    }
                })
                .collect();
            let batch: Vec<(&[f64], TracerClass)> =
                chunk.iter().zip(&inputs).map(|(&i, x)| (x.as_ref(), samples[i].label)).collect();
            let (_, grads) = params.loss_and_grad(&batch)?;
            adam.update(&mut params, &grads);
        }
    }
    let final_loss = dataset_loss(&params, samples)?;
    log::debug!("trained {dim}-input MLP: loss {initial_loss:.4} -> {final_loss:.4}");
    Ok(TrainReport {
        params,
        initial_loss,
        final_loss,
    })
}

/// Per-plane model on 224x224 normalized MIPs.
pub fn train_plane(dataset: &[(MipImage, TracerClass)], cfg: &TrainConfig) -> Result<MlpParams> {
    let samples = dataset
        .iter()
        .map(|(img, label)| {
            Ok(Sample {
                features: extract_features(img)?.0,
                label: *label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(train_mlp(&samples, cfg)?.params)
}

/// Fusion model on concatenated (coronal, sagittal) features.
pub fn train_fusion(dataset: &[(FeatureVector, FeatureVector, TracerClass)], cfg: &TrainConfig) -> Result<MlpParams> {
    let samples: Vec<Sample> = dataset
        .iter()
        .map(|(c, s, label)| Sample {
            features: fuse(c, s),
            label: *label,
        })
        .collect();
    Ok(train_mlp(&samples, cfg)?.params)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: TracerClass,
    /// Softmax probability of `class`.
    pub probability: f64,
    /// `[P(FDG), P(PSMA)]`.
    pub probs: [f64; NUM_CLASSES],
}

/// Softmax over the two logits; a tie goes to FDG.
pub fn predict(params: &MlpParams, features: &[f64]) -> Result<Prediction> {
    let probs = softmax2(params.logits(features)?);
    let class = if probs[1] > probs[0] { TracerClass::Psma } else { TracerClass::Fdg };
    Ok(Prediction {
        class,
        probability: probs[class.index()],
        probs,
    })
}

/// Fraction of samples whose prediction matches the label.
pub fn evaluate_accuracy(params: &MlpParams, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::param("cannot evaluate accuracy on an empty set"));
    }
    let mut correct = 0usize;
    for s in samples {
        if predict(params, &s.features)?.class == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
}

/// k-fold cross-validation: seeded shuffle, then contiguous folds whose
/// sizes differ by at most one.
pub fn cross_validate(samples: &[Sample], k: usize, cfg: &TrainConfig) -> Result<CvResult> {
    if k < 2 {
        return Err(Error::param(format!("k must be at least 2, got {k}")));
    }
    if k > samples.len() {
        return Err(Error::param(format!("k = {k} exceeds dataset size {}", samples.len())));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(2);
    order.shuffle(&mut rng);

    let n = samples.len();
    let mut fold_accuracies = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = n / k + usize::from(f < n % k);
        let test: Vec<Sample> = order[start..start + len].iter().map(|&i| samples[i].clone()).collect();
        let train: Vec<Sample> = order[..start]
            .iter()
            .chain(&order[start + len..])
            .map(|&i| samples[i].clone())
            .collect();
        let params = train_mlp(&train, cfg)?.params;
        fold_accuracies.push(evaluate_accuracy(&params, &test)?);
        start += len;
    }
    let mean = fold_accuracies.iter().sum::<f64>() / k as f64;
    Ok(CvResult { fold_accuracies, mean })
}

/// Coronal, sagittal and fusion models saved together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracerModel {
    pub coronal: MlpParams,
    pub sagittal: MlpParams,
    pub fusion: MlpParams,
}

/// Per-plane and fused predictions for one volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracerPrediction {
    pub fused: Prediction,
    pub coronal: Prediction,
    pub sagittal: Prediction,
}

/// Features and label for one training volume.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub coronal: FeatureVector,
    pub sagittal: FeatureVector,
    pub label: TracerClass,
}

impl LabeledFeatures {
    pub fn plane_sample(&self, plane: Plane) -> Sample {
        let f = match plane {
            Plane::Coronal => &self.coronal,
            Plane::Sagittal => &self.sagittal,
        };
        Sample {
            features: f.values().to_vec(),
            label: self.label,
        }
    }

    pub fn fused_sample(&self) -> Sample {
        Sample {
            features: fuse(&self.coronal, &self.sagittal),
            label: self.label,
        }
    }
}

impl TracerModel {
    pub fn train(data: &[LabeledFeatures], plane_cfg: &TrainConfig, fusion_cfg: &TrainConfig) -> Result<Self> {
        let plane = |p: Plane| -> Vec<Sample> { data.iter().map(|d| d.plane_sample(p)).collect() };
        let fused: Vec<Sample> = data.iter().map(LabeledFeatures::fused_sample).collect();
        Ok(TracerModel {
            coronal: train_mlp(&plane(Plane::Coronal), plane_cfg)?.params,
            sagittal: train_mlp(&plane(Plane::Sagittal), plane_cfg)?.params,
            fusion: train_mlp(&fused, fusion_cfg)?.params,
        })
    }

    pub fn predict_features(&self, coronal: &FeatureVector, sagittal: &FeatureVector) -> Result<TracerPrediction> {
        Ok(TracerPrediction {
            fused: predict(&self.fusion, &fuse(coronal, sagittal))?,
            coronal: predict(&self.coronal, coronal.values())?,
            sagittal: predict(&self.sagittal, sagittal.values())?,
        })
    }

    pub fn classify_volume(&self, pet: &VoxelGrid) -> Result<TracerPrediction> {
        let (c, s) = volume_features(pet)?;
        self.predict_features(&c, &s)
    }

    pub fn validate(&self) -> Result<()> {
        self.coronal.validate()?;
        self.sagittal.validate()?;
        self.fusion.validate()?;
        if self.coronal.input_dim() != FEATURE_LEN
            || self.sagittal.input_dim() != FEATURE_LEN
            || self.fusion.input_dim() != 2 * FEATURE_LEN
        {
            return Err(Error::format("tracer model has unexpected input dimensions"));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: TracerModel = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        model.validate()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(px: Vec<f32>) -> MipImage {
        MipImage::new(Plane::Coronal, INPUT_SIZE, INPUT_SIZE, px).unwrap()
    }

    fn separable(n: usize, dim: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..2 * n)
            .map(|i| {
                let label = TracerClass::from_index(i % 2);
                let sign = if label == TracerClass::Fdg { 1.0 } else { -1.0 };
                let mut features: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.3..0.3)).collect();
                features[0] += sign;
                Sample { features, label }
            })
            .collect()
    }

    #[test]
    fn features_of_constant_image() {
        let f = extract_features(&image(vec![2.5; INPUT_SIZE * INPUT_SIZE])).unwrap();
        assert!(f.values().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn single_block_feature() {
        let mut px = vec![0.0; INPUT_SIZE * INPUT_SIZE];
        // Block (row 2, col 5).
        for r in 2 * POOL_BLOCK..3 * POOL_BLOCK {
            for c in 5 * POOL_BLOCK..6 * POOL_BLOCK {
                px[r * INPUT_SIZE + c] = 1.0;
            }
        }
        let f = extract_features(&image(px)).unwrap();
        for (i, &v) in f.values().iter().enumerate() {
            assert_eq!(v, if i == 2 * POOL_GRID + 5 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn flip_reverses_block_rows() {
        let px: Vec<f32> = (0..INPUT_SIZE * INPUT_SIZE).map(|i| ((i * 7919) % 1000) as f32 / 100.0).collect();
        let img = image(px);
        let a = extract_features(&crate::mip::flip_horizontal(&img)).unwrap();
        let b = extract_features(&img).unwrap().flipped();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn wrong_size_rejected() {
        let img = MipImage::new(Plane::Coronal, 10, 10, vec![0.0; 100]).unwrap();
        assert!(matches!(extract_features(&img), Err(Error::Parameter(_))));
    }

    #[test]
    fn zero_params_tie_to_fdg() {
        let p = predict(&MlpParams::zeros(4), &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(p.class, TracerClass::Fdg);
        assert_eq!(p.probability, 0.5);
    }

    #[test]
    fn softmax_hand_value() {
        let mut params = MlpParams::zeros(1);
        params.b2 = vec![3f64.ln(), 0.0];
        let p = predict(&params, &[0.0]).unwrap();
        assert_eq!(p.class, TracerClass::Fdg);
        assert!((p.probability - 0.75).abs() < 1e-12);
        assert!((p.probs[0] + p.probs[1] - 1.0).abs() < 1e-12);
        assert!(matches!(predict(&params, &[0.0, 1.0]), Err(Error::Parameter(_))));
    }

    #[test]
    fn training_gradient_matches_finite_differences() {
        let samples = separable(6, 5, 1);
        let params = MlpParams::init(5, TrainConfig::plane().with_seed(3));
        let batch: Vec<(&[f64], TracerClass)> = samples.iter().map(|s| (s.features.as_slice(), s.label)).collect();
        let (_, g) = params.loss_and_grad(&batch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-4;
        for t in 0..4 {
            let len = params.clone().tensors_mut()[t].len();
            for _ in 0..10 {
                let i = rng.gen_range(0..len);
                let mut plus = params.clone();
                plus.tensors_mut()[t][i] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[t][i] -= h;
                let numeric = (plus.loss_and_grad(&batch).unwrap().0 - minus.loss_and_grad(&batch).unwrap().0) / (2.0 * h);
                let analytic = g.tensors()[t][i];
                let rel = crate::loss::relative_error(analytic, numeric);
                assert!(rel < 1e-4, "tensor {t} index {i}: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn separable_data_reaches_full_accuracy() {
        let samples = separable(20, FEATURE_LEN, 2);
        let report = train_mlp(&samples, &TrainConfig::plane()).unwrap();
        assert!(report.final_loss <= report.initial_loss);
        assert_eq!(evaluate_accuracy(&report.params, &samples).unwrap(), 1.0);

        let fused: Vec<(FeatureVector, FeatureVector, TracerClass)> = samples
            .iter()
            .map(|s| {
                let f = FeatureVector::new(s.features.clone()).unwrap();
                (f.clone(), f, s.label)
            })
            .collect();
        let params = train_fusion(&fused, &TrainConfig::plane()).unwrap();
        let fs: Vec<Sample> = fused
            .iter()
            .map(|(c, s, l)| Sample {
                features: fuse(c, s),
                label: *l,
            })
            .collect();
        assert_eq!(evaluate_accuracy(&params, &fs).unwrap(), 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let samples = separable(10, 8, 3);
        let a = train_mlp(&samples, &TrainConfig::plane()).unwrap();
        let b = train_mlp(&samples, &TrainConfig::plane()).unwrap();
        assert_eq!(a, b);
        let c = train_mlp(&samples, &TrainConfig::plane().with_seed(1)).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn training_errors() {
        let samples = separable(3, 4, 0);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::plane()
        };
        assert!(matches!(train_mlp(&samples, &cfg), Err(Error::Parameter(_))));
        let one_class: Vec<Sample> = samples.iter().filter(|s| s.label == TracerClass::Fdg).cloned().collect();
        assert!(matches!(train_mlp(&one_class, &TrainConfig::plane()), Err(Error::Training(_))));
        assert!(matches!(train_mlp(&[], &TrainConfig::plane()), Err(Error::Training(_))));
    }

    #[test]
    fn random_guess_accuracy_support() {
        let samples = separable(1, 3, 9);
        let params = MlpParams::init(3, TrainConfig::plane().with_seed(77));
        let acc = evaluate_accuracy(&params, &samples).unwrap();
        assert!([0.0, 0.5, 1.0].contains(&acc));
    }

    #[test]
    fn leave_one_out_on_four() {
        let samples = separable(2, 4, 5);
        let cv = cross_validate(&samples, 4, &TrainConfig::plane()).unwrap();
        assert_eq!(cv.fold_accuracies.len(), 4);
        assert!(cv.fold_accuracies.iter().all(|&a| a == 0.0 || a == 1.0));
        assert!(matches!(cross_validate(&samples, 5, &TrainConfig::plane()), Err(Error::Parameter(_))));
        assert!(cross_validate(&samples, 1, &TrainConfig::plane()).is_err());
    }

    #[test]
    fn duplicated_items_give_equal_folds() {
        let base = separable(1, 4, 6);
        let samples: Vec<Sample> = (0..10).flat_map(|_| base.clone()).collect();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            ..TrainConfig::plane()
        };
        let cv = cross_validate(&samples, 5, &cfg).unwrap();
        assert!(cv.fold_accuracies.iter().all(|&a| a == cv.fold_accuracies[0]));
    }

    #[test]
    fn model_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig::plane();
        let model = TracerModel {
            coronal: MlpParams::init(FEATURE_LEN, cfg.with_seed(1)),
            sagittal: MlpParams::init(FEATURE_LEN, cfg.with_seed(2)),
            fusion: MlpParams::init(2 * FEATURE_LEN, TrainConfig::fusion().with_seed(3)),
        };
        let path = dir.path().join("m.json");
        model.save(&path).unwrap();
        assert_eq!(TracerModel::load(&path).unwrap(), model);

        let mut broken = model.clone();
        broken.fusion.w1.pop();
        broken.save(&path).unwrap();
        assert!(matches!(TracerModel::load(&path), Err(Error::Format(_))));
        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(TracerModel::load(&path), Err(Error::Json { .. })));
    }
}
