//! Class-weighted Dice + cross-entropy loss over a voxel field, with its
//! analytic gradient with respect to the logits.
//!
//! Class 0 is background, class 1 is lesion, classes 2.. are anatomy.
//! The lesion class carries weight `lambda`, every other class weight 1.
//! The same weights scale each voxel's cross-entropy (by target class) and
//! each class's Dice term (weighted mean over classes):
//!
//! ```text
//! CE   = (1/N) Σ_v w(t_v) · −log p[t_v, v]
//! Dice = Σ_c w(c) · (1 − (2·I_c + ε) / (S_c + G_c + ε)) / Σ_c w(c)
//! ```
//!
//! with `I_c = Σ_v p[c,v]·y[c,v]`, `S_c = Σ_v p[c,v]`, `G_c = Σ_v y[c,v]`.
//! Classes absent from both prediction and target score Dice ≈ 1 through ε.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 3.0;
pub const DEFAULT_DICE_SMOOTH: f64 = 1e-5;
/// Central-difference step used by [`finite_difference_check`].
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub num_classes: usize,
    /// Weight of the lesion class (id 1).
    pub lambda: f64,
    pub dice_smooth: f64,
    /// Background takes part in the Dice average with weight 1; when false
    /// its Dice weight is 0 (cross-entropy still weights it 1).
    pub dice_include_background: bool,
}

impl LossConfig {
    pub fn new(num_classes: usize, lambda: f64) -> Result<Self> {
        let cfg = LossConfig {
            num_classes,
            lambda,
            dice_smooth: DEFAULT_DICE_SMOOTH,
            dice_include_background: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::param(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::param(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.dice_smooth > 0.0 && self.dice_smooth.is_finite()) {
            return Err(Error::param(format!("dice smoothing must be positive, got {}", self.dice_smooth)));
        }
        Ok(())
    }

    /// Cross-entropy weight of class `c`.
    pub fn class_weight(&self, c: usize) -> f64 {
        if c == 1 {
            self.lambda
        } else {
            1.0
        }
    }

    fn dice_weight(&self, c: usize) -> f64 {
        if c == 0 && !self.dice_include_background {
            0.0
        } else {
            self.class_weight(c)
        }
    }

    /// The same configuration with every class weighted 1.
    pub fn unweighted(&self) -> Self {
        LossConfig { lambda: 1.0, ..*self }
    }
}

/// `C x N` logits stored class-major: `data[c * N + v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsField {
    classes: usize,
    voxels: usize,
    data: Vec<f64>,
}

impl LogitsField {
    pub fn new(classes: usize, voxels: usize, data: Vec<f64>) -> Result<Self> {
        if classes == 0 || voxels == 0 || data.len() != classes * voxels {
            return Err(Error::param(format!(
                "logits of length {} do not form a {classes}x{voxels} field",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("logits must be finite"));
        }
        Ok(LogitsField { classes, voxels, data })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn voxels(&self) -> usize {
        self.voxels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, v: usize) -> f64 {
        self.data[c * self.voxels + v]
    }

    fn with_value(&self, c: usize, v: usize, value: f64) -> LogitsField {
        let mut out = self.clone();
        out.data[c * self.voxels + v] = value;
        out
    }
}

/// Per-voxel target class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetField {
    pub labels: Vec<usize>,
}

impl TargetField {
    pub fn new(labels: Vec<usize>) -> Self {
        TargetField { labels }
    }
}

/// Softmax over classes at each voxel, same layout as the logits.
pub fn softmax_field(logits: &LogitsField) -> Vec<f64> {
    let (c_n, n) = (logits.classes, logits.voxels);
    let mut p = vec![0.0; c_n * n];
    for v in 0..n {
        let max = (0..c_n).map(|c| logits.get(c, v)).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..c_n {
            let e = (logits.get(c, v) - max).exp();
            p[c * n + v] = e;
            sum += e;
        }
        for c in 0..c_n {
            p[c * n + v] /= sum;
        }
    }
    p
}

/// Loss value split into its two terms, plus the gradient of the total.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub ce: f64,
    pub dice: f64,
    /// d(loss)/d(logits), class-major like the logits.
    pub grad: Vec<f64>,
}

fn check_inputs(logits: &LogitsField, targets: &TargetField, cfg: &LossConfig) -> Result<()> {
    cfg.validate()?;
    if logits.classes != cfg.num_classes {
        return Err(Error::param(format!(
            "logits have {} classes, config expects {}",
            logits.classes, cfg.num_classes
        )));
    }
    if targets.labels.len() != logits.voxels {
        return Err(Error::param(format!(
            "{} targets for {} voxels",
            targets.labels.len(),
            logits.voxels
        )));
    }
    if let Some((v, t)) = targets.labels.iter().enumerate().find(|(_, &t)| t >= cfg.num_classes) {
        return Err(Error::param(format!(
            "target label {t} at voxel {v} is not below {} classes",
            cfg.num_classes
        )));
    }
    Ok(())
}

/// Weighted cross-entropy and its logit gradient.
pub fn weighted_ce(logits: &LogitsField, targets: &TargetField, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    check_inputs(logits, targets, cfg)?;
    let p = softmax_field(logits);
    Ok(ce_from_probs(logits, &p, targets, cfg))
}

fn ce_from_probs(logits: &LogitsField, p: &[f64], targets: &TargetField, cfg: &LossConfig) -> (f64, Vec<f64>) {
    let (c_n, n) = (logits.classes, logits.voxels);
    let inv_n = 1.0 / n as f64;
    let mut grad = vec![0.0; c_n * n];
    let mut total = 0.0;
    for (v, &t) in targets.labels.iter().enumerate() {
        let w = cfg.class_weight(t);
        // log-softmax of the target logit, computed stably.
        let max = (0..c_n).map(|c| logits.get(c, v)).fold(f64::NEG_INFINITY, f64::max);
        let lse = (0..c_n).map(|c| (logits.get(c, v) - max).exp()).sum::<f64>().ln() + max;
        total += w * (lse - logits.get(t, v));
        for c in 0..c_n {
            let y = (c == t) as u8 as f64;
            grad[c * n + v] = inv_n * w * (p[c * n + v] - y);
        }
    }
    (total * inv_n, grad)
}

/// Weighted soft-Dice loss and its logit gradient.
pub fn weighted_dice(logits: &LogitsField, targets: &TargetField, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    check_inputs(logits, targets, cfg)?;
    let p = softmax_field(logits);
    Ok(dice_from_probs(logits, &p, targets, cfg))
}

fn dice_from_probs(logits: &LogitsField, p: &[f64], targets: &TargetField, cfg: &LossConfig) -> (f64, Vec<f64>) {
    let (c_n, n) = (logits.classes, logits.voxels);
    let eps = cfg.dice_smooth;
    let weights: Vec<f64> = (0..c_n).map(|c| cfg.dice_weight(c)).collect();
    let w_sum: f64 = weights.iter().sum();

    // d(loss)/d(p), then pushed through the softmax Jacobian.
    let mut dp = vec![0.0; c_n * n];
    let mut loss = 0.0;
    for c in 0..c_n {
        let row = &p[c * n..(c + 1) * n];
        let (mut s, mut g, mut i) = (0.0, 0.0, 0.0);
        for (v, &pv) in row.iter().enumerate() {
            s += pv;
            if targets.labels[v] == c {
                g += 1.0;
                i += pv;
            }
        }
        let den = s + g + eps;
        let d = (2.0 * i + eps) / den;
        loss += weights[c] * (1.0 - d);
        let scale = -weights[c] / w_sum;
        for v in 0..n {
            let y = (targets.labels[v] == c) as u8 as f64;
            dp[c * n + v] = scale * (2.0 * y - d) / den;
        }
    }

    let mut grad = vec![0.0; c_n * n];
    for v in 0..n {
        let dot: f64 = (0..c_n).map(|c| p[c * n + v] * dp[c * n + v]).sum();
        for c in 0..c_n {
            grad[c * n + v] = p[c * n + v] * (dp[c * n + v] - dot);
        }
    }
    (loss / w_sum, grad)
}

/// Total loss `CE + Dice` with its gradient.
pub fn weighted_dice_ce(logits: &LogitsField, targets: &TargetField, cfg: &LossConfig) -> Result<LossOutput> {
    check_inputs(logits, targets, cfg)?;
    let p = softmax_field(logits);
    let (ce, ce_grad) = ce_from_probs(logits, &p, targets, cfg);
    let (dice, dice_grad) = dice_from_probs(logits, &p, targets, cfg);
    let grad = ce_grad.iter().zip(&dice_grad).map(|(a, b)| a + b).collect();
    Ok(LossOutput {
        loss: ce + dice,
        ce,
        dice,
        grad,
    })
}

/// Mean loss over a batch of samples; each sample's gradient is scaled
/// by `1/B` and the gradients are returned in sample order.
pub fn batch_dice_ce(samples: &[(LogitsField, TargetField)], cfg: &LossConfig) -> Result<(f64, Vec<Vec<f64>>)> {
    if samples.is_empty() {
        return Err(Error::param("empty batch"));
    }
    let inv_b = 1.0 / samples.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(samples.len());
    for (logits, targets) in samples {
        let out = weighted_dice_ce(logits, targets, cfg)?;
        total += out.loss;
        grads.push(out.grad.into_iter().map(|g| g * inv_b).collect());
    }
    Ok((total * inv_b, grads))
}

/// Relative error `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the analytic gradient with central differences (step 1e-4)
/// at the given `(class, voxel)` coordinates; returns the largest
/// relative error.
pub fn finite_difference_check(
    logits: &LogitsField,
    targets: &TargetField,
    cfg: &LossConfig,
    coords: &[(usize, usize)],
) -> Result<f64> {
    if coords.is_empty() {
        return Err(Error::param("finite difference check needs at least one coordinate"));
    }
    let analytic = weighted_dice_ce(logits, targets, cfg)?;
    let mut worst: f64 = 0.0;
    for &(c, v) in coords {
        if c >= logits.classes || v >= logits.voxels {
            return Err(Error::param(format!("coordinate ({c}, {v}) outside the field")));
        }
        let z = logits.get(c, v);
        let plus = weighted_dice_ce(&logits.with_value(c, v, z + FD_STEP), targets, cfg)?.loss;
        let minus = weighted_dice_ce(&logits.with_value(c, v, z - FD_STEP), targets, cfg)?.loss;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic.grad[c * logits.voxels + v], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_case(rng: &mut ChaCha8Rng, c: usize, n: usize) -> (LogitsField, TargetField) {
        let data = (0..c * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let labels = (0..n).map(|_| rng.gen_range(0..c)).collect();
        (LogitsField::new(c, n, data).unwrap(), TargetField::new(labels))
    }

    /// Scalar re-derivation of the loss straight from the formulas, one
    /// voxel at a time, without sharing code with the implementation.
    fn oracle_loss(logits: &[Vec<f64>], targets: &[usize], lambda: f64, eps: f64) -> (f64, f64) {
        let c_n = logits.len();
        let n = targets.len();
        let w = |c: usize| if c == 1 { lambda } else { 1.0 };
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|v| {
                let z: f64 = (0..c_n).map(|c| logits[c][v].exp()).sum();
                (0..c_n).map(|c| logits[c][v].exp() / z).collect()
            })
            .collect();
        let ce = (0..n).map(|v| -w(targets[v]) * probs[v][targets[v]].ln()).sum::<f64>() / n as f64;
        let mut num = 0.0;
        let mut wsum = 0.0;
        for c in 0..c_n {
            let inter: f64 = (0..n).filter(|&v| targets[v] == c).map(|v| probs[v][c]).sum();
            let s: f64 = (0..n).map(|v| probs[v][c]).sum();
            let g = targets.iter().filter(|&&t| t == c).count() as f64;
            num += w(c) * (1.0 - (2.0 * inter + eps) / (s + g + eps));
            wsum += w(c);
        }
        (ce, num / wsum)
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_field(&LogitsField::new(3, 1, vec![0.0; 3]).unwrap());
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax_field(&LogitsField::new(2, 1, vec![1000.0, 0.0]).unwrap());
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300);
        let p = softmax_field(&LogitsField::new(3, 1, vec![1f64.ln(), 2f64.ln(), 7f64.ln()]).unwrap());
        for (a, b) in p.iter().zip([0.1, 0.2, 0.7]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_voxel_worked_example() {
        let logits = LogitsField::new(2, 2, vec![0.0; 4]).unwrap();
        let targets = TargetField::new(vec![0, 1]);
        let cfg = LossConfig::new(2, 3.0).unwrap();
        let out = weighted_dice_ce(&logits, &targets, &cfg).unwrap();
        assert!((out.ce - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((out.ce - 1.386294).abs() < 1e-6);
        let (ce, dice) = oracle_loss(&[vec![0.0, 0.0], vec![0.0, 0.0]], &[0, 1], 3.0, 1e-5);
        assert!((out.ce - ce).abs() < 1e-12);
        assert!((out.dice - dice).abs() < 1e-12);
        // Every class has S = 1, G = 1, I = 0.5 here, so Dice loss = 1 − (1+ε)/(2+ε).
        let expected = 1.0 - (1.0 + 1e-5) / (2.0 + 1e-5);
        assert!((out.dice - expected).abs() < 1e-12);
    }

    #[test]
    fn matches_scalar_oracle_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let c = rng.gen_range(2..6);
            let n = rng.gen_range(1..20);
            let (logits, targets) = random_case(&mut rng, c, n);
            let lambda = [0.5, 1.0, 3.0][rng.gen_range(0..3)];
            let rows: Vec<Vec<f64>> = (0..c).map(|k| (0..n).map(|v| logits.get(k, v)).collect()).collect();
            let out = weighted_dice_ce(&logits, &targets, &LossConfig::new(c, lambda).unwrap()).unwrap();
            let (ce, dice) = oracle_loss(&rows, &targets.labels, lambda, 1e-5);
            assert!((out.ce - ce).abs() < 1e-10);
            assert!((out.dice - dice).abs() < 1e-10);
        }
    }

    #[test]
    fn perfect_prediction_limit() {
        let targets = TargetField::new(vec![0, 1, 2, 1, 0]);
        let c_n = 3;
        let n = targets.labels.len();
        let mut data = vec![0.0; c_n * n];
        for (v, &t) in targets.labels.iter().enumerate() {
            data[t * n + v] = 40.0;
        }
        let logits = LogitsField::new(c_n, n, data).unwrap();
        let cfg = LossConfig::new(c_n, 3.0).unwrap();
        let out = weighted_dice_ce(&logits, &targets, &cfg).unwrap();
        assert!(out.ce < 1e-10);
        assert!(out.dice < 1e-4);
        for (v, &t) in targets.labels.iter().enumerate() {
            assert!(out.grad[t * n + v].abs() < 1e-6);
        }
    }

    #[test]
    fn lambda_one_equals_unweighted() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (logits, targets) = random_case(&mut rng, 4, 17);
        let cfg = LossConfig::new(4, 1.0).unwrap();
        let a = weighted_dice_ce(&logits, &targets, &cfg).unwrap();
        let b = weighted_dice_ce(&logits, &targets, &cfg.unweighted()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ce_weight_is_local_to_lesion_voxels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (logits, _) = random_case(&mut rng, 3, 6);
        let targets = TargetField::new(vec![0, 1, 2, 0, 1, 2]);
        let (_, g1) = weighted_ce(&logits, &targets, &LossConfig::new(3, 1.0).unwrap()).unwrap();
        let (_, g3) = weighted_ce(&logits, &targets, &LossConfig::new(3, 3.0).unwrap()).unwrap();
        let full1 = weighted_dice_ce(&logits, &targets, &LossConfig::new(3, 1.0).unwrap()).unwrap();
        let full3 = weighted_dice_ce(&logits, &targets, &LossConfig::new(3, 3.0).unwrap()).unwrap();
        for v in 0..6 {
            for c in 0..3 {
                let i = c * 6 + v;
                if targets.labels[v] == 1 {
                    assert!((g3[i] - 3.0 * g1[i]).abs() < 1e-15);
                    assert_ne!(full1.grad[i], full3.grad[i]);
                } else {
                    assert_eq!(g1[i], g3[i]);
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (logits, targets) = random_case(&mut rng, 4, 27);
        let coords: Vec<(usize, usize)> = (0..20).map(|_| (rng.gen_range(0..4), rng.gen_range(0..27))).collect();
        for lambda in [0.5, 1.0, 3.0] {
            let mut cfg = LossConfig::new(4, lambda).unwrap();
            assert!(finite_difference_check(&logits, &targets, &cfg, &coords).unwrap() < 1e-4);
            cfg.dice_include_background = false;
            assert!(finite_difference_check(&logits, &targets, &cfg, &coords).unwrap() < 1e-4);
        }
    }

    #[test]
    fn shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (logits, targets) = random_case(&mut rng, 3, 5);
        let mut shifted = logits.data().to_vec();
        for c in 0..3 {
            shifted[c * 5 + 2] += 17.5;
        }
        let shifted = LogitsField::new(3, 5, shifted).unwrap();
        let cfg = LossConfig::new(3, 3.0).unwrap();
        let a = weighted_dice_ce(&logits, &targets, &cfg).unwrap();
        let b = weighted_dice_ce(&shifted, &targets, &cfg).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-6);
        for (x, y) in a.grad.iter().zip(&b.grad) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_averages() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s1 = random_case(&mut rng, 3, 4);
        let s2 = random_case(&mut rng, 3, 4);
        let cfg = LossConfig::new(3, 3.0).unwrap();
        let (loss, grads) = batch_dice_ce(&[s1.clone(), s2.clone()], &cfg).unwrap();
        let a = weighted_dice_ce(&s1.0, &s1.1, &cfg).unwrap();
        let b = weighted_dice_ce(&s2.0, &s2.1, &cfg).unwrap();
        assert!((loss - (a.loss + b.loss) / 2.0).abs() < 1e-15);
        assert_eq!(grads[0][0], a.grad[0] / 2.0);
        assert!(batch_dice_ce(&[], &cfg).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let logits = LogitsField::new(2, 2, vec![0.0; 4]).unwrap();
        let cfg = LossConfig::new(2, 3.0).unwrap();
        let err = weighted_dice_ce(&logits, &TargetField::new(vec![0, 2]), &cfg).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
        assert!(weighted_dice_ce(&logits, &TargetField::new(vec![0]), &cfg).is_err());
        assert!(LossConfig::new(1, 3.0).is_err());
        assert!(LossConfig::new(2, 0.0).is_err());
        assert!(LogitsField::new(2, 2, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
        assert!(finite_difference_check(&logits, &TargetField::new(vec![0, 1]), &cfg, &[]).is_err());
    }
}
