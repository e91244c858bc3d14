//! Detecting adversarial samples from their artifact features: threshold
//! scores on either feature, a logistic regression over both, ROC/AUC
//! evaluation, and an uncertainty-cutoff rule that routes suspicious inputs
//! to an extra undecided class.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::artifact::{uncertainty, ArtifactFeatures};
use crate::attack::fgsm;
use crate::error::{Error, Result};
use crate::nn::{predict, NetworkModel};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScoreParams {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub zscore: ZScoreParams,
    pub weights: [f64; 2],
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// (false positive rate, true positive rate), from (0,0) to (1,1).
    pub points: Vec<(f64, f64)>,
    /// Score threshold at each point; the first is +infinity.
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRegConfig {
    pub iters: usize,
    pub learning_rate: f64,
    pub l2_penalty: f64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self {
            iters: 2000,
            learning_rate: 0.1,
            l2_penalty: 1e-4,
        }
    }
}

/// Per-feature mean and population standard deviation.
pub fn zscore_fit(features: &[[f64; 2]]) -> Result<ZScoreParams> {
    if features.len() < 2 {
        return Err(Error::InvalidSpec(
            "normalization needs at least 2 samples".into(),
        ));
    }
    let n = features.len() as f64;
    let mut mean = [0.0; 2];
    for f in features {
        mean[0] += f[0];
        mean[1] += f[1];
    }
    mean[0] /= n;
    mean[1] /= n;
    let mut var = [0.0; 2];
    for f in features {
        var[0] += (f[0] - mean[0]) * (f[0] - mean[0]);
        var[1] += (f[1] - mean[1]) * (f[1] - mean[1]);
    }
    let mut std = [0.0; 2];
    for k in 0..2 {
        var[k] /= n;
        if var[k] <= 0.0 {
            return Err(Error::DegenerateFeature(k));
        }
        std[k] = var[k].sqrt();
    }
    Ok(ZScoreParams { mean, std })
}

pub fn zscore_apply(params: &ZScoreParams, v: [f64; 2]) -> [f64; 2] {
    [
        (v[0] - params.mean[0]) / params.std[0],
        (v[1] - params.mean[1]) / params.std[1],
    ]
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Mean logistic loss with an l2 weight penalty, and its gradient.
pub(crate) fn logreg_loss_and_grad(
    z: &[[f64; 2]],
    labels: &[bool],
    w: [f64; 2],
    b: f64,
    l2: f64,
) -> (f64, [f64; 2], f64) {
    let n = z.len() as f64;
    let mut loss = 0.0;
    let mut gw = [0.0; 2];
    let mut gb = 0.0;
    for (f, &label) in z.iter().zip(labels) {
        let p = sigmoid(w[0] * f[0] + w[1] * f[1] + b);
        let y = if label { 1.0 } else { 0.0 };
        let pc = p.clamp(1e-15, 1.0 - 1e-15);
        loss += -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        let d = p - y;
        gw[0] += d * f[0];
        gw[1] += d * f[1];
        gb += d;
    }
    loss = loss / n + l2 * (w[0] * w[0] + w[1] * w[1]);
    gw[0] = gw[0] / n + 2.0 * l2 * w[0];
    gw[1] = gw[1] / n + 2.0 * l2 * w[1];
    gb /= n;
    (loss, gw, gb)
}

/// Full-batch gradient descent on the z-scored features from zero
/// initialization. Labels: true marks the positive (adversarial) class.
pub fn train_logreg(
    features: &[[f64; 2]],
    labels: &[bool],
    config: &LogRegConfig,
) -> Result<DetectorModel> {
    if features.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    if !(labels.contains(&true) && labels.contains(&false)) {
        return Err(Error::SingleClass);
    }
    let zscore = zscore_fit(features)?;
    let z: Vec<[f64; 2]> = features.iter().map(|&f| zscore_apply(&zscore, f)).collect();

    let mut w = [0.0; 2];
    let mut b = 0.0;
    for _ in 0..config.iters {
        let (loss, gw, gb) = logreg_loss_and_grad(&z, labels, w, b, config.l2_penalty);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        w[0] -= config.learning_rate * gw[0];
        w[1] -= config.learning_rate * gw[1];
        b -= config.learning_rate * gb;
    }
    if !(w[0].is_finite() && w[1].is_finite() && b.is_finite()) {
        return Err(Error::NonFiniteLoss);
    }
    Ok(DetectorModel {
        zscore,
        weights: w,
        bias: b,
    })
}

/// Detector probability that the feature pair is adversarial.
pub fn score(detector: &DetectorModel, features: [f64; 2]) -> f64 {
    let z = zscore_apply(&detector.zscore, features);
    sigmoid(detector.weights[0] * z[0] + detector.weights[1] * z[1] + detector.bias)
}

/// Which scalar score orders samples for a ROC sweep.
#[derive(Debug, Clone, Copy)]
pub enum ScoreKind<'a> {
    /// The raw uncertainty value.
    Uncertainty,
    /// The negative log kernel density.
    Density,
    /// The logistic-regression probability over both features.
    Combined(&'a DetectorModel),
}

impl<'a> ScoreKind<'a> {
    pub fn name(&self) -> &'static str {
        match self {
            ScoreKind::Uncertainty => "uncertainty",
            ScoreKind::Density => "density",
            ScoreKind::Combined(_) => "combined",
        }
    }
}

pub fn threshold_score(kind: &ScoreKind, features: &ArtifactFeatures) -> f64 {
    match kind {
        ScoreKind::Uncertainty => features.uncertainty,
        ScoreKind::Density => features.neg_log_density,
        ScoreKind::Combined(detector) => {
            score(detector, [features.uncertainty, features.neg_log_density])
        }
    }
}

/// Threshold sweep over the distinct scores, descending; tied scores form a
/// single curve vertex. AUC is the trapezoidal integral.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let mut auc = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_fpr, mut prev_tpr) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        // consume the whole tie block at this score
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let fpr = fp as f64 / neg as f64;
        let tpr = tp as f64 / pos as f64;
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        points.push((fpr, tpr));
        thresholds.push(s);
        prev_fpr = fpr;
        prev_tpr = tpr;
    }
    Ok(RocCurve {
        points,
        thresholds,
        auc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSet {
    Normal,
    Noisy,
    Adversarial,
}

impl SampleSet {
    pub fn name(&self) -> &'static str {
        match self {
            SampleSet::Normal => "normal",
            SampleSet::Noisy => "noisy",
            SampleSet::Adversarial => "adversarial",
        }
    }
}

/// One evaluated sample: which set it belongs to, which attack produced or
/// matched it, and its shared identity across sets for deduplication.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledFeatures {
    pub set: SampleSet,
    pub attack: String,
    pub sample_id: usize,
    pub features: ArtifactFeatures,
}

#[derive(Debug, Clone)]
pub struct EvaluationReport {
    /// Attack name -> ROC of adversarial-vs-(normal + matched noisy).
    pub per_attack: BTreeMap<String, RocCurve>,
    /// Adversarial union vs normal (deduplicated) union noisy.
    pub overall: RocCurve,
}

/// Evaluates one score kind. The positive class is the adversarial set; the
/// negative class joins the normal and noisy sets.
pub fn evaluate_detector(
    samples: &[LabeledFeatures],
    kind: &ScoreKind,
) -> Result<EvaluationReport> {
    for required in [SampleSet::Normal, SampleSet::Noisy, SampleSet::Adversarial] {
        if !samples.iter().any(|s| s.set == required) {
            return Err(Error::MissingSet(required.name().into()));
        }
    }
    let attacks: BTreeSet<&str> = samples
        .iter()
        .filter(|s| s.set == SampleSet::Adversarial)
        .map(|s| s.attack.as_str())
        .collect();

    let score_of = |s: &LabeledFeatures| threshold_score(kind, &s.features);

    let mut per_attack = BTreeMap::new();
    for attack in attacks {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for s in samples {
            let relevant = match s.set {
                SampleSet::Adversarial | SampleSet::Noisy => s.attack == attack,
                SampleSet::Normal => s.attack == attack,
            };
            if relevant {
                scores.push(score_of(s));
                labels.push(s.set == SampleSet::Adversarial);
            }
        }
        per_attack.insert(attack.to_string(), roc_curve(&scores, &labels)?);
    }

    // Normal rows repeat per attack with identical features; count each
    // underlying sample once in the overall negative class.
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut seen_normals = BTreeSet::new();
    for s in samples {
        match s.set {
            SampleSet::Normal => {
                if seen_normals.insert(s.sample_id) {
                    scores.push(score_of(s));
                    labels.push(false);
                }
            }
            SampleSet::Noisy => {
                scores.push(score_of(s));
                labels.push(false);
            }
            SampleSet::Adversarial => {
                scores.push(score_of(s));
                labels.push(true);
            }
        }
    }
    let overall = roc_curve(&scores, &labels)?;
    Ok(EvaluationReport {
        per_attack,
        overall,
    })
}

/// Linear-interpolation percentile of already-sorted values, p in [0, 100].
pub(crate) fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Crafts single-step adversarial counterparts for the correctly classified
/// validation samples and returns the requested percentile of their
/// uncertainties.
#[allow(clippy::too_many_arguments)]
pub fn uncertainty_threshold(
    model: &NetworkModel,
    valid_x: &Tensor,
    valid_y: &Tensor,
    percentile: f64,
    epsilon: f64,
    t_samples: usize,
    seed: u64,
) -> Result<f64> {
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::InvalidSpec(format!(
            "percentile {percentile} outside [0, 100]"
        )));
    }
    let n = valid_x.shape()[0];
    let mut uncertainties = Vec::new();
    for i in 0..n {
        let x = Tensor::from_raw(model.input_shape.clone(), valid_x.row(i).to_vec());
        let y = Tensor::from_raw(vec![model.num_classes], valid_y.row(i).to_vec());
        let result = match fgsm(model, &x, &y, epsilon) {
            Ok(r) => r,
            Err(Error::NotCorrectlyClassified) => continue,
            Err(e) => return Err(e),
        };
        let u = uncertainty(model, &result.x_adv, t_samples, derive_seed(seed, &[i as u64]))?;
        uncertainties.push(u);
    }
    if uncertainties.is_empty() {
        return Err(Error::EmptyValidation);
    }
    uncertainties.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(percentile_sorted(&uncertainties, percentile))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    Class(usize),
    Undecided,
}

/// Predicts normally unless the sample's uncertainty strictly exceeds the
/// cutoff, in which case it is routed to the undecided class.
pub fn classify_with_undecided(
    model: &NetworkModel,
    cutoff: f64,
    x: &Tensor,
    t_samples: usize,
    seed: u64,
) -> Result<Classification> {
    let u = uncertainty(model, x, t_samples, seed)?;
    if u > cutoff {
        Ok(Classification::Undecided)
    } else {
        Ok(Classification::Class(predict(model, x)?))
    }
}
