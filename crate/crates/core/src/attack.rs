//! Adversarial sample generation: FGSM, the two iterative BIM variants,
//! JSMA, a gradient-descent L0 attack, and perturbation-matched noisy
//! baselines.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    forward_cached, input_gradient, logit_row_gradient, predict, prob_jacobian_rows,
    DropoutMode, NetworkModel,
};
use crate::rng::{sample_indices, seeded_rng, standard_normal};
use crate::tensor::Tensor;

/// How a targeted attack picks its target class from the true label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetRule {
    /// target = (true_label + 1) mod num_classes
    NextClass,
}

impl TargetRule {
    pub fn target(&self, true_label: usize, num_classes: usize) -> usize {
        match self {
            TargetRule::NextClass => (true_label + 1) % num_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CwParams {
    pub kappa: f64,
    pub c: f64,
    pub steps: usize,
    pub step_size: f64,
    pub grad_threshold: f64,
}

impl Default for CwParams {
    fn default() -> Self {
        Self {
            kappa: 0.0,
            c: 1.0,
            steps: 1000,
            step_size: 0.01,
            grad_threshold: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AttackKind {
    Fgsm {
        epsilon: f64,
    },
    BimA {
        eps_step: f64,
        eps_clip: f64,
        max_iters: usize,
    },
    BimB {
        eps_step: f64,
        eps_clip: f64,
        n_iters: usize,
    },
    Jsma {
        target_rule: TargetRule,
        theta: f64,
        max_fraction: f64,
    },
    CwL0(CwParams),
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Fgsm { .. } => "fgsm",
            AttackKind::BimA { .. } => "bim-a",
            AttackKind::BimB { .. } => "bim-b",
            AttackKind::Jsma { .. } => "jsma",
            AttackKind::CwL0(_) => "cw-l0",
        }
    }

    /// Attacks that change few pixels outright; their noisy baseline matches
    /// the L0 count instead of the L2 norm.
    pub fn is_sparse(&self) -> bool {
        matches!(self, AttackKind::Jsma { .. } | AttackKind::CwL0(_))
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            AttackKind::Fgsm { epsilon } => epsilon > 0.0,
            AttackKind::BimA {
                eps_step, eps_clip, ..
            }
            | AttackKind::BimB {
                eps_step, eps_clip, ..
            } => eps_step > 0.0 && eps_clip > 0.0,
            AttackKind::Jsma {
                theta,
                max_fraction,
                ..
            } => theta > 0.0 && max_fraction > 0.0 && max_fraction <= 1.0,
            AttackKind::CwL0(p) => {
                p.step_size > 0.0 && p.kappa >= 0.0 && p.c >= 0.0 && p.grad_threshold >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!(
                "invalid parameters for {}",
                self.name()
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub x: Tensor,
    pub x_adv: Tensor,
    /// Perturbation-matched random baseline; filled in by `with_noisy`.
    pub x_noisy: Option<Tensor>,
    pub true_label: usize,
    pub adv_label: usize,
    /// Misclassified for untargeted attacks, hit the target for targeted ones.
    pub success: bool,
    pub l2_norm: f64,
    pub l0_count: usize,
    pub iterations: usize,
}

impl AttackResult {
    fn finish(
        model: &NetworkModel,
        x: Tensor,
        mut x_adv: Tensor,
        true_label: usize,
        target: Option<usize>,
        iterations: usize,
    ) -> Result<Self> {
        x_adv.clamp01();
        let adv_label = predict(model, &x_adv)?;
        let success = match target {
            Some(t) => adv_label == t,
            None => adv_label != true_label,
        };
        let l2_norm = x.l2_distance(&x_adv);
        let l0_count = x.l0_distance(&x_adv);
        Ok(Self {
            x,
            x_adv,
            x_noisy: None,
            true_label,
            adv_label,
            success,
            l2_norm,
            l0_count,
            iterations,
        })
    }

    /// Attaches the matched noisy baseline for this result's attack kind.
    pub fn with_noisy(mut self, kind: &AttackKind, seed: u64) -> Result<Self> {
        self.x_noisy = Some(noisy_counterpart(&self.x, &self.x_adv, kind, seed)?);
        Ok(self)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_correctly_classified(
    model: &NetworkModel,
    x: &Tensor,
    y_onehot: &Tensor,
) -> Result<usize> {
    let true_label = y_onehot.argmax();
    if predict(model, x)? != true_label {
        return Err(Error::NotCorrectlyClassified);
    }
    Ok(true_label)
}

/// Single-step gradient-sign attack: x + epsilon * sign(dJ/dx), boxed to [0,1].
pub fn fgsm(
    model: &NetworkModel,
    x: &Tensor,
    y_onehot: &Tensor,
    epsilon: f64,
) -> Result<AttackResult> {
    if epsilon < 0.0 {
        return Err(Error::InvalidSpec("epsilon must be non-negative".into()));
    }
    let true_label = check_correctly_classified(model, x, y_onehot)?;
    let grad = input_gradient(model, x, y_onehot)?;
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(xi, gi)| xi + epsilon * sign(*gi))
        .collect();
    let x_adv = Tensor::from_raw(x.shape().to_vec(), data);
    AttackResult::finish(model, x.clone(), x_adv, true_label, None, 1)
}

/// Iterative gradient-sign attack. Each step moves by eps_step in the
/// gradient sign, clips back into the eps_clip ball around x, then into
/// [0,1]. BimA stops at the first misclassification; BimB always runs the
/// configured number of iterations.
pub fn bim(
    model: &NetworkModel,
    x: &Tensor,
    y_onehot: &Tensor,
    kind: &AttackKind,
) -> Result<AttackResult> {
    let (eps_step, eps_clip, iters, stop_early) = match *kind {
        AttackKind::BimA {
            eps_step,
            eps_clip,
            max_iters,
        } => (eps_step, eps_clip, max_iters, true),
        AttackKind::BimB {
            eps_step,
            eps_clip,
            n_iters,
        } => (eps_step, eps_clip, n_iters, false),
        _ => return Err(Error::InvalidSpec("bim requires a BIM attack kind".into())),
    };
    kind.validate()?;
    let true_label = check_correctly_classified(model, x, y_onehot)?;
    let mut current = x.clone();
    let mut iterations = 0;
    for _ in 0..iters {
        let grad = input_gradient(model, &current, y_onehot)?;
        for ((ci, xi), gi) in current
            .data_mut()
            .iter_mut()
            .zip(x.data())
            .zip(grad.data())
        {
            let stepped = *ci + eps_step * sign(*gi);
            *ci = stepped.clamp(xi - eps_clip, xi + eps_clip).clamp(0.0, 1.0);
        }
        iterations += 1;
        if stop_early && predict(model, &current)? != true_label {
            break;
        }
    }
    AttackResult::finish(model, x.clone(), current, true_label, None, iterations)
}

/// Saliency of each feature for pushing the model toward `target`, given the
/// per-class softmax Jacobian rows. Saturated features (already at 1.0) and
/// features whose gradients point the wrong way score zero.
pub(crate) fn jsma_saliency(df_rows: &[Vec<f64>], target: usize, x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut s = vec![0.0; d];
    for i in 0..d {
        if x[i] >= 1.0 {
            continue;
        }
        let alpha = df_rows[target][i];
        let beta: f64 = df_rows
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != target)
            .map(|(_, row)| row[i])
            .sum();
        if alpha < 0.0 || beta > 0.0 {
            continue;
        }
        s[i] = alpha * beta.abs();
    }
    s
}

/// The admissible pair with the largest combined saliency; the score is
/// additive so the top two features win. Ties resolve to lower indices.
pub(crate) fn jsma_best_pair(s: &[f64], x: &[f64]) -> Option<(usize, usize)> {
    let argmax = |skip: Option<usize>| -> Option<usize> {
        let mut best: Option<usize> = None;
        for i in 0..s.len() {
            if x[i] >= 1.0 || Some(i) == skip {
                continue;
            }
            if best.map_or(true, |b| s[i] > s[b]) {
                best = Some(i);
            }
        }
        best
    };
    let i = argmax(None)?;
    let j = argmax(Some(i))?;
    if s[i] + s[j] > 0.0 {
        Some((i.min(j), i.max(j)))
    } else {
        None
    }
}

/// Targeted saliency-map attack: repeatedly bumps the two most salient
/// features by theta (toward 1.0) until the target class is reached, the
/// changed-feature budget is exhausted, or no admissible pair remains.
pub fn jsma(
    model: &NetworkModel,
    x: &Tensor,
    target: usize,
    theta: f64,
    max_fraction: f64,
) -> Result<AttackResult> {
    if theta <= 0.0 || max_fraction <= 0.0 || max_fraction > 1.0 {
        return Err(Error::InvalidSpec("bad jsma parameters".into()));
    }
    if target >= model.num_classes {
        return Err(Error::UnknownClass(target));
    }
    let true_label = predict(model, x)?;
    if target == true_label {
        return Err(Error::InvalidSpec(
            "jsma target equals the current prediction".into(),
        ));
    }
    let d = x.len() as f64;
    let mut current = x.clone();
    let mut iterations = 0;
    loop {
        if predict(model, &current)? == target {
            break;
        }
        if current.l0_distance(x) as f64 / d > max_fraction {
            break;
        }
        let df_rows = prob_jacobian_rows(model, &current)?;
        let s = jsma_saliency(&df_rows, target, current.data());
        let Some((i, j)) = jsma_best_pair(&s, current.data()) else {
            break;
        };
        let data = current.data_mut();
        data[i] = (data[i] + theta).min(1.0);
        data[j] = (data[j] + theta).min(1.0);
        iterations += 1;
    }
    AttackResult::finish(model, x.clone(), current, true_label, Some(target), iterations)
}

/// Targeted low-L0 attack. Optimizes a tanh-reparameterized sample against
/// squared distance plus a hinge on the logit margin, then zeroes
/// perturbation entries whose margin gradient is comparatively small.
pub fn cw_l0(
    model: &NetworkModel,
    x: &Tensor,
    target: usize,
    params: &CwParams,
) -> Result<AttackResult> {
    AttackKind::CwL0(*params).validate()?;
    if target >= model.num_classes {
        return Err(Error::UnknownClass(target));
    }
    let true_label = predict(model, x)?;
    if target == true_label {
        return Err(Error::InvalidSpec(
            "attack target equals the current prediction".into(),
        ));
    }

    // atanh is singular at the box corners; shrink inputs slightly inward.
    const MARGIN: f64 = 1e-6;
    let mut omega: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| {
            let shrunk = v.clamp(MARGIN, 1.0 - MARGIN);
            (2.0 * shrunk - 1.0).atanh()
        })
        .collect();

    let mut diverged = false;
    let mut steps_taken = 0;
    for _ in 0..params.steps {
        let xt: Vec<f64> = omega.iter().map(|w| 0.5 * (w.tanh() + 1.0)).collect();
        let xt_tensor = Tensor::from_raw(x.shape().to_vec(), xt);
        let cache = forward_cached(model, &xt_tensor, DropoutMode::Deterministic)?;
        let logits = cache.logits();
        let rival = best_rival(logits, target);
        let margin = logits[rival] - logits[target];
        let dist2: f64 = xt_tensor
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let objective = dist2 + params.c * margin.max(-params.kappa);
        if !objective.is_finite() {
            diverged = true;
            break;
        }
        // Gradient w.r.t. the candidate sample, chained through tanh.
        let hinge_active = margin > -params.kappa;
        let margin_grad = if hinge_active && params.c != 0.0 {
            let d_rival = logit_row_gradient(model, &cache, rival);
            let d_target = logit_row_gradient(model, &cache, target);
            Some((d_rival, d_target))
        } else {
            None
        };
        for (i, w) in omega.iter_mut().enumerate() {
            let xi = xt_tensor.data()[i];
            let mut g = 2.0 * (xi - x.data()[i]);
            if let Some((d_rival, d_target)) = &margin_grad {
                g += params.c * (d_rival[i] - d_target[i]);
            }
            // dx/domega for x = (tanh(omega)+1)/2
            *w -= params.step_size * g * 2.0 * xi * (1.0 - xi);
        }
        steps_taken += 1;
        if omega.iter().any(|w| !w.is_finite()) {
            diverged = true;
            break;
        }
    }

    if diverged {
        return AttackResult::finish(
            model,
            x.clone(),
            x.clone(),
            true_label,
            Some(target),
            steps_taken,
        );
    }

    let raw: Vec<f64> = omega.iter().map(|w| 0.5 * (w.tanh() + 1.0)).collect();
    let raw_tensor = Tensor::from_raw(x.shape().to_vec(), raw);

    // Keep only the pixels that matter for the margin at the endpoint.
    let cache = forward_cached(model, &raw_tensor, DropoutMode::Deterministic)?;
    let rival = best_rival(cache.logits(), target);
    let d_rival = logit_row_gradient(model, &cache, rival);
    let d_target = logit_row_gradient(model, &cache, target);
    let margin_grad: Vec<f64> = d_rival
        .iter()
        .zip(&d_target)
        .map(|(a, b)| a - b)
        .collect();
    let max_mag = margin_grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));

    // The inward shrink leaves sub-1e-6 residue on untouched pixels; snap it
    // away so the L0 count reflects real edits.
    const SNAP: f64 = 2e-6;
    let data: Vec<f64> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &xi)| {
            let delta = raw_tensor.data()[i] - xi;
            let keep = max_mag > 0.0 && margin_grad[i].abs() >= params.grad_threshold * max_mag;
            if !keep || delta.abs() <= SNAP {
                xi
            } else {
                xi + delta
            }
        })
        .collect();
    let x_adv = Tensor::from_raw(x.shape().to_vec(), data);
    AttackResult::finish(model, x.clone(), x_adv, true_label, Some(target), steps_taken)
}

fn best_rival(logits: &[f64], target: usize) -> usize {
    let mut best = usize::MAX;
    for (i, &z) in logits.iter().enumerate() {
        if i == target {
            continue;
        }
        if best == usize::MAX || z > logits[best] {
            best = i;
        }
    }
    best
}

/// Random baseline matched to the adversarial perturbation: Gaussian noise
/// rescaled to the same L2 norm for dense attacks, or the same number of
/// random pixels driven to an extreme for sparse attacks.
pub fn noisy_counterpart(
    x: &Tensor,
    x_adv: &Tensor,
    attack_kind: &AttackKind,
    seed: u64,
) -> Result<Tensor> {
    if x.shape() != x_adv.shape() {
        return Err(Error::ShapeMismatch(format!(
            "sample shape {:?} vs adversarial shape {:?}",
            x.shape(),
            x_adv.shape()
        )));
    }
    let mut rng = seeded_rng(seed, &[]);
    if attack_kind.is_sparse() {
        let n = x.l0_distance(x_adv);
        let mut noisy = x.clone();
        if n == 0 {
            return Ok(noisy);
        }
        let positions = sample_indices(&mut rng, x.len(), n);
        for pos in positions {
            let v = noisy.data()[pos];
            // Flip endpoints outright; free pixels go to a uniform extreme.
            // Every touched position must actually change.
            let new = if v == 0.0 {
                1.0
            } else if v == 1.0 {
                0.0
            } else if rng.gen::<f64>() < 0.5 {
                0.0
            } else {
                1.0
            };
            noisy.data_mut()[pos] = new;
        }
        Ok(noisy)
    } else {
        let l2 = x.l2_distance(x_adv);
        if l2 == 0.0 {
            return Ok(x.clone());
        }
        let mut noise: Vec<f64> = (0..x.len()).map(|_| standard_normal(&mut rng)).collect();
        let norm = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = l2 / norm;
        for v in &mut noise {
            *v *= scale;
        }
        let data = x
            .data()
            .iter()
            .zip(&noise)
            .map(|(xi, ni)| (xi + ni).clamp(0.0, 1.0))
            .collect();
        Ok(Tensor::from_raw(x.shape().to_vec(), data))
    }
}

/// Mean perturbation L2 and the model's accuracy on the adversarial samples.
pub fn perturbation_stats(results: &[AttackResult]) -> Result<(f64, f64)> {
    if results.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = results.len() as f64;
    let mean_l2 = results.iter().map(|r| r.l2_norm).sum::<f64>() / n;
    let still_correct = results
        .iter()
        .filter(|r| r.adv_label == r.true_label)
        .count() as f64;
    Ok((mean_l2, still_correct / n))
}

/// Dispatches one sample to the attack for `kind`, resolving the target
/// class for the targeted attacks.
pub fn run_attack(
    model: &NetworkModel,
    x: &Tensor,
    y_onehot: &Tensor,
    kind: &AttackKind,
) -> Result<AttackResult> {
    kind.validate()?;
    match kind {
        AttackKind::Fgsm { epsilon } => fgsm(model, x, y_onehot, *epsilon),
        AttackKind::BimA { .. } | AttackKind::BimB { .. } => bim(model, x, y_onehot, kind),
        AttackKind::Jsma {
            target_rule,
            theta,
            max_fraction,
        } => {
            let true_label = check_correctly_classified(model, x, y_onehot)?;
            let target = target_rule.target(true_label, model.num_classes);
            jsma(model, x, target, *theta, *max_fraction)
        }
        AttackKind::CwL0(params) => {
            let true_label = check_correctly_classified(model, x, y_onehot)?;
            let target = TargetRule::NextClass.target(true_label, model.num_classes);
            cw_l0(model, x, target, params)
        }
    }
}
