//! The two detection features: kernel density of a sample's last-hidden
//! activation against its predicted class's training activations, and the
//! variance of stochastic dropout predictions.

use serde::{Deserialize, Serialize};

use crate::attack::AttackKind;
use crate::error::{Error, Result};
use crate::nn::{
    forward, input_gradient, predict, sample_predictions, DropoutMode, NetworkModel,
};
use crate::tensor::Tensor;

/// Per-class collections of last-hidden-layer activations with a shared
/// Gaussian kernel bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFeatureBank {
    /// classes[t] stores that class's vectors back to back, `dim` apiece.
    classes: Vec<Vec<f64>>,
    dim: usize,
    bandwidth: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct BankRepr {
    bandwidth: Option<f64>,
    classes: Vec<Tensor>,
}

impl Serialize for ClassFeatureBank {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let classes = self
            .classes
            .iter()
            .map(|c| Tensor::from_raw(vec![c.len() / self.dim, self.dim], c.clone()))
            .collect();
        BankRepr {
            bandwidth: self.bandwidth,
            classes,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ClassFeatureBank {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = BankRepr::deserialize(d)?;
        if repr.classes.is_empty() {
            return Err(D::Error::custom("bank has no classes"));
        }
        let dim = repr.classes[0].shape()[1];
        let mut classes = Vec::with_capacity(repr.classes.len());
        for t in &repr.classes {
            if t.shape().len() != 2 || t.shape()[1] != dim {
                return Err(D::Error::custom("inconsistent bank vector dimensions"));
            }
            classes.push(t.data().to_vec());
        }
        if let Some(b) = repr.bandwidth {
            if !(b > 0.0) {
                return Err(D::Error::custom("bandwidth must be positive"));
            }
        }
        Ok(Self {
            classes,
            dim,
            bandwidth: repr.bandwidth,
        })
    }
}

impl ClassFeatureBank {
    /// Builds a bank from explicit per-class vector lists.
    pub fn from_rows(per_class: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if per_class.is_empty() {
            return Err(Error::EmptyInput);
        }
        let dim = per_class
            .iter()
            .flatten()
            .next()
            .map(|v| v.len())
            .ok_or(Error::EmptyInput)?;
        let mut classes = Vec::with_capacity(per_class.len());
        for (t, rows) in per_class.into_iter().enumerate() {
            if rows.is_empty() {
                return Err(Error::EmptyClass(t));
            }
            let mut flat = Vec::with_capacity(rows.len() * dim);
            for row in rows {
                if row.len() != dim {
                    return Err(Error::ShapeMismatch(format!(
                        "class {t} vector of length {} in a bank of dimension {dim}",
                        row.len()
                    )));
                }
                flat.extend(row);
            }
            classes.push(flat);
        }
        Ok(Self {
            classes,
            dim,
            bandwidth: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self, t: usize) -> usize {
        self.classes[t].len() / self.dim
    }

    pub fn bandwidth(&self) -> Option<f64> {
        self.bandwidth
    }

    pub fn set_bandwidth(&mut self, sigma: f64) -> Result<()> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidSpec(format!("bandwidth {sigma} must be positive")));
        }
        self.bandwidth = Some(sigma);
        Ok(())
    }

    fn rows(&self, t: usize) -> impl Iterator<Item = &[f64]> {
        self.classes[t].chunks_exact(self.dim)
    }

    /// Median distance between same-class vector pairs; the customary scale
    /// reference for bandwidth grids. Classes larger than 200 vectors are
    /// strided down to keep this cheap.
    pub fn median_pairwise_distance(&self) -> f64 {
        let mut dists = Vec::new();
        for t in 0..self.num_classes() {
            let rows: Vec<&[f64]> = self.rows(t).collect();
            let step = rows.len().div_ceil(200);
            let sampled: Vec<&[f64]> = rows.iter().step_by(step).copied().collect();
            for i in 0..sampled.len() {
                for j in (i + 1)..sampled.len() {
                    dists.push(squared_distance(sampled[i], sampled[j]).sqrt());
                }
            }
        }
        if dists.is_empty() {
            return 1.0;
        }
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        dists[dists.len() / 2]
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Features of a sample for the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactFeatures {
    pub uncertainty: f64,
    pub neg_log_density: f64,
    pub predicted_class: usize,
}

/// Collects the last-hidden activation of every training sample into its
/// class's bank. Bandwidth is left unset.
pub fn build_feature_bank(
    model: &NetworkModel,
    train_x: &Tensor,
    train_labels: &[usize],
) -> Result<ClassFeatureBank> {
    let n = train_x.shape()[0];
    if n != train_labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{n} samples vs {} labels",
            train_labels.len()
        )));
    }
    let mut per_class: Vec<Vec<Vec<f64>>> = vec![Vec::new(); model.num_classes];
    for i in 0..n {
        let label = train_labels[i];
        if label >= model.num_classes {
            return Err(Error::UnknownClass(label));
        }
        let x = Tensor::from_raw(model.input_shape.clone(), train_x.row(i).to_vec());
        let (_, hidden) = forward(model, &x, DropoutMode::Deterministic)?;
        per_class[label].push(hidden.into_data());
    }
    if let Some(t) = per_class.iter().position(|c| c.is_empty()) {
        return Err(Error::EmptyClass(t));
    }
    ClassFeatureBank::from_rows(per_class)
}

/// Leave-one-out log-likelihood of the bank under a normalized Gaussian
/// kernel of bandwidth sigma. The normalizing constant matters here: without
/// it the likelihood grows monotonically with sigma and the selection
/// degenerates.
fn loo_log_likelihood(sq_dists: &[Vec<f64>], counts: &[usize], dim: usize, sigma: f64) -> f64 {
    let inv_s2 = 1.0 / (sigma * sigma);
    let log_norm = dim as f64 * (sigma * std::f64::consts::PI.sqrt()).ln();
    let mut ll = 0.0;
    let mut point = 0;
    for &count in counts {
        for _ in 0..count {
            let terms: Vec<f64> = sq_dists[point].iter().map(|d2| -d2 * inv_s2).collect();
            ll += log_sum_exp(&terms) - ((count - 1) as f64).ln() - log_norm;
            point += 1;
        }
    }
    ll
}

/// Picks the grid bandwidth maximizing the leave-one-out log-likelihood of
/// the bank (each point scored against the rest of its own class). Ties go
/// to the smaller value. Sets the bank's bandwidth and returns it.
pub fn fit_bandwidth(bank: &mut ClassFeatureBank, candidate_grid: &[f64]) -> Result<f64> {
    if candidate_grid.is_empty() {
        return Err(Error::InvalidGrid("empty grid".into()));
    }
    if let Some(bad) = candidate_grid.iter().find(|&&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidGrid(format!("non-positive entry {bad}")));
    }
    for t in 0..bank.num_classes() {
        if bank.class_count(t) < 2 {
            return Err(Error::InvalidSpec(format!(
                "class {t} needs at least 2 points to leave one out"
            )));
        }
    }

    // Squared distances from each point to the rest of its class, computed
    // once and reused across the whole grid.
    let mut sq_dists: Vec<Vec<f64>> = Vec::new();
    let mut counts = Vec::with_capacity(bank.num_classes());
    for t in 0..bank.num_classes() {
        let rows: Vec<&[f64]> = bank.rows(t).collect();
        counts.push(rows.len());
        for i in 0..rows.len() {
            let mut d = Vec::with_capacity(rows.len() - 1);
            for j in 0..rows.len() {
                if i != j {
                    d.push(squared_distance(rows[i], rows[j]));
                }
            }
            sq_dists.push(d);
        }
    }

    let mut best_sigma = candidate_grid[0];
    let mut best_ll = f64::NEG_INFINITY;
    for &sigma in candidate_grid {
        let ll = loo_log_likelihood(&sq_dists, &counts, bank.dim(), sigma);
        if ll > best_ll || (ll == best_ll && sigma < best_sigma) {
            best_ll = ll;
            best_sigma = sigma;
        }
    }
    bank.set_bandwidth(best_sigma)?;
    Ok(best_sigma)
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Log of the summed unnormalized Gaussian kernel between `phi_x` and every
/// stored vector of class `t`: log sum_i exp(-||phi_x - phi_i||^2 / sigma^2).
pub fn density_estimate(bank: &ClassFeatureBank, phi_x: &[f64], t: usize) -> Result<f64> {
    if t >= bank.num_classes() {
        return Err(Error::UnknownClass(t));
    }
    let sigma = bank.bandwidth().ok_or(Error::BandwidthNotFitted)?;
    if phi_x.len() != bank.dim() {
        return Err(Error::ShapeMismatch(format!(
            "query dimension {} vs bank dimension {}",
            phi_x.len(),
            bank.dim()
        )));
    }
    let inv_s2 = 1.0 / (sigma * sigma);
    let terms: Vec<f64> = bank
        .rows(t)
        .map(|row| -squared_distance(phi_x, row) * inv_s2)
        .collect();
    if terms.is_empty() {
        return Err(Error::EmptyClass(t));
    }
    Ok(log_sum_exp(&terms))
}

/// Mean over output dimensions of the per-dimension variance of the sample
/// vectors. Computed relative to the first sample so that identical samples
/// give exactly zero.
pub(crate) fn mean_diag_variance(samples: &[Tensor]) -> f64 {
    let t = samples.len() as f64;
    let dim = samples[0].len();
    let mut total = 0.0;
    for j in 0..dim {
        let base = samples[0].data()[j];
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for s in samples {
            let c = s.data()[j] - base;
            sum += c;
            sum_sq += c * c;
        }
        let mean = sum / t;
        total += (sum_sq / t - mean * mean).max(0.0);
    }
    total / dim as f64
}

/// Dropout-sampling uncertainty: the mean over output dimensions of the
/// variance of T stochastic softmax outputs.
pub fn uncertainty(model: &NetworkModel, x: &Tensor, t_samples: usize, seed: u64) -> Result<f64> {
    if t_samples < 2 {
        return Err(Error::InvalidSpec(
            "uncertainty needs at least 2 samples".into(),
        ));
    }
    let samples = sample_predictions(model, x, t_samples, seed)?;
    Ok(mean_diag_variance(&samples))
}

/// Uncertainty and negative log density of one sample, under its predicted
/// class.
pub fn extract_features(
    model: &NetworkModel,
    bank: &ClassFeatureBank,
    x: &Tensor,
    t_samples: usize,
    seed: u64,
) -> Result<ArtifactFeatures> {
    let (probs, hidden) = forward(model, x, DropoutMode::Deterministic)?;
    let predicted_class = probs.argmax();
    let neg_log_density = -density_estimate(bank, hidden.data(), predicted_class)?;
    let uncertainty = uncertainty(model, x, t_samples, seed)?;
    Ok(ArtifactFeatures {
        uncertainty,
        neg_log_density,
        predicted_class,
    })
}

/// One point of a density walk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkRecord {
    pub iteration: usize,
    /// Log density under the sample's true class.
    pub logk_source: f64,
    /// Log density under the class the attack ends at.
    pub logk_adv: f64,
}

/// Runs a fixed-iteration gradient-sign attack and records, before each
/// step, the log density of the current sample under the source class and
/// under the attack's final class. One record per iteration; record 0 is the
/// unperturbed sample.
pub fn density_walk(
    model: &NetworkModel,
    bank: &ClassFeatureBank,
    x: &Tensor,
    y_onehot: &Tensor,
    attack: &AttackKind,
) -> Result<Vec<WalkRecord>> {
    let AttackKind::BimB {
        eps_step,
        eps_clip,
        n_iters,
    } = *attack
    else {
        return Err(Error::InvalidSpec(
            "density walks follow the fixed-iteration attack".into(),
        ));
    };
    attack.validate()?;
    let true_label = y_onehot.argmax();
    if predict(model, x)? != true_label {
        return Err(Error::NotCorrectlyClassified);
    }

    let mut hiddens = Vec::with_capacity(n_iters);
    let mut current = x.clone();
    for _ in 0..n_iters {
        let (_, hidden) = forward(model, &current, DropoutMode::Deterministic)?;
        hiddens.push(hidden);
        let grad = input_gradient(model, &current, y_onehot)?;
        for ((ci, xi), gi) in current
            .data_mut()
            .iter_mut()
            .zip(x.data())
            .zip(grad.data())
        {
            let sign = if *gi > 0.0 {
                1.0
            } else if *gi < 0.0 {
                -1.0
            } else {
                0.0
            };
            *ci = (*ci + eps_step * sign)
                .clamp(xi - eps_clip, xi + eps_clip)
                .clamp(0.0, 1.0);
        }
    }
    let adv_class = predict(model, &current)?;

    let mut records = Vec::with_capacity(hiddens.len());
    for (iteration, hidden) in hiddens.iter().enumerate() {
        records.push(WalkRecord {
            iteration,
            logk_source: density_estimate(bank, hidden.data(), true_label)?,
            logk_adv: density_estimate(bank, hidden.data(), adv_class)?,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, LayerSpec};

    fn bank_1d(points: &[f64], sigma: Option<f64>) -> ClassFeatureBank {
        let rows = points.iter().map(|&p| vec![p]).collect();
        let mut bank = ClassFeatureBank::from_rows(vec![rows]).unwrap();
        if let Some(s) = sigma {
            bank.set_bandwidth(s).unwrap();
        }
        bank
    }

    #[test]
    fn bank_partitions_by_label() {
        let specs = vec![
            LayerSpec::Dense { out_dim: 3 },
            LayerSpec::Relu,
            LayerSpec::Dense { out_dim: 2 },
            LayerSpec::Softmax,
        ];
        let model = build_model(&specs, &[2], 2, 4).unwrap();
        let xs = Tensor::new(vec![4, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
        let bank = build_feature_bank(&model, &xs, &[0, 1, 0, 1]).unwrap();
        assert_eq!(bank.num_classes(), 2);
        assert_eq!(bank.class_count(0), 2);
        assert_eq!(bank.class_count(1), 2);
        assert_eq!(bank.dim(), 3);

        assert!(matches!(
            build_feature_bank(&model, &xs, &[0, 0, 0, 0]),
            Err(Error::EmptyClass(1))
        ));
    }

    #[test]
    fn single_candidate_grid_is_returned() {
        let mut bank = bank_1d(&[0.0, 1.0, 2.0], None);
        assert_eq!(fit_bandwidth(&mut bank, &[0.7]).unwrap(), 0.7);
        assert_eq!(bank.bandwidth(), Some(0.7));
    }

    #[test]
    fn grid_selection_matches_direct_scoring() {
        let points = [0.0, 0.1, 2.0, 2.1];
        let grid = [0.01, 0.1, 10.0];
        let mut bank = bank_1d(&points, None);
        let picked = fit_bandwidth(&mut bank, &grid).unwrap();

        // direct leave-one-out evaluation with the normalized 1-d kernel
        let mut best = (f64::NEG_INFINITY, f64::NAN);
        for &sigma in &grid {
            let mut ll = 0.0;
            for (i, &p) in points.iter().enumerate() {
                let mut sum = 0.0;
                for (j, &q) in points.iter().enumerate() {
                    if i != j {
                        sum += (-(p - q) * (p - q) / (sigma * sigma)).exp()
                            / (sigma * std::f64::consts::PI.sqrt());
                    }
                }
                ll += (sum / (points.len() - 1) as f64).ln();
            }
            if ll > best.0 {
                best = (ll, sigma);
            }
        }
        assert_eq!(picked, best.1);
    }

    #[test]
    fn degenerate_bank_prefers_the_smallest_bandwidth() {
        let mut bank = bank_1d(&[0.5, 0.5, 0.5], None);
        let picked = fit_bandwidth(&mut bank, &[0.01, 0.1, 1.0, 10.0]).unwrap();
        assert_eq!(picked, 0.01);
    }

    #[test]
    fn grid_validation() {
        let mut bank = bank_1d(&[0.0, 1.0], None);
        assert!(matches!(
            fit_bandwidth(&mut bank, &[]),
            Err(Error::InvalidGrid(_))
        ));
        assert!(matches!(
            fit_bandwidth(&mut bank, &[1.0, 0.0]),
            Err(Error::InvalidGrid(_))
        ));
        let mut tiny = bank_1d(&[0.0], None);
        assert!(fit_bandwidth(&mut tiny, &[1.0]).is_err());
    }

    #[test]
    fn density_of_a_coincident_single_point_bank_is_zero() {
        let bank = bank_1d(&[0.4], Some(1.0));
        assert_eq!(density_estimate(&bank, &[0.4], 0).unwrap(), 0.0);
    }

    #[test]
    fn density_of_two_equidistant_points() {
        let bank = bank_1d(&[0.0, 1.0], Some(0.5));
        // both at distance 0.5: log(2 exp(-0.25/0.25)) = ln 2 - 1
        let got = density_estimate(&bank, &[0.5], 0).unwrap();
        assert!((got - (2.0_f64.ln() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn density_matches_naive_summation() {
        let rows = vec![vec![0.1, 0.7], vec![0.4, 0.2], vec![0.9, 0.9]];
        let mut bank = ClassFeatureBank::from_rows(vec![rows.clone()]).unwrap();
        bank.set_bandwidth(1.0).unwrap();
        let q = [0.3, 0.5];
        let naive: f64 = rows
            .iter()
            .map(|r| (-squared_distance(&q, r)).exp())
            .sum::<f64>()
            .ln();
        let got = density_estimate(&bank, &q, 0).unwrap();
        assert!((got - naive).abs() < 1e-10);
    }

    #[test]
    fn unknown_class_and_unfitted_bandwidth_error() {
        let bank = bank_1d(&[0.0], Some(1.0));
        assert!(matches!(
            density_estimate(&bank, &[0.0], 3),
            Err(Error::UnknownClass(3))
        ));
        let unfitted = bank_1d(&[0.0], None);
        assert!(matches!(
            density_estimate(&unfitted, &[0.0], 0),
            Err(Error::BandwidthNotFitted)
        ));
    }

    #[test]
    fn two_sample_variance_matches_the_half_difference_formula() {
        let y1 = Tensor::from_vec(vec![0.7, 0.2, 0.1]).unwrap();
        let y2 = Tensor::from_vec(vec![0.1, 0.6, 0.3]).unwrap();
        let got = mean_diag_variance(&[y1.clone(), y2.clone()]);
        let want: f64 = y1
            .data()
            .iter()
            .zip(y2.data())
            .map(|(a, b)| ((a - b) / 2.0) * ((a - b) / 2.0))
            .sum::<f64>()
            / 3.0;
        assert_eq!(got, want);
    }

    fn dropout_model(rate: f64) -> NetworkModel {
        let specs = vec![
            LayerSpec::Dense { out_dim: 6 },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate },
            LayerSpec::Dense { out_dim: 2 },
            LayerSpec::Softmax,
        ];
        build_model(&specs, &[3], 2, 17).unwrap()
    }

    #[test]
    fn uncertainty_is_exactly_zero_without_dropout() {
        let model = dropout_model(0.0);
        let x = Tensor::from_vec(vec![0.5, 0.1, 0.9]).unwrap();
        assert_eq!(uncertainty(&model, &x, 50, 3).unwrap(), 0.0);
    }

    #[test]
    fn uncertainty_is_nonnegative_and_needs_two_samples() {
        let model = dropout_model(0.5);
        let x = Tensor::from_vec(vec![0.5, 0.1, 0.9]).unwrap();
        assert!(uncertainty(&model, &x, 25, 3).unwrap() >= 0.0);
        assert!(uncertainty(&model, &x, 1, 3).is_err());
    }

    #[test]
    fn features_are_deterministic_and_density_decays_with_distance() {
        let model = dropout_model(0.3);
        let xs = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.8, 0.9, 0.7]).unwrap();
        let labels: Vec<usize> = (0..2)
            .map(|i| {
                predict(
                    &model,
                    &Tensor::from_raw(vec![3], xs.row(i).to_vec()),
                )
                .unwrap()
            })
            .collect();
        // guarantee both classes are populated by duplicating with flipped labels
        let mut per_class = vec![Vec::new(), Vec::new()];
        for i in 0..2 {
            let x = Tensor::from_raw(vec![3], xs.row(i).to_vec());
            let (_, h) = forward(&model, &x, DropoutMode::Deterministic).unwrap();
            per_class[labels[i]].push(h.data().to_vec());
            per_class[1 - labels[i]].push(h.data().to_vec());
        }
        let mut bank = ClassFeatureBank::from_rows(per_class).unwrap();
        bank.set_bandwidth(1.0).unwrap();

        let x = Tensor::from_raw(vec![3], xs.row(0).to_vec());
        let a = extract_features(&model, &bank, &x, 20, 55).unwrap();
        let b = extract_features(&model, &bank, &x, 20, 55).unwrap();
        assert_eq!(a, b);

        // a nearby query is denser than a far one under the same class
        let (_, h) = forward(&model, &x, DropoutMode::Deterministic).unwrap();
        let near = density_estimate(&bank, h.data(), 0).unwrap();
        let far_q: Vec<f64> = h.data().iter().map(|v| v + 50.0).collect();
        let far = density_estimate(&bank, &far_q, 0).unwrap();
        assert!(near > far);
    }

    #[test]
    fn duplicate_of_the_query_raises_the_kernel_sum_by_one() {
        let rows = vec![vec![0.1, 0.7], vec![0.4, 0.2]];
        let q = vec![0.3, 0.5];
        let mut bank = ClassFeatureBank::from_rows(vec![rows.clone()]).unwrap();
        bank.set_bandwidth(0.8).unwrap();
        let before = density_estimate(&bank, &q, 0).unwrap().exp();
        let mut rows2 = rows;
        rows2.push(q.clone());
        let mut bank2 = ClassFeatureBank::from_rows(vec![rows2]).unwrap();
        bank2.set_bandwidth(0.8).unwrap();
        let after = density_estimate(&bank2, &q, 0).unwrap().exp();
        assert!((after - before - 1.0).abs() < 1e-9);
    }
}
