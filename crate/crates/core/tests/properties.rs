//! Fast self-contained checks against independent oracles: central finite
//! differences for every gradient path, naive summation for the density,
//! the pairwise formulation for AUC, attack box/ball invariants on random
//! inputs, and bit-exact persistence. No trained model is involved.

use advartifact::artifact::{density_estimate, uncertainty, ClassFeatureBank};
use advartifact::attack::{bim, fgsm, noisy_counterpart, AttackKind, CwParams, TargetRule};
use advartifact::detector::{roc_curve, score, train_logreg, LogRegConfig};
use advartifact::nn::{
    build_model, class_jacobians, forward, input_gradient, logits, predict, sample_predictions,
    DropoutMode, LayerSpec, NetworkModel,
};
use advartifact::persist::{
    load_attack_batch, load_detector, load_feature_bank, load_model, save_attack_batch,
    save_detector, save_feature_bank, save_model,
};
use advartifact::rng::seeded_rng;
use advartifact::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

/// Small random architecture; odd seeds get a conv stack, even seeds a
/// dense stack.
fn random_network(seed: u64) -> NetworkModel {
    let mut rng = seeded_rng(seed, &[100]);
    let classes = rng.gen_range(2..=5);
    let mut specs = Vec::new();
    let input_shape: Vec<usize> = if seed % 2 == 1 {
        let h = rng.gen_range(5..=7);
        let w = rng.gen_range(5..=7);
        let c = rng.gen_range(1..=2);
        specs.push(LayerSpec::Conv2d {
            out_channels: rng.gen_range(2..=3),
            kernel_size: 3,
            stride: 1,
        });
        specs.push(LayerSpec::Relu);
        if (h - 2) % 2 == 0 && (w - 2) % 2 == 0 {
            specs.push(LayerSpec::MaxPool2d {
                window: 2,
                stride: None,
            });
        }
        specs.push(LayerSpec::Dense {
            out_dim: rng.gen_range(5..=9),
        });
        specs.push(LayerSpec::Relu);
        if rng.gen_bool(0.5) {
            specs.push(LayerSpec::Dropout {
                rate: rng.gen_range(0.1..0.5),
            });
        }
        vec![c, h, w]
    } else {
        let d = rng.gen_range(3..=9);
        for _ in 0..rng.gen_range(1..=2) {
            specs.push(LayerSpec::Dense {
                out_dim: rng.gen_range(4..=10),
            });
            specs.push(LayerSpec::Relu);
            if rng.gen_bool(0.4) {
                specs.push(LayerSpec::Dropout {
                    rate: rng.gen_range(0.1..0.5),
                });
            }
        }
        vec![d]
    };
    specs.push(LayerSpec::Dense { out_dim: classes });
    specs.push(LayerSpec::Softmax);
    build_model(&specs, &input_shape, classes, seed ^ 0x5eed).unwrap()
}

fn random_input(model: &NetworkModel, rng: &mut impl Rng) -> Tensor {
    let d: usize = model.input_shape.iter().product();
    Tensor::new(
        model.input_shape.clone(),
        (0..d).map(|_| rng.gen_range(0.05..0.95)).collect(),
    )
    .unwrap()
}

fn one_hot(label: usize, classes: usize) -> Tensor {
    let mut y = vec![0.0; classes];
    y[label] = 1.0;
    Tensor::new(vec![classes], y).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn in_box(x: &Tensor) -> bool {
    x.data().iter().all(|&v| (0.0..=1.0).contains(&v))
}

fn ce_loss(model: &NetworkModel, x: &Tensor, y: &Tensor) -> f64 {
    let (probs, _) = forward(model, x, DropoutMode::Deterministic).unwrap();
    -probs
        .data()
        .iter()
        .zip(y.data())
        .map(|(p, yk)| if *yk > 0.0 { yk * p.ln() } else { 0.0 })
        .sum::<f64>()
}

const FD_H: f64 = 1e-5;
const FD_NETWORKS: u64 = 24;

#[test]
fn loss_gradient_matches_finite_differences() {
    for seed in 0..FD_NETWORKS {
        let model = random_network(seed);
        let mut rng = seeded_rng(seed, &[7]);
        let x = random_input(&model, &mut rng);
        let y = one_hot(rng.gen_range(0..model.num_classes), model.num_classes);
        let grad = input_gradient(&model, &x, &y).unwrap();
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += FD_H;
            let mut xm = x.clone();
            xm.data_mut()[i] -= FD_H;
            let fd = (ce_loss(&model, &xp, &y) - ce_loss(&model, &xm, &y)) / (2.0 * FD_H);
            let err = rel_err(grad.data()[i], fd);
            assert!(
                err <= 1e-4,
                "net {seed} coord {i}: gradient {} vs fd {fd}, relative error {err}",
                grad.data()[i]
            );
        }
    }
}

#[test]
fn class_jacobians_match_finite_differences() {
    for seed in 0..FD_NETWORKS {
        let model = random_network(seed);
        let mut rng = seeded_rng(seed, &[8]);
        let x = random_input(&model, &mut rng);
        let (df, dz) = class_jacobians(&model, &x).unwrap();
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += FD_H;
            let mut xm = x.clone();
            xm.data_mut()[i] -= FD_H;
            let (pp, _) = forward(&model, &xp, DropoutMode::Deterministic).unwrap();
            let (pm, _) = forward(&model, &xm, DropoutMode::Deterministic).unwrap();
            let zp = logits(&model, &xp).unwrap();
            let zm = logits(&model, &xm).unwrap();
            for j in 0..model.num_classes {
                let fd_f = (pp.data()[j] - pm.data()[j]) / (2.0 * FD_H);
                let fd_z = (zp.data()[j] - zm.data()[j]) / (2.0 * FD_H);
                let err_f = rel_err(df.row(j)[i], fd_f);
                let err_z = rel_err(dz.row(j)[i], fd_z);
                assert!(err_f <= 1e-4, "net {seed} dF[{j},{i}]: error {err_f}");
                assert!(err_z <= 1e-4, "net {seed} dZ[{j},{i}]: error {err_z}");
            }
        }
    }
}

#[test]
fn softmax_sums_to_one_and_df_rows_sum_to_zero() {
    for seed in 0..10 {
        let model = random_network(seed);
        let mut rng = seeded_rng(seed, &[12]);
        let x = random_input(&model, &mut rng);
        for mode in [DropoutMode::Deterministic, DropoutMode::Sampled { seed: 5 }] {
            let (probs, _) = forward(&model, &x, mode).unwrap();
            let total: f64 = probs.data().iter().sum();
            assert!((total - 1.0).abs() <= 1e-9, "net {seed}: sum {total}");
        }
        // the softmax outputs sum to a constant, so the gradient rows of dF
        // cancel coordinate-wise
        let (df, _) = class_jacobians(&model, &x).unwrap();
        for i in 0..x.len() {
            let col_sum: f64 = (0..model.num_classes).map(|j| df.row(j)[i]).sum();
            assert!(col_sum.abs() <= 1e-8, "net {seed} coord {i}: sum {col_sum}");
        }
    }
}

#[test]
fn forward_passes_are_reproducible() {
    for seed in 0..6 {
        let model = random_network(seed);
        let mut rng = seeded_rng(seed, &[13]);
        let x = random_input(&model, &mut rng);
        let (p1, h1) = forward(&model, &x, DropoutMode::Deterministic).unwrap();
        let (p2, h2) = forward(&model, &x, DropoutMode::Deterministic).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p1), bits(&p2));
        assert_eq!(bits(&h1), bits(&h2));

        let s1 = sample_predictions(&model, &x, 4, 77).unwrap();
        let s2 = sample_predictions(&model, &x, 4, 77).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            assert_eq!(bits(a), bits(b));
        }
    }
}

#[test]
fn sampled_dropout_actually_varies() {
    let specs = [
        LayerSpec::Dense { out_dim: 12 },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: 0.4 },
        LayerSpec::Dense { out_dim: 3 },
        LayerSpec::Softmax,
    ];
    let model = build_model(&specs, &[6], 3, 21).unwrap();
    let mut rng = seeded_rng(0, &[14]);
    let x = random_input(&model, &mut rng);
    let samples = sample_predictions(&model, &x, 8, 5).unwrap();
    let first = samples[0].data();
    assert!(
        samples.iter().any(|s| s.data() != first),
        "all 8 dropout samples identical"
    );
}

#[test]
fn uncertainty_is_exactly_zero_without_active_dropout() {
    let zero_rate = [
        LayerSpec::Dense { out_dim: 10 },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: 0.0 },
        LayerSpec::Dense { out_dim: 4 },
        LayerSpec::Softmax,
    ];
    let no_dropout = [
        LayerSpec::Dense { out_dim: 10 },
        LayerSpec::Relu,
        LayerSpec::Dense { out_dim: 4 },
        LayerSpec::Softmax,
    ];
    for (i, specs) in [&zero_rate[..], &no_dropout[..]].iter().enumerate() {
        let model = build_model(specs, &[5], 4, 31 + i as u64).unwrap();
        let mut rng = seeded_rng(i as u64, &[15]);
        for _ in 0..5 {
            let x = random_input(&model, &mut rng);
            let u = uncertainty(&model, &x, 16, rng.gen()).unwrap();
            assert_eq!(u, 0.0, "stochastic-free network gave U = {u}");
        }
    }
}

#[test]
fn density_matches_naive_summation() {
    for seed in 0..50u64 {
        let mut rng = seeded_rng(seed, &[200]);
        let classes = rng.gen_range(2..=4);
        let dim = rng.gen_range(2..=8);
        let per_class: Vec<Vec<Vec<f64>>> = (0..classes)
            .map(|_| {
                (0..rng.gen_range(3..=30))
                    .map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .collect()
            })
            .collect();
        let mut bank = ClassFeatureBank::from_rows(per_class.clone()).unwrap();
        let sigma = rng.gen_range(0.3..3.0);
        bank.set_bandwidth(sigma).unwrap();
        let query: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t = rng.gen_range(0..classes);

        let got = density_estimate(&bank, &query, t).unwrap();
        let naive: f64 = per_class[t]
            .iter()
            .map(|row| {
                let d2: f64 = row
                    .iter()
                    .zip(&query)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (-d2 / (sigma * sigma)).exp()
            })
            .sum();
        assert!(
            (got - naive.ln()).abs() <= 1e-10,
            "set {seed}: log-sum-exp {got} vs naive {}",
            naive.ln()
        );
    }
}

#[test]
fn density_is_invariant_to_bank_ordering() {
    for seed in 0..10u64 {
        let mut rng = seeded_rng(seed, &[201]);
        let dim = rng.gen_range(2..=6);
        let mut per_class: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|_| {
                (0..rng.gen_range(4..=20))
                    .map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .collect()
            })
            .collect();
        let query: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();

        let mut bank = ClassFeatureBank::from_rows(per_class.clone()).unwrap();
        bank.set_bandwidth(0.8).unwrap();
        let before: Vec<f64> = (0..3)
            .map(|t| density_estimate(&bank, &query, t).unwrap())
            .collect();

        for rows in per_class.iter_mut() {
            rows.shuffle(&mut rng);
        }
        let mut shuffled = ClassFeatureBank::from_rows(per_class).unwrap();
        shuffled.set_bandwidth(0.8).unwrap();
        for (t, b) in before.iter().enumerate() {
            let after = density_estimate(&shuffled, &query, t).unwrap();
            assert!(
                (b - after).abs() <= 1e-12 * b.abs().max(1.0),
                "class {t}: {b} vs {after}"
            );
        }
    }
}

#[test]
fn duplicating_the_query_adds_exactly_one_kernel_unit() {
    for seed in 0..10u64 {
        let mut rng = seeded_rng(seed, &[202]);
        let dim = rng.gen_range(2..=5);
        let mut per_class: Vec<Vec<Vec<f64>>> = (0..2)
            .map(|_| {
                (0..rng.gen_range(3..=12))
                    .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect()
            })
            .collect();
        let query: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut bank = ClassFeatureBank::from_rows(per_class.clone()).unwrap();
        bank.set_bandwidth(1.1).unwrap();
        let before = density_estimate(&bank, &query, 1).unwrap().exp();

        per_class[1].push(query.clone());
        let mut extended = ClassFeatureBank::from_rows(per_class).unwrap();
        extended.set_bandwidth(1.1).unwrap();
        let after = density_estimate(&extended, &query, 1).unwrap().exp();
        assert!(
            (after - before - 1.0).abs() <= 1e-9,
            "set {seed}: {before} -> {after}"
        );
    }
}

#[test]
fn fgsm_and_bim_respect_box_and_ball() {
    for seed in 0..12u64 {
        let model = random_network(seed);
        let mut rng = seeded_rng(seed, &[9]);
        let x = random_input(&model, &mut rng);
        let label = predict(&model, &x).unwrap();
        let y = one_hot(label, model.num_classes);

        for epsilon in [0.05, 0.1, 0.3] {
            let r = fgsm(&model, &x, &y, epsilon).unwrap();
            assert!(in_box(&r.x_adv), "net {seed}: fgsm left the box");
            assert!(
                x.linf_distance(&r.x_adv) <= epsilon + 1e-12,
                "net {seed}: fgsm ball violated"
            );
            assert_eq!(r.success, r.adv_label != label);
        }

        let a = AttackKind::BimA {
            eps_step: 0.02,
            eps_clip: 0.1,
            max_iters: 25,
        };
        let r = bim(&model, &x, &y, &a).unwrap();
        assert!(r.iterations <= 25);
        if r.success {
            assert_ne!(r.adv_label, label);
        }
        assert!(in_box(&r.x_adv));
        assert!(x.linf_distance(&r.x_adv) <= 0.1 + 1e-12);

        let b = AttackKind::BimB {
            eps_step: 0.02,
            eps_clip: 0.1,
            n_iters: 25,
        };
        let r = bim(&model, &x, &y, &b).unwrap();
        assert_eq!(r.iterations, 25);
        assert!(in_box(&r.x_adv));
        assert!(x.linf_distance(&r.x_adv) <= 0.1 + 1e-12);
    }
}

#[test]
fn dense_noisy_counterpart_matches_l2_exactly() {
    let kind = AttackKind::Fgsm { epsilon: 0.1 };
    for seed in 0..20u64 {
        let mut rng = seeded_rng(seed, &[400]);
        let d = rng.gen_range(8..=40);
        // interior box keeps the clamp inactive, so the norm must match
        let x = Tensor::new(
            vec![d],
            (0..d).map(|_| rng.gen_range(0.3..0.7)).collect(),
        )
        .unwrap();
        let mut adv = x.clone();
        for v in adv.data_mut().iter_mut() {
            *v += rng.gen_range(-0.02..0.02);
        }
        let target = x.l2_distance(&adv);
        let noisy = noisy_counterpart(&x, &adv, &kind, seed).unwrap();
        assert!(in_box(&noisy));
        let got = x.l2_distance(&noisy);
        assert!(
            (got - target).abs() <= 1e-9 * target.max(1.0),
            "set {seed}: l2 {got} vs {target}"
        );

        let again = noisy_counterpart(&x, &adv, &kind, seed).unwrap();
        assert_eq!(
            noisy.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            again.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        // near the box edge clamping may only shrink the norm
        let edge = Tensor::new(vec![d], (0..d).map(|_| rng.gen_range(0.0..0.05)).collect())
            .unwrap();
        let mut edge_adv = edge.clone();
        for v in edge_adv.data_mut().iter_mut() {
            *v = (*v + rng.gen_range(0.0..0.5)).clamp(0.0, 1.0);
        }
        let target = edge.l2_distance(&edge_adv);
        let clamped = noisy_counterpart(&edge, &edge_adv, &kind, seed).unwrap();
        assert!(in_box(&clamped));
        assert!(edge.l2_distance(&clamped) <= target + 1e-9);
    }
}

#[test]
fn sparse_noisy_counterpart_matches_l0_exactly() {
    let kinds = [
        AttackKind::Jsma {
            target_rule: TargetRule::NextClass,
            theta: 1.0,
            max_fraction: 0.2,
        },
        AttackKind::CwL0(CwParams::default()),
    ];
    for seed in 0..20u64 {
        let mut rng = seeded_rng(seed, &[401]);
        let d = rng.gen_range(9..=36);
        let x = Tensor::new(
            vec![d],
            (0..d)
                .map(|i| match i % 3 {
                    0 => 0.0,
                    1 => 1.0,
                    _ => rng.gen_range(0.2..0.8),
                })
                .collect(),
        )
        .unwrap();
        let m = rng.gen_range(1..=d / 2);
        let mut adv = x.clone();
        let mut positions: Vec<usize> = (0..d).collect();
        positions.shuffle(&mut rng);
        for &p in positions.iter().take(m) {
            let v = adv.data()[p];
            adv.data_mut()[p] = if v > 0.5 { v - 0.3 } else { v + 0.3 };
        }
        assert_eq!(x.l0_distance(&adv), m);

        let kind = &kinds[(seed % 2) as usize];
        let noisy = noisy_counterpart(&x, &adv, kind, seed).unwrap();
        assert_eq!(x.l0_distance(&noisy), m, "set {seed}: l0 mismatch");
        assert!(in_box(&noisy));
        for (a, b) in x.data().iter().zip(noisy.data()) {
            if a != b {
                assert!(*b == 0.0 || *b == 1.0, "flip landed at {b}");
            }
        }

        let again = noisy_counterpart(&x, &adv, kind, seed).unwrap();
        assert_eq!(
            noisy.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            again.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn auc_matches_the_pairwise_oracle_on_100_score_sets() {
    for seed in 0..100u64 {
        let mut rng = seeded_rng(seed, &[300]);
        let n = rng.gen_range(4..=40);
        let coarse = rng.gen_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if coarse {
                    rng.gen_range(0..8) as f64 / 8.0
                } else {
                    rng.gen::<f64>()
                }
            })
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;

        let roc = roc_curve(&scores, &labels).unwrap();
        let mut won = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                won += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let oracle = won / pairs;
        assert!(
            (roc.auc - oracle).abs() <= 1e-12,
            "set {seed}: sweep {} vs pairwise {oracle}",
            roc.auc
        );
    }
}

#[test]
fn auc_is_invariant_under_increasing_transforms() {
    for seed in 0..20u64 {
        let mut rng = seeded_rng(seed, &[301]);
        let n = rng.gen_range(6..=30);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let base = roc_curve(&scores, &labels).unwrap();
        for transform in [|s: f64| 3.0 * s - 1.0, |s: f64| s.exp(), |s: f64| s.atan()] {
            let mapped: Vec<f64> = scores.iter().map(|&s| transform(s)).collect();
            let roc = roc_curve(&mapped, &labels).unwrap();
            assert_eq!(roc.auc, base.auc);
            assert_eq!(roc.points, base.points);
        }
    }
}

#[test]
fn roc_coordinates_are_monotone_and_bounded() {
    for seed in 0..20u64 {
        let mut rng = seeded_rng(seed, &[302]);
        let n = rng.gen_range(4..=50);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let roc = roc_curve(&scores, &labels).unwrap();
        assert_eq!(roc.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(roc.points.last(), Some(&(1.0, 1.0)));
        for pair in roc.points.windows(2) {
            assert!(pair[1].0 >= pair[0].0 && pair[1].1 >= pair[0].1);
        }
        for &(fpr, tpr) in &roc.points {
            assert!((0.0..=1.0).contains(&fpr) && (0.0..=1.0).contains(&tpr));
        }
    }
}

#[test]
fn logreg_training_is_deterministic_and_reduces_loss() {
    for seed in 0..5u64 {
        let mut rng = seeded_rng(seed, &[303]);
        let n = rng.gen_range(30..=60);
        let mut features = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let positive = i % 2 == 0;
            let offset = if positive { 0.8 } else { -0.8 };
            features.push([
                offset + rng.gen_range(-1.0..1.0),
                -offset + rng.gen_range(-1.0..1.0),
            ]);
            labels.push(positive);
        }
        let config = LogRegConfig::default();
        let a = train_logreg(&features, &labels, &config).unwrap();
        let b = train_logreg(&features, &labels, &config).unwrap();
        assert_eq!(a.weights[0].to_bits(), b.weights[0].to_bits());
        assert_eq!(a.weights[1].to_bits(), b.weights[1].to_bits());
        assert_eq!(a.bias.to_bits(), b.bias.to_bits());

        // zero initialization scores 0.5 everywhere, so the starting loss is
        // ln 2; training must not end above it
        let final_loss = features
            .iter()
            .zip(&labels)
            .map(|(f, &l)| {
                let p = score(&a, *f).clamp(1e-15, 1.0 - 1e-15);
                if l {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum::<f64>()
            / n as f64
            + config.l2_penalty * (a.weights[0].powi(2) + a.weights[1].powi(2));
        assert!(
            final_loss <= std::f64::consts::LN_2 + 1e-12,
            "set {seed}: final loss {final_loss}"
        );
    }
}

#[test]
fn persistence_round_trips_are_bit_exact() {
    let dir = tempfile::tempdir().unwrap();

    for seed in 0..10u64 {
        let path = dir.path().join(format!("model-{seed}.json"));
        let model = random_network(seed);
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(model, loaded);
        let again = dir.path().join(format!("model-{seed}-again.json"));
        save_model(&again, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    let mut rng = seeded_rng(9, &[500]);
    let per_class: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|_| {
            (0..6)
                .map(|_| (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect()
        })
        .collect();
    let mut bank = ClassFeatureBank::from_rows(per_class).unwrap();
    bank.set_bandwidth(0.123456789).unwrap();
    let path = dir.path().join("bank.json");
    save_feature_bank(&path, &bank).unwrap();
    let loaded = load_feature_bank(&path).unwrap();
    let again = dir.path().join("bank-again.json");
    save_feature_bank(&again, &loaded).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let detector = advartifact::detector::DetectorModel {
        zscore: advartifact::detector::ZScoreParams {
            mean: [0.1 + 0.2, 1.0 / 3.0],
            std: [2.0_f64.sqrt(), 0.07],
        },
        weights: [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)],
        bias: rng.gen_range(-2.0..2.0),
    };
    let path = dir.path().join("detector.json");
    save_detector(&path, &detector).unwrap();
    let loaded = load_detector(&path).unwrap();
    assert_eq!(detector, loaded);
    let again = dir.path().join("detector-again.json");
    save_detector(&again, &loaded).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let model = random_network(2);
    let mut rng = seeded_rng(11, &[501]);
    let x = random_input(&model, &mut rng);
    let y = one_hot(predict(&model, &x).unwrap(), model.num_classes);
    let kind = AttackKind::Fgsm { epsilon: 0.2 };
    let result = fgsm(&model, &x, &y, 0.2)
        .unwrap()
        .with_noisy(&kind, 17)
        .unwrap();
    let batch = vec![result.clone(), fgsm(&model, &x, &y, 0.05).unwrap()];
    let path = dir.path().join("batch.jsonl");
    save_attack_batch(&path, &batch).unwrap();
    let loaded = load_attack_batch(&path).unwrap();
    assert_eq!(batch, loaded);
    let again = dir.path().join("batch-again.jsonl");
    save_attack_batch(&again, &loaded).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}
