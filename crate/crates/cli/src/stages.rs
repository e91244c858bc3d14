//! The six pipeline stages. Every random stream is derived from the master
//! seed plus stable indices (stage, attack, sample), never from execution
//! order, so reruns reproduce outputs byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::Serialize;

use advartifact::artifact::{
    build_feature_bank, density_walk, extract_features, fit_bandwidth, ArtifactFeatures,
};
use advartifact::attack::{fgsm, perturbation_stats, run_attack, AttackKind};
use advartifact::data::{subset, Dataset};
use advartifact::detector::{
    classify_with_undecided, evaluate_detector, train_logreg, uncertainty_threshold,
    Classification, LabeledFeatures, RocCurve, SampleSet, ScoreKind,
};
use advartifact::nn::{accuracy, build_model, predict, train, NetworkModel, TrainConfig};
use advartifact::persist;
use advartifact::rng::{derive_seed, seeded_rng};
use advartifact::tensor::Tensor;

use crate::config::Config;
use crate::manifest::{record_stage, StageEntry};
use crate::CliError;

const TRAIN_STREAM: u64 = 1;
const ATTACK_STREAM: u64 = 2;
const FEATURE_STREAM: u64 = 3;
const SPLIT_STREAM: u64 = 4;
const UNDECIDED_STREAM: u64 = 5;

pub struct Ctx {
    pub config: Config,
    pub config_hash: String,
    pub out: PathBuf,
    pub seed: u64,
    /// Canonical attack name to restrict to, when --attack was given.
    pub attack_filter: Option<String>,
    pub verbose: bool,
}

impl Ctx {
    fn vlog(&self, msg: &str) {
        if self.verbose {
            eprintln!("{msg}");
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Configured attacks, restricted by the filter.
    fn attacks(&self) -> Vec<&AttackKind> {
        self.config
            .attacks
            .iter()
            .filter(|k| match &self.attack_filter {
                Some(name) => k.name() == name,
                None => true,
            })
            .collect()
    }

    fn matches_filter(&self, attack: &str) -> bool {
        match &self.attack_filter {
            Some(name) => attack == name,
            None => true,
        }
    }

    fn record(
        &self,
        stage: &str,
        stage_seed: u64,
        outputs: &[PathBuf],
    ) -> Result<(), CliError> {
        let rel: Vec<String> = outputs
            .iter()
            .map(|p| {
                p.strip_prefix(&self.out)
                    .unwrap_or(p)
                    .to_string_lossy()
                    .into_owned()
            })
            .collect();
        record_stage(
            &self.out,
            stage,
            StageEntry {
                config_sha256: self.config_hash.clone(),
                master_seed: self.seed,
                stage_seed,
                attack_filter: self.attack_filter.clone(),
                outputs: rel,
            },
        )
    }
}

fn pipeline<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Pipeline(format!("{context}: {e}"))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Pipeline(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Pipeline(format!("{}: {e}", path.display())))
}

fn read_model(ctx: &Ctx) -> Result<NetworkModel, CliError> {
    let path = ctx.path("model.json");
    persist::load_model(&path)
        .map_err(|e| CliError::Pipeline(format!("{} (run train first?): {e}", path.display())))
}

fn one_hot(label: usize, classes: usize) -> Tensor {
    let mut y = vec![0.0; classes];
    y[label] = 1.0;
    Tensor::new(vec![classes], y).expect("one-hot construction")
}

/// Fixed per-attack tag; keeps per-sample seeds stable under --attack
/// filtering and config reordering.
fn attack_tag(name: &str) -> u64 {
    match name {
        "fgsm" => 0,
        "bim-a" => 1,
        "bim-b" => 2,
        "jsma" => 3,
        "cw-l0" => 4,
        _ => u64::MAX,
    }
}

pub fn train_stage(ctx: &Ctx) -> Result<(), CliError> {
    std::fs::create_dir_all(&ctx.out)
        .map_err(|e| CliError::Pipeline(format!("{}: {e}", ctx.out.display())))?;
    let stage_seed = derive_seed(ctx.seed, &[TRAIN_STREAM]);
    let train_set = ctx.config.data.load_train().map_err(pipeline("train data"))?;
    let test_set = ctx.config.data.load_test().map_err(pipeline("test data"))?;
    let classes = ctx.config.model.num_classes;

    let specs = ctx.config.model.layer_specs()?;
    let model = build_model(
        &specs,
        train_set.image_shape(),
        classes,
        derive_seed(stage_seed, &[0]),
    )
    .map_err(pipeline("model"))?;
    let train_config = TrainConfig {
        epochs: ctx.config.model.epochs,
        batch_size: ctx.config.model.batch_size,
        adadelta_rho: ctx.config.model.adadelta_rho,
        adadelta_epsilon: ctx.config.model.adadelta_epsilon,
        rng_seed: derive_seed(stage_seed, &[1]),
    };
    let labels = train_set
        .one_hot_labels(classes)
        .map_err(pipeline("train labels"))?;
    ctx.vlog(&format!(
        "training on {} samples for {} epochs",
        train_set.len(),
        train_config.epochs
    ));
    let (trained, report) =
        train(&model, &train_set.images, &labels, &train_config).map_err(pipeline("training"))?;
    let train_accuracy = accuracy(&trained, &train_set.images, &train_set.labels)
        .map_err(pipeline("train accuracy"))?;
    let test_accuracy = accuracy(&trained, &test_set.images, &test_set.labels)
        .map_err(pipeline("test accuracy"))?;
    ctx.vlog(&format!(
        "train accuracy {train_accuracy:.4}, test accuracy {test_accuracy:.4}"
    ));

    let model_path = ctx.path("model.json");
    persist::save_model(&model_path, &trained).map_err(pipeline("saving model"))?;

    #[derive(Serialize)]
    struct TrainSummary {
        initial_loss: f64,
        final_loss: f64,
        epoch_losses: Vec<f64>,
        train_accuracy: f64,
        test_accuracy: f64,
    }
    let report_path = ctx.path("train_report.json");
    persist::save_json(
        &report_path,
        &TrainSummary {
            initial_loss: report.initial_loss,
            final_loss: report.final_loss,
            epoch_losses: report.epoch_losses,
            train_accuracy,
            test_accuracy,
        },
    )
    .map_err(pipeline("saving train report"))?;

    ctx.record("train", stage_seed, &[model_path, report_path])
}

struct Candidate {
    x: Tensor,
    label: usize,
}

/// Test samples the model classifies correctly, in dataset order.
fn select_candidates(
    model: &NetworkModel,
    test: &Dataset,
    want: usize,
) -> Result<(Vec<Candidate>, usize), CliError> {
    let mut picked = Vec::new();
    let mut skipped = 0;
    for i in 0..test.len() {
        if picked.len() == want {
            break;
        }
        let x = test.image(i);
        if predict(model, &x).map_err(pipeline("candidate selection"))? == test.labels[i] {
            picked.push(Candidate {
                x,
                label: test.labels[i],
            });
        } else {
            skipped += 1;
        }
    }
    Ok((picked, skipped))
}

pub fn attack_stage(ctx: &Ctx) -> Result<(), CliError> {
    let stage_seed = derive_seed(ctx.seed, &[ATTACK_STREAM]);
    let model = read_model(ctx)?;
    let test = ctx.config.data.load_test().map_err(pipeline("test data"))?;
    let classes = ctx.config.model.num_classes;

    let (candidates, skipped) = select_candidates(&model, &test, ctx.config.detector.candidates)?;
    if candidates.is_empty() {
        return Err(CliError::Pipeline(
            "no correctly classified test samples to attack".into(),
        ));
    }
    ctx.vlog(&format!(
        "{} candidates ({} misclassified test samples skipped)",
        candidates.len(),
        skipped
    ));
    if candidates.len() < ctx.config.detector.candidates {
        ctx.vlog(&format!(
            "test pool exhausted below the requested {} candidates",
            ctx.config.detector.candidates
        ));
    }

    let mut outputs = Vec::new();
    let mut stats = String::from(
        "attack,samples,success_rate,adversarial_accuracy,mean_l2,mean_l0,mean_iterations\n",
    );
    for kind in ctx.attacks() {
        let tag = attack_tag(kind.name());
        let mut results = Vec::with_capacity(candidates.len());
        for (i, candidate) in candidates.iter().enumerate() {
            let y = one_hot(candidate.label, classes);
            let result = run_attack(&model, &candidate.x, &y, kind)
                .map_err(pipeline(kind.name()))?
                .with_noisy(kind, derive_seed(stage_seed, &[tag, i as u64]))
                .map_err(pipeline("noisy counterpart"))?;
            results.push(result);
        }
        let n = results.len();
        let (mean_l2, adv_accuracy) = perturbation_stats(&results).map_err(pipeline("stats"))?;
        let success_rate = results.iter().filter(|r| r.success).count() as f64 / n as f64;
        let mean_l0 = results.iter().map(|r| r.l0_count as f64).sum::<f64>() / n as f64;
        let mean_iterations =
            results.iter().map(|r| r.iterations as f64).sum::<f64>() / n as f64;
        ctx.vlog(&format!(
            "{}: success {success_rate:.3}, adversarial accuracy {adv_accuracy:.3}, mean l2 {mean_l2:.3}",
            kind.name()
        ));
        stats.push_str(&format!(
            "{},{n},{success_rate:.6},{adv_accuracy:.6},{mean_l2:.6},{mean_l0:.6},{mean_iterations:.6}\n",
            kind.name()
        ));

        let path = ctx.path(&format!("attacks/{}.jsonl", kind.name()));
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Pipeline(format!("{}: {e}", parent.display())))?;
        }
        persist::save_attack_batch(&path, &results).map_err(pipeline("saving attack batch"))?;
        outputs.push(path);
    }

    let stats_path = ctx.path("attack_stats.csv");
    write_text(&stats_path, &stats)?;
    outputs.push(stats_path);
    ctx.record("attack", stage_seed, &outputs)
}

struct FeatureRow {
    set: SampleSet,
    attack: String,
    sample_id: usize,
    features: ArtifactFeatures,
}

const FEATURES_HEADER: &str = "set,attack,sample_id,uncertainty,neg_log_density,predicted_class";

fn write_features_csv(path: &Path, rows: &[FeatureRow]) -> Result<(), CliError> {
    let mut text = String::from(FEATURES_HEADER);
    text.push('\n');
    for row in rows {
        // bare {} keeps the full float precision for exact re-parsing
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.set.name(),
            row.attack,
            row.sample_id,
            row.features.uncertainty,
            row.features.neg_log_density,
            row.features.predicted_class
        ));
    }
    write_text(path, &text)
}

fn read_features_csv(path: &Path) -> Result<Vec<FeatureRow>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Pipeline(format!("{} (run features first?): {e}", path.display()))
    })?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == FEATURES_HEADER => {}
        other => {
            return Err(CliError::Pipeline(format!(
                "{}: unexpected header {other:?}",
                path.display()
            )))
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let context = || format!("{} line {}", path.display(), idx + 2);
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(CliError::Pipeline(format!("{}: ragged row", context())));
        }
        let set = match fields[0] {
            "normal" => SampleSet::Normal,
            "noisy" => SampleSet::Noisy,
            "adversarial" => SampleSet::Adversarial,
            other => {
                return Err(CliError::Pipeline(format!(
                    "{}: unknown set {other:?}",
                    context()
                )))
            }
        };
        let parse_f = |s: &str| -> Result<f64, CliError> {
            s.parse()
                .map_err(|e| CliError::Pipeline(format!("{}: {e}", context())))
        };
        let parse_u = |s: &str| -> Result<usize, CliError> {
            s.parse()
                .map_err(|e| CliError::Pipeline(format!("{}: {e}", context())))
        };
        rows.push(FeatureRow {
            set,
            attack: fields[1].to_string(),
            sample_id: parse_u(fields[2])?,
            features: ArtifactFeatures {
                uncertainty: parse_f(fields[3])?,
                neg_log_density: parse_f(fields[4])?,
                predicted_class: parse_u(fields[5])?,
            },
        });
    }
    Ok(rows)
}

/// Per-class cap on the bank: a seeded subset of each class's samples.
fn capped_bank_input(
    train: &Dataset,
    cap: usize,
    seed: u64,
) -> Result<(Tensor, Vec<usize>), CliError> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &label) in train.labels.iter().enumerate() {
        by_class.entry(label).or_default().push(i);
    }
    let mut rng = seeded_rng(seed, &[]);
    let mut keep = Vec::new();
    for (_, mut members) in by_class {
        if members.len() > cap {
            members.shuffle(&mut rng);
            members.truncate(cap);
            members.sort_unstable();
        }
        keep.extend(members);
    }
    let width: usize = train.image_shape().iter().product();
    let mut data = Vec::with_capacity(keep.len() * width);
    let mut labels = Vec::with_capacity(keep.len());
    for &i in &keep {
        data.extend_from_slice(train.images.row(i));
        labels.push(train.labels[i]);
    }
    let mut shape = vec![keep.len()];
    shape.extend_from_slice(train.image_shape());
    let images = Tensor::new(shape, data).map_err(pipeline("bank subset"))?;
    Ok((images, labels))
}

fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![lo];
    }
    (0..points)
        .map(|j| lo * (hi / lo).powf(j as f64 / (points - 1) as f64))
        .collect()
}

pub fn features_stage(ctx: &Ctx) -> Result<(), CliError> {
    let stage_seed = derive_seed(ctx.seed, &[FEATURE_STREAM]);
    let model = read_model(ctx)?;
    let train_set = ctx.config.data.load_train().map_err(pipeline("train data"))?;
    let fc = &ctx.config.features;

    let mut bank = match fc.bank_cap_per_class {
        Some(cap) => {
            let (images, labels) = capped_bank_input(&train_set, cap, derive_seed(stage_seed, &[0]))?;
            build_feature_bank(&model, &images, &labels)
        }
        None => build_feature_bank(&model, &train_set.images, &train_set.labels),
    }
    .map_err(pipeline("feature bank"))?;

    let median = bank.median_pairwise_distance();
    let grid = log_grid(
        median * fc.bandwidth_scale_min,
        median * fc.bandwidth_scale_max,
        fc.bandwidth_grid_points,
    );
    let sigma = fit_bandwidth(&mut bank, &grid).map_err(pipeline("bandwidth"))?;
    ctx.vlog(&format!(
        "bandwidth {sigma:.6} (median pairwise distance {median:.6})"
    ));
    let bank_path = ctx.path("bank.json");
    persist::save_feature_bank(&bank_path, &bank).map_err(pipeline("saving bank"))?;

    let mut rows = Vec::new();
    let mut normal_cache: BTreeMap<usize, ArtifactFeatures> = BTreeMap::new();
    let mut walk_source: Option<(AttackKind, Vec<advartifact::attack::AttackResult>)> = None;
    for kind in ctx.attacks() {
        let tag = attack_tag(kind.name());
        let batch_path = ctx.path(&format!("attacks/{}.jsonl", kind.name()));
        let results = persist::load_attack_batch(&batch_path).map_err(|e| {
            CliError::Pipeline(format!(
                "{} (run attack first?): {e}",
                batch_path.display()
            ))
        })?;
        ctx.vlog(&format!(
            "extracting features for {} ({} samples)",
            kind.name(),
            results.len()
        ));
        for (i, result) in results.iter().enumerate() {
            let normal = match normal_cache.get(&i) {
                Some(f) => f.clone(),
                None => {
                    let f = extract_features(
                        &model,
                        &bank,
                        &result.x,
                        fc.t_samples,
                        derive_seed(stage_seed, &[1, i as u64]),
                    )
                    .map_err(pipeline("normal features"))?;
                    normal_cache.insert(i, f.clone());
                    f
                }
            };
            rows.push(FeatureRow {
                set: SampleSet::Normal,
                attack: kind.name().to_string(),
                sample_id: i,
                features: normal,
            });
            let noisy_x = result.x_noisy.as_ref().ok_or_else(|| {
                CliError::Pipeline(format!("{}: sample {i} lacks a noisy tensor", kind.name()))
            })?;
            rows.push(FeatureRow {
                set: SampleSet::Noisy,
                attack: kind.name().to_string(),
                sample_id: i,
                features: extract_features(
                    &model,
                    &bank,
                    noisy_x,
                    fc.t_samples,
                    derive_seed(stage_seed, &[2, tag, i as u64]),
                )
                .map_err(pipeline("noisy features"))?,
            });
            rows.push(FeatureRow {
                set: SampleSet::Adversarial,
                attack: kind.name().to_string(),
                sample_id: i,
                features: extract_features(
                    &model,
                    &bank,
                    &result.x_adv,
                    fc.t_samples,
                    derive_seed(stage_seed, &[3, tag, i as u64]),
                )
                .map_err(pipeline("adversarial features"))?,
            });
        }
        if matches!(kind, AttackKind::BimB { .. }) && walk_source.is_none() {
            walk_source = Some((kind.clone(), results));
        }
    }
    let features_path = ctx.path("features.csv");
    write_features_csv(&features_path, &rows)?;
    let mut outputs = vec![bank_path, features_path];

    if fc.walks > 0 {
        if let Some((kind, results)) = walk_source {
            let classes = ctx.config.model.num_classes;
            let mut text = String::from("walk_id,iteration,logk_source,logk_adv\n");
            for (w, result) in results.iter().take(fc.walks).enumerate() {
                let y = one_hot(result.true_label, classes);
                let records = density_walk(&model, &bank, &result.x, &y, &kind)
                    .map_err(pipeline("density walk"))?;
                for r in &records {
                    text.push_str(&format!(
                        "{w},{},{},{}\n",
                        r.iteration, r.logk_source, r.logk_adv
                    ));
                }
            }
            let walks_path = ctx.path("walks.csv");
            write_text(&walks_path, &text)?;
            outputs.push(walks_path);
        }
    }
    ctx.record("features", stage_seed, &outputs)
}

/// Candidate ids split into detector-train and evaluation halves by a
/// seeded shuffle shared between the detect and evaluate stages.
fn split_ids(
    ids: &BTreeSet<usize>,
    train_fraction: f64,
    seed: u64,
) -> Result<(BTreeSet<usize>, BTreeSet<usize>), CliError> {
    if ids.len() < 2 {
        return Err(CliError::Pipeline(format!(
            "{} candidate ids cannot be split for detector training",
            ids.len()
        )));
    }
    let mut shuffled: Vec<usize> = ids.iter().copied().collect();
    shuffled.shuffle(&mut seeded_rng(seed, &[]));
    let n_train = ((shuffled.len() as f64 * train_fraction).round() as usize)
        .clamp(1, shuffled.len() - 1);
    let train: BTreeSet<usize> = shuffled[..n_train].iter().copied().collect();
    let eval: BTreeSet<usize> = shuffled[n_train..].iter().copied().collect();
    Ok((train, eval))
}

fn normal_ids(rows: &[FeatureRow]) -> BTreeSet<usize> {
    rows.iter()
        .filter(|r| r.set == SampleSet::Normal)
        .map(|r| r.sample_id)
        .collect()
}

pub fn detect_stage(ctx: &Ctx) -> Result<(), CliError> {
    let stage_seed = derive_seed(ctx.seed, &[SPLIT_STREAM]);
    let rows: Vec<FeatureRow> = read_features_csv(&ctx.path("features.csv"))?
        .into_iter()
        .filter(|r| ctx.matches_filter(&r.attack))
        .collect();
    let ids = normal_ids(&rows);
    let (train_ids, _) = split_ids(&ids, ctx.config.detector.train_fraction, stage_seed)?;

    // normal and adversarial rows only; the noisy set is held back for the
    // evaluation negative class
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut seen_normals = BTreeSet::new();
    for row in &rows {
        if !train_ids.contains(&row.sample_id) {
            continue;
        }
        match row.set {
            SampleSet::Normal => {
                if seen_normals.insert(row.sample_id) {
                    features.push([row.features.uncertainty, row.features.neg_log_density]);
                    labels.push(false);
                }
            }
            SampleSet::Adversarial => {
                features.push([row.features.uncertainty, row.features.neg_log_density]);
                labels.push(true);
            }
            SampleSet::Noisy => {}
        }
    }
    ctx.vlog(&format!(
        "training detector on {} feature rows ({} candidate ids)",
        features.len(),
        train_ids.len()
    ));
    let detector = train_logreg(&features, &labels, &ctx.config.detector.logreg)
        .map_err(pipeline("detector training"))?;
    ctx.vlog(&format!(
        "weights [{:.4}, {:.4}], bias {:.4}",
        detector.weights[0], detector.weights[1], detector.bias
    ));
    let path = ctx.path("detector.json");
    persist::save_detector(&path, &detector).map_err(pipeline("saving detector"))?;
    ctx.record("detect", stage_seed, &[path])
}

fn write_roc_csv(path: &Path, roc: &RocCurve) -> Result<(), CliError> {
    let mut text = String::from("threshold,fpr,tpr\n");
    for (threshold, (fpr, tpr)) in roc.thresholds.iter().zip(&roc.points) {
        text.push_str(&format!("{threshold},{fpr},{tpr}\n"));
    }
    write_text(path, &text)
}

pub fn evaluate_stage(ctx: &Ctx) -> Result<(), CliError> {
    let stage_seed = derive_seed(ctx.seed, &[SPLIT_STREAM]);
    let rows: Vec<FeatureRow> = read_features_csv(&ctx.path("features.csv"))?
        .into_iter()
        .filter(|r| ctx.matches_filter(&r.attack))
        .collect();
    let detector_path = ctx.path("detector.json");
    let detector = persist::load_detector(&detector_path).map_err(|e| {
        CliError::Pipeline(format!(
            "{} (run detect first?): {e}",
            detector_path.display()
        ))
    })?;
    let ids = normal_ids(&rows);
    let (_, eval_ids) = split_ids(&ids, ctx.config.detector.train_fraction, stage_seed)?;

    let eval_rows: Vec<LabeledFeatures> = rows
        .iter()
        .filter(|r| eval_ids.contains(&r.sample_id))
        .map(|r| LabeledFeatures {
            set: r.set,
            attack: r.attack.clone(),
            sample_id: r.sample_id,
            features: r.features.clone(),
        })
        .collect();

    let mut outputs = Vec::new();
    let mut per_attack: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut overall: BTreeMap<String, f64> = BTreeMap::new();
    let kinds = [
        ScoreKind::Uncertainty,
        ScoreKind::Density,
        ScoreKind::Combined(&detector),
    ];
    for kind in &kinds {
        let report = evaluate_detector(&eval_rows, kind).map_err(pipeline("evaluation"))?;
        let metric = format!("auc_{}", kind.name());
        for (attack, roc) in &report.per_attack {
            let path = ctx.path(&format!("evaluate/roc-{}-{attack}.csv", kind.name()));
            write_roc_csv(&path, roc)?;
            outputs.push(path);
            per_attack
                .entry(attack.clone())
                .or_default()
                .insert(metric.clone(), roc.auc);
        }
        let path = ctx.path(&format!("evaluate/roc-{}-overall.csv", kind.name()));
        write_roc_csv(&path, &report.overall)?;
        outputs.push(path);
        overall.insert(metric, report.overall.auc);
    }

    // feature directionality per attack, over every attacked sample: how
    // often the adversarial sample has higher uncertainty and lower density
    // than its source
    let mut by_key: BTreeMap<(String, usize), [Option<&ArtifactFeatures>; 2]> = BTreeMap::new();
    for row in &rows {
        let slot = match row.set {
            SampleSet::Normal => 0,
            SampleSet::Adversarial => 1,
            SampleSet::Noisy => continue,
        };
        by_key
            .entry((row.attack.clone(), row.sample_id))
            .or_default()[slot] = Some(&row.features);
    }
    let mut up: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for ((attack, _), pair) in &by_key {
        if let [Some(normal), Some(adv)] = pair {
            let entry = up.entry(attack.clone()).or_default();
            entry.0 += 1;
            if adv.uncertainty > normal.uncertainty {
                entry.1 += 1;
            }
            if adv.neg_log_density > normal.neg_log_density {
                entry.2 += 1;
            }
        }
    }
    for (attack, (n, u_up, d_down)) in up {
        let entry = per_attack.entry(attack).or_default();
        entry.insert("uncertainty_up_fraction".into(), u_up as f64 / n as f64);
        entry.insert("density_down_fraction".into(), d_down as f64 / n as f64);
    }

    #[derive(Serialize)]
    struct Summary {
        attacks: BTreeMap<String, BTreeMap<String, f64>>,
        overall: BTreeMap<String, f64>,
        evaluated_ids: usize,
    }
    let summary_path = ctx.path("evaluate/summary.json");
    persist::save_json(
        &summary_path,
        &Summary {
            attacks: per_attack,
            overall,
            evaluated_ids: eval_ids.len(),
        },
    )
    .map_err(pipeline("saving summary"))?;
    outputs.push(summary_path);
    ctx.record("evaluate", stage_seed, &outputs)
}

#[derive(Default, Serialize)]
struct UndecidedCounts {
    count: usize,
    undecided: usize,
    undecided_fraction: f64,
}

impl UndecidedCounts {
    fn add(&mut self, result: Classification) {
        self.count += 1;
        if result == Classification::Undecided {
            self.undecided += 1;
        }
        self.undecided_fraction = self.undecided as f64 / self.count as f64;
    }
}

pub fn undecided_stage(ctx: &Ctx) -> Result<(), CliError> {
    let stage_seed = derive_seed(ctx.seed, &[UNDECIDED_STREAM]);
    let model = read_model(ctx)?;
    let test = ctx.config.data.load_test().map_err(pipeline("test data"))?;
    let classes = ctx.config.model.num_classes;
    let uc = &ctx.config.undecided;
    let t_samples = ctx.config.features.t_samples;

    let validation = subset(
        &test,
        uc.validation_size.min(test.len()),
        derive_seed(stage_seed, &[0]),
        true,
    )
    .map_err(pipeline("validation subset"))?;
    let validation_labels = validation
        .one_hot_labels(classes)
        .map_err(pipeline("validation labels"))?;
    let cutoff = uncertainty_threshold(
        &model,
        &validation.images,
        &validation_labels,
        uc.percentile,
        uc.epsilon,
        t_samples,
        derive_seed(stage_seed, &[1]),
    )
    .map_err(pipeline("uncertainty cutoff"))?;
    ctx.vlog(&format!(
        "uncertainty cutoff {cutoff:.6} at percentile {}",
        uc.percentile
    ));

    let eval = subset(
        &test,
        uc.eval_size.min(test.len()),
        derive_seed(stage_seed, &[2]),
        true,
    )
    .map_err(pipeline("evaluation subset"))?;
    let kind = AttackKind::Fgsm {
        epsilon: uc.epsilon,
    };
    let mut normal = UndecidedCounts::default();
    let mut adversarial = UndecidedCounts::default();
    let mut noisy = UndecidedCounts::default();
    let mut skipped_misclassified = 0;
    for i in 0..eval.len() {
        let x = eval.image(i);
        let classify = |x: &Tensor, stream: u64| {
            classify_with_undecided(
                &model,
                cutoff,
                x,
                t_samples,
                derive_seed(stage_seed, &[stream, i as u64]),
            )
            .map_err(pipeline("undecided classification"))
        };
        normal.add(classify(&x, 3)?);
        let y = one_hot(eval.labels[i], classes);
        match fgsm(&model, &x, &y, uc.epsilon) {
            Ok(result) => {
                let result = result
                    .with_noisy(&kind, derive_seed(stage_seed, &[4, i as u64]))
                    .map_err(pipeline("noisy counterpart"))?;
                adversarial.add(classify(&result.x_adv, 5)?);
                let noisy_x = result.x_noisy.as_ref().expect("with_noisy fills the tensor");
                noisy.add(classify(noisy_x, 6)?);
            }
            Err(advartifact::Error::NotCorrectlyClassified) => skipped_misclassified += 1,
            Err(e) => return Err(pipeline("undecided attack")(e)),
        }
    }

    #[derive(Serialize)]
    struct UndecidedSummary {
        percentile: f64,
        epsilon: f64,
        cutoff: f64,
        normal: UndecidedCounts,
        adversarial: UndecidedCounts,
        noisy: UndecidedCounts,
        skipped_misclassified: usize,
    }
    let path = ctx.path("undecided.json");
    persist::save_json(
        &path,
        &UndecidedSummary {
            percentile: uc.percentile,
            epsilon: uc.epsilon,
            cutoff,
            normal,
            adversarial,
            noisy,
            skipped_misclassified,
        },
    )
    .map_err(pipeline("saving undecided summary"))?;
    ctx.record("undecided", stage_seed, &[path])
}
