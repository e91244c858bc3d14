//! The experiment configuration: one JSON document carrying the dataset
//! paths, model and training settings, attack list, and the feature,
//! detector, and undecided-classification parameters.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use advartifact::attack::AttackKind;
use advartifact::data::{load_csv, load_idx, Dataset};
use advartifact::detector::LogRegConfig;
use advartifact::nn::{lenet_small, LayerSpec};

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub attacks: Vec<AttackKind>,
    pub features: FeatureConfig,
    pub detector: DetectorConfig,
    pub undecided: UndecidedConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        image_shape: Vec<usize>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Either a named preset ("lenet-small") or an explicit layer list.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub layers: Option<Vec<LayerSpec>>,
    pub num_classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_rho")]
    pub adadelta_rho: f64,
    #[serde(default = "default_adadelta_epsilon")]
    pub adadelta_epsilon: f64,
}

fn default_rho() -> f64 {
    0.95
}

fn default_adadelta_epsilon() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    /// Stochastic forward passes per uncertainty estimate.
    pub t_samples: usize,
    /// Log-spaced bandwidth grid, scaled by the median pairwise distance.
    pub bandwidth_grid_points: usize,
    pub bandwidth_scale_min: f64,
    pub bandwidth_scale_max: f64,
    /// Density walks to record (0 disables the walk CSV).
    pub walks: usize,
    /// Optional per-class cap on the density bank.
    #[serde(default)]
    pub bank_cap_per_class: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Correctly classified test samples to attack.
    pub candidates: usize,
    /// Fraction of candidates whose features train the detector; the rest
    /// are held out for ROC evaluation.
    pub train_fraction: f64,
    #[serde(default)]
    pub logreg: LogRegConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UndecidedConfig {
    pub percentile: f64,
    /// Step size of the single-step attack that calibrates the cutoff.
    pub epsilon: f64,
    pub validation_size: usize,
    pub eval_size: usize,
}

impl Config {
    /// Parses and validates the file; also returns the hex SHA-256 of its
    /// bytes for the manifest.
    pub fn load(path: &Path) -> Result<(Self, String), CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let hash = format!("{:x}", Sha256::digest(&bytes));
        let config: Config = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok((config, hash))
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.model.num_classes < 2 {
            return bad("model.num_classes must be at least 2".into());
        }
        self.model.layer_specs()?;
        if let DataConfig::Csv { image_shape, .. } = &self.data {
            if image_shape.is_empty() || image_shape.iter().any(|&d| d == 0) {
                return bad(format!("data.image_shape {image_shape:?} is degenerate"));
            }
        }
        if self.attacks.is_empty() {
            return bad("attacks list is empty".into());
        }
        for kind in &self.attacks {
            kind.validate()
                .map_err(|e| CliError::Config(format!("attack {}: {e}", kind.name())))?;
        }
        let names: Vec<&str> = self.attacks.iter().map(|k| k.name()).collect();
        for (i, name) in names.iter().enumerate() {
            if names[..i].contains(name) {
                return bad(format!("attack {name} is listed twice"));
            }
        }
        if self.features.t_samples < 2 {
            return bad("features.t_samples must be at least 2".into());
        }
        if self.features.bandwidth_grid_points == 0 {
            return bad("features.bandwidth_grid_points must be positive".into());
        }
        let (lo, hi) = (
            self.features.bandwidth_scale_min,
            self.features.bandwidth_scale_max,
        );
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("bandwidth scale range [{lo}, {hi}] is invalid"));
        }
        if self.features.bank_cap_per_class == Some(0) {
            return bad("features.bank_cap_per_class must be positive when set".into());
        }
        if self.detector.candidates == 0 {
            return bad("detector.candidates must be positive".into());
        }
        if !(self.detector.train_fraction > 0.0 && self.detector.train_fraction < 1.0) {
            return bad(format!(
                "detector.train_fraction {} must lie in (0, 1)",
                self.detector.train_fraction
            ));
        }
        if !(0.0..=100.0).contains(&self.undecided.percentile) {
            return bad(format!(
                "undecided.percentile {} outside [0, 100]",
                self.undecided.percentile
            ));
        }
        if self.undecided.epsilon <= 0.0 {
            return bad("undecided.epsilon must be positive".into());
        }
        if self.undecided.validation_size == 0 || self.undecided.eval_size == 0 {
            return bad("undecided sizes must be positive".into());
        }
        Ok(())
    }
}

impl ModelConfig {
    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>, CliError> {
        match (&self.preset, &self.layers) {
            (Some(p), None) if p == "lenet-small" => Ok(lenet_small(self.num_classes)),
            (Some(p), None) => Err(CliError::Config(format!("unknown model preset {p:?}"))),
            (None, Some(layers)) if !layers.is_empty() => Ok(layers.clone()),
            _ => Err(CliError::Config(
                "model needs exactly one of preset or a non-empty layers list".into(),
            )),
        }
    }
}

/// Relative dataset paths resolve against ADVARTIFACT_DATA_DIR when set.
fn resolve(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("ADVARTIFACT_DATA_DIR") {
        Some(root) => Path::new(&root).join(path),
        None => path.to_path_buf(),
    }
}

impl DataConfig {
    pub fn load_train(&self) -> advartifact::Result<Dataset> {
        match self {
            DataConfig::Idx {
                train_images,
                train_labels,
                ..
            } => load_idx(&resolve(train_images), &resolve(train_labels)),
            DataConfig::Csv {
                train, image_shape, ..
            } => load_csv(&resolve(train), image_shape),
        }
        .map(|d| d.with_split("train"))
    }

    pub fn load_test(&self) -> advartifact::Result<Dataset> {
        match self {
            DataConfig::Idx {
                test_images,
                test_labels,
                ..
            } => load_idx(&resolve(test_images), &resolve(test_labels)),
            DataConfig::Csv {
                test, image_shape, ..
            } => load_csv(&resolve(test), image_shape),
        }
        .map(|d| d.with_split("test"))
    }
}
