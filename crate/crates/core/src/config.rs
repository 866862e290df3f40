//! The experiment configuration file.
//!
//! One TOML file with four sections (`io`, `preprocessing`, `training`,
//! `evaluation`) drives every stage. Missing keys take the defaults defined
//! here; unknown keys are rejected with their full path. The resolved
//! config is fingerprinted so every artifact can point back to the exact
//! parameters that produced it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil;

pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.96;
pub const DEFAULT_TARGET_DIM: u32 = 224;
pub const DEFAULT_TEST_FRACTION: f64 = 0.20;
pub const DEFAULT_VAL_FRACTION: f64 = 0.15;
pub const DEFAULT_UNCERTAINTY_THRESHOLD: f64 = 0.5;
pub const DEFAULT_SEED: u64 = 42;
pub const MIN_TARGET_DIM: u32 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropStrategy {
    Shift,
    Pad,
}

/// What to do when the square is larger than the image under `shift`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftFallback {
    Pad,
    Error,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Resnet50,
    Vgg19,
    Densenet161,
    Densenet201,
}

impl Backbone {
    pub const ALL: [Backbone; 4] = [
        Backbone::Resnet50,
        Backbone::Vgg19,
        Backbone::Densenet161,
        Backbone::Densenet201,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Backbone::Resnet50 => "resnet50",
            Backbone::Vgg19 => "vgg19",
            Backbone::Densenet161 => "densenet161",
            Backbone::Densenet201 => "densenet201",
        }
    }
}

impl std::str::FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Backbone::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::UnsupportedBackbone(s.to_string()))
    }
}

impl std::fmt::Display for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentationLevel {
    None,
    Light,
    Medium,
    Strong,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    None,
    InverseFrequency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoConfig {
    pub data_dir: PathBuf,
    pub detections_file: PathBuf,
    pub annotations_file: PathBuf,
    pub output_dir: PathBuf,
    pub model_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment_name: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessingConfig {
    pub confidence_threshold: f64,
    pub crop_strategy: CropStrategy,
    pub target_dim: u32,
    pub shift_fallback: ShiftFallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub unfrozen_depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub target_scheme: String,
    pub backbone: Backbone,
    pub augmentation: AugmentationLevel,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub stratify_attribute: String,
    pub seed: u64,
    pub repeats: usize,
    pub pretrained: bool,
    pub allow_random_fallback: bool,
    pub momentum: f64,
    pub class_weighting: ClassWeighting,
    pub transfer_stage: StageConfig,
    pub finetune_stage: FinetuneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    pub uncertainty_threshold: f64,
    pub exclude_uncertain: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stratify_attribute: Option<String>,
}

/// Fully resolved configuration: every key present, defaults applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub io: IoConfig,
    pub preprocessing: PreprocessingConfig,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
}

// What the user writes: every key optional except the required ones.
mod raw {
    use super::*;

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct File {
        pub io: Io,
        #[serde(default)]
        pub preprocessing: Preprocessing,
        pub training: Training,
        #[serde(default)]
        pub evaluation: Evaluation,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Io {
        pub data_dir: PathBuf,
        pub detections_file: Option<PathBuf>,
        pub annotations_file: Option<PathBuf>,
        pub output_dir: PathBuf,
        pub model_dir: PathBuf,
        pub experiment_name: Option<String>,
    }

    #[derive(Deserialize, Default)]
    #[serde(deny_unknown_fields)]
    pub struct Preprocessing {
        pub confidence_threshold: Option<f64>,
        pub crop_strategy: Option<CropStrategy>,
        pub target_dim: Option<u32>,
        pub shift_fallback: Option<ShiftFallback>,
    }

    #[derive(Deserialize, Default)]
    #[serde(deny_unknown_fields)]
    pub struct Stage {
        pub epochs: Option<usize>,
        pub learning_rate: Option<f64>,
        pub batch_size: Option<usize>,
        pub unfrozen_depth: Option<usize>,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Training {
        pub target_scheme: String,
        pub backbone: Option<Backbone>,
        pub augmentation: Option<AugmentationLevel>,
        pub test_fraction: Option<f64>,
        pub val_fraction: Option<f64>,
        pub stratify_attribute: Option<String>,
        pub seed: Option<u64>,
        pub repeats: Option<usize>,
        pub pretrained: Option<bool>,
        pub allow_random_fallback: Option<bool>,
        pub momentum: Option<f64>,
        pub class_weighting: Option<ClassWeighting>,
        #[serde(default)]
        pub transfer_stage: Stage,
        #[serde(default)]
        pub finetune_stage: Stage,
    }

    #[derive(Deserialize, Default)]
    #[serde(deny_unknown_fields)]
    pub struct Evaluation {
        pub uncertainty_threshold: Option<f64>,
        pub exclude_uncertain: Option<bool>,
        pub stratify_attribute: Option<String>,
    }
}

impl raw::File {
    fn resolve(self) -> ExperimentConfig {
        let t = self.training;
        let stratify = t
            .stratify_attribute
            .unwrap_or_else(|| t.target_scheme.clone());
        ExperimentConfig {
            io: IoConfig {
                data_dir: self.io.data_dir,
                detections_file: self
                    .io
                    .detections_file
                    .unwrap_or_else(|| "detections.json".into()),
                annotations_file: self
                    .io
                    .annotations_file
                    .unwrap_or_else(|| "annotations.json".into()),
                output_dir: self.io.output_dir,
                model_dir: self.io.model_dir,
                experiment_name: self.io.experiment_name,
            },
            preprocessing: PreprocessingConfig {
                confidence_threshold: self
                    .preprocessing
                    .confidence_threshold
                    .unwrap_or(DEFAULT_CONFIDENCE_THRESHOLD),
                crop_strategy: self.preprocessing.crop_strategy.unwrap_or(CropStrategy::Shift),
                target_dim: self.preprocessing.target_dim.unwrap_or(DEFAULT_TARGET_DIM),
                shift_fallback: self.preprocessing.shift_fallback.unwrap_or(ShiftFallback::Pad),
            },
            training: TrainingConfig {
                target_scheme: t.target_scheme,
                backbone: t.backbone.unwrap_or(Backbone::Resnet50),
                augmentation: t.augmentation.unwrap_or(AugmentationLevel::Medium),
                test_fraction: t.test_fraction.unwrap_or(DEFAULT_TEST_FRACTION),
                val_fraction: t.val_fraction.unwrap_or(DEFAULT_VAL_FRACTION),
                stratify_attribute: stratify,
                seed: t.seed.unwrap_or(DEFAULT_SEED),
                repeats: t.repeats.unwrap_or(1),
                pretrained: t.pretrained.unwrap_or(true),
                allow_random_fallback: t.allow_random_fallback.unwrap_or(false),
                momentum: t.momentum.unwrap_or(0.9),
                class_weighting: t.class_weighting.unwrap_or(ClassWeighting::None),
                transfer_stage: StageConfig {
                    epochs: t.transfer_stage.epochs.unwrap_or(10),
                    learning_rate: t.transfer_stage.learning_rate.unwrap_or(1e-3),
                    batch_size: t.transfer_stage.batch_size.unwrap_or(32),
                },
                finetune_stage: FinetuneConfig {
                    epochs: t.finetune_stage.epochs.unwrap_or(10),
                    learning_rate: t.finetune_stage.learning_rate.unwrap_or(1e-4),
                    batch_size: t.finetune_stage.batch_size.unwrap_or(32),
                    unfrozen_depth: t.finetune_stage.unfrozen_depth.unwrap_or(1),
                },
            },
            evaluation: EvaluationConfig {
                uncertainty_threshold: self
                    .evaluation
                    .uncertainty_threshold
                    .unwrap_or(DEFAULT_UNCERTAINTY_THRESHOLD),
                exclude_uncertain: self.evaluation.exclude_uncertain.unwrap_or(true),
                stratify_attribute: self.evaluation.stratify_attribute,
            },
        }
    }
}

fn invalid(path: &str, constraint: impl Into<String>) -> Error {
    Error::InvalidValue {
        path: path.to_string(),
        constraint: constraint.into(),
    }
}

fn open_unit(path: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(invalid(path, format!("must be in (0, 1), got {v}")))
    }
}

fn closed_unit(path: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(invalid(path, format!("must be in [0, 1], got {v}")))
    }
}

fn positive(path: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(path, format!("must be > 0, got {v}")))
    }
}

fn at_least(path: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(invalid(path, format!("must be >= {min}, got {v}")))
    }
}

impl ExperimentConfig {
    /// Parse TOML text, apply defaults and validate.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = text
            .parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| Error::ConfigParse(e.to_string()))?;
        let raw: raw::File = serde_path_to_error::deserialize(value).map_err(classify)?;
        let cfg = raw.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.preprocessing;
        closed_unit("preprocessing.confidence_threshold", p.confidence_threshold)?;
        if p.target_dim < MIN_TARGET_DIM {
            return Err(invalid(
                "preprocessing.target_dim",
                format!("must be >= {MIN_TARGET_DIM}, got {}", p.target_dim),
            ));
        }

        let t = &self.training;
        if t.target_scheme.is_empty() {
            return Err(invalid("training.target_scheme", "must be non-empty"));
        }
        if t.stratify_attribute.is_empty() {
            return Err(invalid("training.stratify_attribute", "must be non-empty"));
        }
        open_unit("training.test_fraction", t.test_fraction)?;
        open_unit("training.val_fraction", t.val_fraction)?;
        at_least("training.repeats", t.repeats, 1)?;
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(invalid(
                "training.momentum",
                format!("must be in [0, 1), got {}", t.momentum),
            ));
        }
        at_least("training.transfer_stage.epochs", t.transfer_stage.epochs, 1)?;
        at_least("training.transfer_stage.batch_size", t.transfer_stage.batch_size, 1)?;
        positive("training.transfer_stage.learning_rate", t.transfer_stage.learning_rate)?;
        at_least("training.finetune_stage.epochs", t.finetune_stage.epochs, 1)?;
        at_least("training.finetune_stage.batch_size", t.finetune_stage.batch_size, 1)?;
        positive("training.finetune_stage.learning_rate", t.finetune_stage.learning_rate)?;
        at_least("training.finetune_stage.unfrozen_depth", t.finetune_stage.unfrozen_depth, 1)?;

        closed_unit(
            "evaluation.uncertainty_threshold",
            self.evaluation.uncertainty_threshold,
        )?;
        Ok(())
    }

    /// Canonical TOML rendering of the resolved config.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_toml_string().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    /// Content hash over the resolved value with sorted keys.
    pub fn fingerprint(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes to JSON");
        let mut canon = String::new();
        write_canonical(&value, &mut canon);
        hex::encode(Sha256::digest(canon.as_bytes()))
    }

    /// Experiment directory name: `io.experiment_name` or
    /// `{target_scheme}-{fingerprint prefix}`.
    pub fn experiment_id(&self) -> String {
        match &self.io.experiment_name {
            Some(n) => n.clone(),
            None => format!("{}-{}", self.training.target_scheme, &self.fingerprint()[..12]),
        }
    }

    pub fn detections_path(&self) -> PathBuf {
        self.io.data_dir.join(&self.io.detections_file)
    }

    pub fn annotations_path(&self) -> PathBuf {
        self.io.data_dir.join(&self.io.annotations_file)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.io.output_dir.join("manifest.json")
    }

    pub fn split_path(&self) -> PathBuf {
        self.io.output_dir.join("split.json")
    }

    /// Resolve relative io paths against `base` (the config file's directory).
    pub fn rebase_paths(&mut self, base: &Path) {
        for p in [
            &mut self.io.data_dir,
            &mut self.io.output_dir,
            &mut self.io.model_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Read, parse and validate a config file. Relative io paths are resolved
/// against the file's directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::ConfigParse(format!("cannot read {}: {e}", path.display())))?;
    let text = String::from_utf8(bytes).map_err(|e| Error::ConfigParse(e.to_string()))?;
    let mut cfg = ExperimentConfig::from_toml_str(&text)?;
    if let Some(dir) = path.parent() {
        cfg.rebase_paths(dir);
    }
    Ok(cfg)
}

fn classify(err: serde_path_to_error::Error<toml::de::Error>) -> Error {
    let path = err.path().to_string();
    let message = err.inner().to_string();
    let join = |leaf: &str| {
        if path.is_empty() || path == "." {
            leaf.to_string()
        } else if path == leaf || path.ends_with(&format!(".{leaf}")) {
            path.clone()
        } else {
            format!("{path}.{leaf}")
        }
    };
    if message.contains("unknown field") {
        let field = message.split('`').nth(1).unwrap_or("?");
        Error::UnknownKey(join(field))
    } else if message.contains("missing field") {
        let field = message.split('`').nth(1).unwrap_or("?");
        Error::InvalidValue {
            path: join(field),
            constraint: "required key is missing".into(),
        }
    } else if message.contains("unknown variant") || message.contains("invalid type") {
        Error::InvalidValue {
            path,
            constraint: message.lines().next().unwrap_or_default().to_string(),
        }
    } else {
        Error::ConfigParse(format!("{path}: {message}"))
    }
}

fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}
