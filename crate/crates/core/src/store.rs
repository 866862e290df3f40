//! On-disk experiment store.
//!
//! ```text
//! {root}/{experiment_id}/
//!     config.toml
//!     experiment.json
//!     aggregate.json
//!     runs/{run_id}/
//!         train_record.json  split.json  best.ckpt
//!         result.json  errors.json  uncertain.json
//! ```
//!
//! Every write goes through a temp file and a rename, and readers skip
//! temp files, so a crashed write never shows up as a half-written run.
//! Everything is recoverable from the tree; there is no index file.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{load_json, ExperimentAggregate, PredictionRecord, RunResult};
use crate::fsutil;
use crate::train::TrainRecord;

pub const CONFIG_FILE: &str = "config.toml";
pub const EXPERIMENT_FILE: &str = "experiment.json";
pub const AGGREGATE_FILE: &str = "aggregate.json";
pub const RUNS_DIR: &str = "runs";
pub const TRAIN_RECORD_FILE: &str = "train_record.json";
pub const RESULT_FILE: &str = "result.json";
pub const ERRORS_FILE: &str = "errors.json";
pub const UNCERTAIN_FILE: &str = "uncertain.json";
pub const SPLIT_FILE: &str = "split.json";
pub const CHECKPOINT_FILE: &str = "best.ckpt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentStatus {
    Preprocessed,
    Trained,
    Evaluated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub experiment_id: String,
    pub config_fingerprint: String,
    pub target_scheme: String,
    pub backbone: String,
    pub created_at: DateTime<Utc>,
    pub status: ExperimentStatus,
    /// Filled from the `runs/` directory on load.
    #[serde(default)]
    pub run_ids: Vec<String>,
}

/// A listed experiment with its aggregate, when one exists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    #[serde(flatten)]
    pub record: ExperimentRecord,
    pub aggregate: Option<ExperimentAggregate>,
}

#[derive(Clone, Debug)]
pub struct ExperimentStore {
    pub root: PathBuf,
}

fn write<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    fsutil::write_json(path, value).map_err(|e| Error::io(path, e))
}

impl ExperimentStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ExperimentStore { root: root.into() }
    }

    pub fn experiment_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn run_dir(&self, id: &str, run_id: &str) -> PathBuf {
        self.experiment_dir(id).join(RUNS_DIR).join(run_id)
    }

    pub fn checkpoint_path(&self, id: &str, run_id: &str) -> PathBuf {
        self.run_dir(id, run_id).join(CHECKPOINT_FILE)
    }

    /// Open the experiment for `config`, creating it if needed. An existing
    /// directory with a different config fingerprint is refused.
    pub fn open_or_create(&self, config: &ExperimentConfig) -> Result<ExperimentRecord> {
        let id = config.experiment_id();
        match self.load_experiment(&id) {
            Ok(rec) if rec.config_fingerprint == config.fingerprint() => Ok(rec),
            Ok(rec) => Err(Error::MixedConfig(rec.config_fingerprint, config.fingerprint())),
            Err(Error::ExperimentNotFound(_)) => {
                let dir = self.experiment_dir(&id);
                std::fs::create_dir_all(dir.join(RUNS_DIR)).map_err(|e| Error::io(&dir, e))?;
                config.save(&dir.join(CONFIG_FILE))?;
                let rec = ExperimentRecord {
                    experiment_id: id,
                    config_fingerprint: config.fingerprint(),
                    target_scheme: config.training.target_scheme.clone(),
                    backbone: config.training.backbone.to_string(),
                    created_at: Utc::now(),
                    status: ExperimentStatus::Preprocessed,
                    run_ids: Vec::new(),
                };
                write(&dir.join(EXPERIMENT_FILE), &rec)?;
                Ok(rec)
            }
            Err(e) => Err(e),
        }
    }

    pub fn load_experiment(&self, id: &str) -> Result<ExperimentRecord> {
        let path = self.experiment_dir(id).join(EXPERIMENT_FILE);
        if !path.is_file() {
            return Err(Error::ExperimentNotFound(id.to_string()));
        }
        let mut rec: ExperimentRecord = load_json(&path)?;
        rec.run_ids = self.list_runs(id)?;
        Ok(rec)
    }

    pub fn load_config(&self, id: &str) -> Result<ExperimentConfig> {
        let path = self.experiment_dir(id).join(CONFIG_FILE);
        if !path.is_file() {
            return Err(Error::ExperimentNotFound(id.to_string()));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        ExperimentConfig::from_toml_str(&text)
    }

    pub fn set_status(&self, id: &str, status: ExperimentStatus) -> Result<()> {
        let mut rec = self.load_experiment(id)?;
        rec.status = status;
        rec.run_ids.clear();
        write(&self.experiment_dir(id).join(EXPERIMENT_FILE), &rec)
    }

    /// Run ids with a completed train record, sorted.
    pub fn list_runs(&self, id: &str) -> Result<Vec<String>> {
        let dir = self.experiment_dir(id).join(RUNS_DIR);
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut runs = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if fsutil::is_temp_name(&name) || !entry.path().join(TRAIN_RECORD_FILE).is_file() {
                continue;
            }
            runs.push(name);
        }
        runs.sort();
        Ok(runs)
    }

    /// Store a run's train record. An existing run is refused unless
    /// `overwrite` is set.
    pub fn save_train_record(&self, id: &str, record: &TrainRecord, overwrite: bool) -> Result<()> {
        let dir = self.run_dir(id, &record.run_id);
        let path = dir.join(TRAIN_RECORD_FILE);
        if path.exists() && !overwrite {
            return Err(Error::DuplicateRunId(record.run_id.clone()));
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write(&path, record)
    }

    /// Store evaluation output for a run. Re-evaluation replaces it.
    pub fn save_result(
        &self,
        id: &str,
        result: &RunResult,
        errors: &[PredictionRecord],
        uncertain: &[PredictionRecord],
    ) -> Result<()> {
        let dir = self.run_dir(id, &result.run_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write(&dir.join(ERRORS_FILE), errors)?;
        write(&dir.join(UNCERTAIN_FILE), uncertain)?;
        write(&dir.join(RESULT_FILE), result)
    }

    /// Train record and result together; refuses a run id that exists.
    pub fn save_run(&self, id: &str, record: &TrainRecord, result: &RunResult) -> Result<()> {
        self.save_train_record(id, record, false)?;
        self.save_result(id, result, &[], &[])
    }

    pub fn load_train_record(&self, id: &str, run_id: &str) -> Result<TrainRecord> {
        load_json(&self.run_dir(id, run_id).join(TRAIN_RECORD_FILE))
    }

    pub fn load_result(&self, id: &str, run_id: &str) -> Result<RunResult> {
        RunResult::load(&self.run_dir(id, run_id).join(RESULT_FILE))
    }

    pub fn load_errors(&self, id: &str, run_id: &str) -> Result<Vec<PredictionRecord>> {
        load_json(&self.run_dir(id, run_id).join(ERRORS_FILE))
    }

    pub fn load_uncertain(&self, id: &str, run_id: &str) -> Result<Vec<PredictionRecord>> {
        load_json(&self.run_dir(id, run_id).join(UNCERTAIN_FILE))
    }

    /// Results of every evaluated run, in run order.
    pub fn load_results(&self, id: &str) -> Result<Vec<RunResult>> {
        let mut out = Vec::new();
        for run in self.list_runs(id)? {
            if self.run_dir(id, &run).join(RESULT_FILE).is_file() {
                out.push(self.load_result(id, &run)?);
            }
        }
        Ok(out)
    }

    pub fn save_aggregate(&self, id: &str, aggregate: &ExperimentAggregate) -> Result<()> {
        aggregate.save(&self.experiment_dir(id).join(AGGREGATE_FILE))
    }

    pub fn load_aggregate(&self, id: &str) -> Result<Option<ExperimentAggregate>> {
        let path = self.experiment_dir(id).join(AGGREGATE_FILE);
        if !path.is_file() {
            return Ok(None);
        }
        ExperimentAggregate::load(&path).map(Some)
    }

    /// Experiments sorted by creation time, optionally only those
    /// predicting `scheme`.
    pub fn list_experiments(&self, scheme: Option<&str>) -> Result<Vec<ExperimentSummary>> {
        if !self.root.is_dir() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))? {
            let entry = entry.map_err(|e| Error::io(&self.root, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if fsutil::is_temp_name(&name) || !entry.path().join(EXPERIMENT_FILE).is_file() {
                continue;
            }
            let record = self.load_experiment(&name)?;
            if scheme.is_some_and(|s| s != record.target_scheme) {
                continue;
            }
            let aggregate = self.load_aggregate(&name)?;
            out.push(ExperimentSummary { record, aggregate });
        }
        out.sort_by(|a, b| {
            (a.record.created_at, &a.record.experiment_id).cmp(&(b.record.created_at, &b.record.experiment_id))
        });
        Ok(out)
    }
}
