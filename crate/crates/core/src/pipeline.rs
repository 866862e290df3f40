//! Stage orchestration shared by the CLI, the examples and the demo.
//!
//! Each stage reads what earlier stages wrote under the configured
//! directories, so stages can be rerun individually.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::{AnnotationSet, DatasetManifest, SplitTag};
use crate::detect::{self, DetectorAdapter, EnrichReport, JoinKey, MetadataTable};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_runs, evaluate_records, record_review_sets, stratified_metrics, ExperimentAggregate,
    PredictionRecord, RunResult,
};
use crate::preprocess::{self, PreprocessOutput};
use crate::split::{self, SplitAssignment};
use crate::store::{ExperimentStatus, ExperimentStore, ExperimentSummary, SPLIT_FILE};
use crate::train::{self, model::DirWeights, ClassifierModel, RunInputs, TrainRecord};

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingStageOutput {
            path: path.to_path_buf(),
            stage: stage.to_string(),
        })
    }
}

fn refuse_existing(path: &Path, overwrite: bool) -> Result<()> {
    if !overwrite && path.exists() {
        return Err(Error::OutputExists(path.to_path_buf()));
    }
    Ok(())
}

pub fn store_for(config: &ExperimentConfig) -> ExperimentStore {
    ExperimentStore::new(&config.io.model_dir)
}

/// Run the detector over `io.data_dir` and write the detections file.
pub fn detect_stage(
    config: &ExperimentConfig,
    adapter: &dyn DetectorAdapter,
    min_write_confidence: f64,
    overwrite: bool,
) -> Result<detect::DetectionReport> {
    let out = config.detections_path();
    refuse_existing(&out, overwrite)?;
    Ok(detect::run_detection(&config.io.data_dir, adapter, min_write_confidence, &out)?.report)
}

/// Merge a CSV/TSV metadata table into the annotations file.
pub fn enrich_stage(config: &ExperimentConfig, table_path: &Path, join: JoinKey) -> Result<EnrichReport> {
    let det_path = config.detections_path();
    require(&det_path, "detect")?;
    let detections = crate::data::load_detections(&det_path)?;
    let table = MetadataTable::from_path(table_path, join)?;
    let ann_path = config.annotations_path();
    let mut annotations = AnnotationSet::load_or_default(&ann_path)?;
    let report = detect::enrich(&detections, &table, join, &mut annotations);
    annotations.save(&ann_path)?;
    Ok(report)
}

pub fn preprocess_stage(config: &ExperimentConfig, overwrite: bool) -> Result<PreprocessOutput> {
    require(&config.detections_path(), "detect")?;
    refuse_existing(&config.manifest_path(), overwrite)?;
    let out = preprocess::run_preprocess(config)?;
    store_for(config).open_or_create(config)?;
    Ok(out)
}

/// Stratified train/test split; tags the manifest and writes `split.json`.
pub fn split_stage(config: &ExperimentConfig, overwrite: bool) -> Result<SplitAssignment> {
    let mpath = config.manifest_path();
    require(&mpath, "preprocess")?;
    refuse_existing(&config.split_path(), overwrite)?;
    let mut manifest = DatasetManifest::load(&mpath)?;
    let t = &config.training;
    let assignment = split::assign_test_split(&mut manifest, t.test_fraction, &t.stratify_attribute, t.seed)?;
    manifest.save(&mpath)?;
    assignment.save(&config.split_path())?;
    Ok(assignment)
}

fn manifest_and_split(config: &ExperimentConfig) -> Result<(DatasetManifest, SplitAssignment)> {
    require(&config.manifest_path(), "preprocess")?;
    require(&config.split_path(), "split")?;
    Ok((
        DatasetManifest::load(&config.manifest_path())?,
        SplitAssignment::load(&config.split_path())?,
    ))
}

fn manifest_dir(config: &ExperimentConfig) -> PathBuf {
    config
        .manifest_path()
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default()
}

/// Train `training.repeats` runs with seeds `seed, seed + 1, ...`.
pub fn train_stage(config: &ExperimentConfig, overwrite: bool) -> Result<Vec<TrainRecord>> {
    let (manifest, base) = manifest_and_split(config)?;
    let store = store_for(config);
    let exp = store.open_or_create(config)?;
    let provider = DirWeights {
        dir: config.io.model_dir.join("pretrained"),
    };
    let mdir = manifest_dir(config);
    let mut records = Vec::new();
    for i in 0..config.training.repeats {
        let run_id = train::run_id(i);
        let run_dir = store.run_dir(&exp.experiment_id, &run_id);
        if !overwrite && run_dir.join(crate::store::TRAIN_RECORD_FILE).exists() {
            return Err(Error::DuplicateRunId(run_id));
        }
        let seed = train::run_seed(config, i);
        let split = split::run_assignment(&manifest, &base, config.training.val_fraction, seed)?;
        std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        split.save(&run_dir.join(SPLIT_FILE))?;
        log::info!(
            "{run_id}: seed {seed}, {} train / {} val / {} test",
            split.count(SplitTag::Train),
            split.count(SplitTag::Val),
            split.count(SplitTag::Test)
        );
        let ckpt = store.checkpoint_path(&exp.experiment_id, &run_id);
        let (record, _) = train::train_run(
            config,
            RunInputs {
                manifest: &manifest,
                manifest_dir: &mdir,
                split: &split,
                run_index: i,
                provider: Some(&provider),
                checkpoint_path: &ckpt,
            },
        )?;
        store.save_train_record(&exp.experiment_id, &record, true)?;
        records.push(record);
    }
    store.set_status(&exp.experiment_id, ExperimentStatus::Trained)?;
    Ok(records)
}

/// Predict the test partition with one checkpoint.
pub fn predict_test_set(
    config: &ExperimentConfig,
    manifest: &DatasetManifest,
    split: &SplitAssignment,
    model: &ClassifierModel,
    run_id: &str,
) -> Result<Vec<PredictionRecord>> {
    let mdir = manifest_dir(config);
    let samples = train::load_samples(manifest, &mdir, split, SplitTag::Test, config.preprocessing.target_dim)?;
    if samples.is_empty() {
        return Err(Error::EmptySplit("test".into()));
    }
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let preds = train::predict_all(model, &images)?;
    let by_id: std::collections::BTreeMap<_, _> = manifest.entries.iter().map(|e| (e.bbox_id.as_str(), e)).collect();
    Ok(samples
        .iter()
        .zip(preds)
        .map(|(s, p)| {
            let e = by_id[s.bbox_id.as_str()];
            PredictionRecord {
                bbox_id: s.bbox_id.clone(),
                crop_path: mdir.join(&e.crop_path).to_string_lossy().into_owned(),
                true_label: e.label.clone(),
                predicted_label: manifest.scheme.labels[p.class_index].clone(),
                confidence: p.confidence,
                certain: true,
                run_id: run_id.to_string(),
                metadata: e.metadata.clone(),
            }
        })
        .collect())
}

/// Evaluate every trained run on the test partition and write results plus
/// the experiment aggregate. `ut_override` replaces the configured
/// uncertainty threshold.
pub fn evaluate_stage(config: &ExperimentConfig, ut_override: Option<f64>) -> Result<ExperimentAggregate> {
    let ut = ut_override.unwrap_or(config.evaluation.uncertainty_threshold);
    if !(0.0..=1.0).contains(&ut) {
        return Err(Error::InvalidValue {
            path: "evaluation.uncertainty_threshold".into(),
            constraint: format!("must be in [0, 1], got {ut}"),
        });
    }
    let (manifest, base) = manifest_and_split(config)?;
    let store = store_for(config);
    let id = config.experiment_id();
    let exp = store.load_experiment(&id)?;
    if exp.run_ids.is_empty() {
        return Err(Error::MissingStageOutput {
            path: store.experiment_dir(&id).join(crate::store::RUNS_DIR),
            stage: "train".into(),
        });
    }
    let exclude = config.evaluation.exclude_uncertain;
    let mut results = Vec::new();
    for run_id in &exp.run_ids {
        let record = store.load_train_record(&id, run_id)?;
        let model = ClassifierModel::load(&store.checkpoint_path(&id, run_id))?;
        let mut preds = predict_test_set(config, &manifest, &base, &model, run_id)?;
        let metrics = evaluate_records(&mut preds, &manifest.scheme, ut, exclude)?;
        let attr = config.evaluation.stratify_attribute.clone();
        let stratified = match &attr {
            Some(a) => {
                let used: Vec<_> = preds.iter().filter(|r| r.certain || !exclude).cloned().collect();
                stratified_metrics(&used, a, &manifest.scheme)?
            }
            None => Default::default(),
        };
        let (errors, uncertain) = record_review_sets(&preds);
        let result = RunResult {
            run_id: run_id.clone(),
            seed: record.seed,
            config_fingerprint: record.config_fingerprint.clone(),
            uncertainty_threshold: ut,
            exclude_uncertain: exclude,
            metrics,
            stratify_attribute: attr,
            stratified,
        };
        log::info!(
            "{run_id}: accuracy {:.4}, {} certain / {} uncertain",
            result.metrics.accuracy,
            result.metrics.n_certain,
            result.metrics.n_uncertain
        );
        store.save_result(&id, &result, &errors, &uncertain)?;
        results.push(result);
    }
    let aggregate = aggregate_runs(&results)?;
    store.save_aggregate(&id, &aggregate)?;
    store.set_status(&id, ExperimentStatus::Evaluated)?;
    Ok(aggregate)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub experiment_id: String,
    pub target_scheme: String,
    pub backbone: String,
    pub status: ExperimentStatus,
    pub iterations: usize,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub mean_n_certain: Option<f64>,
    pub mean_n_excluded: Option<f64>,
    pub mean_confidence: Option<f64>,
}

impl From<&ExperimentSummary> for ComparisonRow {
    fn from(s: &ExperimentSummary) -> Self {
        let a = s.aggregate.as_ref();
        ComparisonRow {
            experiment_id: s.record.experiment_id.clone(),
            target_scheme: s.record.target_scheme.clone(),
            backbone: s.record.backbone.clone(),
            status: s.record.status,
            iterations: a.map_or(0, |a| a.iterations),
            accuracy: a.map(|a| a.accuracy),
            precision: a.map(|a| a.precision),
            recall: a.map(|a| a.recall),
            f1: a.map(|a| a.f1),
            mean_n_certain: a.map(|a| a.mean_n_certain),
            mean_n_excluded: a.map(|a| a.mean_n_excluded),
            mean_confidence: a.map(|a| a.mean_confidence),
        }
    }
}

pub fn compare(store: &ExperimentStore, scheme: Option<&str>) -> Result<Vec<ComparisonRow>> {
    Ok(store.list_experiments(scheme)?.iter().map(ComparisonRow::from).collect())
}

/// Fixed-width text table of comparison rows.
pub fn format_comparison(rows: &[ComparisonRow]) -> String {
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}%", 100.0 * v));
    let num = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}"));
    let mut table = vec![[
        "experiment".to_string(),
        "scheme".into(),
        "backbone".into(),
        "runs".into(),
        "accuracy".into(),
        "precision".into(),
        "recall".into(),
        "f1".into(),
        "certain".into(),
        "excluded".into(),
        "confidence".into(),
    ]];
    for r in rows {
        table.push([
            r.experiment_id.clone(),
            r.target_scheme.clone(),
            r.backbone.clone(),
            r.iterations.to_string(),
            pct(r.accuracy),
            pct(r.precision),
            pct(r.recall),
            pct(r.f1),
            num(r.mean_n_certain),
            num(r.mean_n_excluded),
            r.mean_confidence.map_or("-".to_string(), |v| format!("{v:.3}")),
        ]);
    }
    let widths: Vec<usize> = (0..11).map(|c| table.iter().map(|row| row[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &table {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (cell, w))| if i < 3 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Preprocess, split, train and evaluate in one go.
pub fn run_all(config: &ExperimentConfig, overwrite: bool) -> Result<ExperimentAggregate> {
    preprocess_stage(config, overwrite)?;
    split_stage(config, overwrite)?;
    train_stage(config, overwrite)?;
    evaluate_stage(config, None)
}
