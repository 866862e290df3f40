//! Weighted classification metrics, uncertainty exclusion, stratified
//! breakdowns, review logs and cross-run aggregation.
//!
//! Weighted scores average per-class scores by true-class frequency, so
//! weighted recall always equals accuracy. A per-class score whose
//! denominator is zero is defined as 0.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ClassScheme, Metadata};
use crate::error::{read_file, Error, Result};
use crate::fsutil;
use crate::split::metadata_attribute;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub bbox_id: String,
    #[serde(default)]
    pub crop_path: String,
    pub true_label: String,
    pub predicted_label: String,
    pub confidence: f64,
    /// `confidence >= uncertainty_threshold`.
    pub certain: bool,
    pub run_id: String,
    #[serde(default)]
    pub metadata: Metadata,
}

impl PredictionRecord {
    pub fn is_correct(&self) -> bool {
        self.true_label == self.predicted_label
    }
}

/// Set every record's `certain` flag and split into (certain, uncertain).
pub fn apply_uncertainty_threshold(
    records: &mut [PredictionRecord],
    ut: f64,
) -> (Vec<PredictionRecord>, Vec<PredictionRecord>) {
    let mut certain = Vec::new();
    let mut uncertain = Vec::new();
    for r in records.iter_mut() {
        r.certain = r.confidence >= ut;
        if r.certain {
            certain.push(r.clone());
        } else {
            uncertain.push(r.clone());
        }
    }
    (certain, uncertain)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True instances of this class.
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub labels: Vec<String>,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<u64>>,
    pub n_certain: usize,
    pub n_uncertain: usize,
    /// Mean confidence over certain records; 0 when there are none.
    pub mean_confidence: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion matrix over `scheme` for the given records.
pub fn confusion_matrix(records: &[PredictionRecord], scheme: &ClassScheme) -> Result<Vec<Vec<u64>>> {
    let g = scheme.num_classes();
    let mut m = vec![vec![0u64; g]; g];
    for r in records {
        let t = scheme
            .index_of(&r.true_label)
            .ok_or_else(|| Error::UnknownLabel(r.true_label.clone()))?;
        let p = scheme
            .index_of(&r.predicted_label)
            .ok_or_else(|| Error::UnknownLabel(r.predicted_label.clone()))?;
        m[t][p] += 1;
    }
    Ok(m)
}

/// Metrics for `records`, all of which count.
pub fn compute_metrics(records: &[PredictionRecord], scheme: &ClassScheme) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let confusion = confusion_matrix(records, scheme)?;
    let g = scheme.num_classes();
    let total: u64 = records.len() as u64;
    let trace: u64 = (0..g).map(|k| confusion[k][k]).sum();

    let mut per_class = Vec::with_capacity(g);
    let (mut wp, mut wf) = (0.0, 0.0);
    for k in 0..g {
        let tp = confusion[k][k];
        let support: u64 = confusion[k].iter().sum();
        let predicted: u64 = confusion.iter().map(|row| row[k]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let w = ratio(support, total);
        wp += w * precision;
        wf += w * f1;
        per_class.push(ClassMetrics {
            label: scheme.labels[k].clone(),
            precision,
            recall,
            f1,
            support,
        });
    }

    let certain: Vec<f64> = records.iter().filter(|r| r.certain).map(|r| r.confidence).collect();
    let mean_confidence = if certain.is_empty() {
        0.0
    } else {
        certain.iter().sum::<f64>() / certain.len() as f64
    };
    let accuracy = ratio(trace, total);
    Ok(MetricsReport {
        accuracy,
        precision: wp,
        // sum_k (n_k / n) * (tp_k / n_k) is trace / n; taking it from the
        // trace keeps the two bit-identical instead of equal up to rounding.
        recall: accuracy,
        f1: wf,
        per_class,
        labels: scheme.labels.clone(),
        confusion,
        n_certain: certain.len(),
        n_uncertain: records.len() - certain.len(),
        mean_confidence,
    })
}

/// Threshold, then compute metrics over the certain records (or over all
/// records when `exclude_uncertain` is false). Counts cover every record.
pub fn evaluate_records(
    records: &mut [PredictionRecord],
    scheme: &ClassScheme,
    ut: f64,
    exclude_uncertain: bool,
) -> Result<MetricsReport> {
    let (certain, uncertain) = apply_uncertainty_threshold(records, ut);
    let mut report = if exclude_uncertain {
        compute_metrics(&certain, scheme)?
    } else {
        compute_metrics(records, scheme)?
    };
    report.n_certain = certain.len();
    report.n_uncertain = uncertain.len();
    Ok(report)
}

/// One report per value of `attribute`. The attribute is read from each
/// record's metadata (`season` may be derived from a timestamp); `label`
/// stratifies by true label.
pub fn stratified_metrics(
    records: &[PredictionRecord],
    attribute: &str,
    scheme: &ClassScheme,
) -> Result<BTreeMap<String, MetricsReport>> {
    let mut strata: BTreeMap<String, Vec<PredictionRecord>> = BTreeMap::new();
    let mut missing = Vec::new();
    for r in records {
        let value = if attribute == "label" || attribute == scheme.name {
            Some(r.true_label.clone())
        } else {
            metadata_attribute(&r.metadata, attribute)
        };
        match value {
            Some(v) => strata.entry(v).or_default().push(r.clone()),
            None => missing.push(r.bbox_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingAttribute {
            attribute: attribute.to_string(),
            bbox_ids: missing,
        });
    }
    strata
        .into_iter()
        .map(|(k, rs)| compute_metrics(&rs, scheme).map(|m| (k, m)))
        .collect()
}

/// (error log, uncertainty log): certain-but-wrong records, and every
/// uncertain record.
pub fn record_review_sets(records: &[PredictionRecord]) -> (Vec<PredictionRecord>, Vec<PredictionRecord>) {
    let errors = records.iter().filter(|r| r.certain && !r.is_correct()).cloned().collect();
    let uncertain = records.iter().filter(|r| !r.certain).cloned().collect();
    (errors, uncertain)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub seed: u64,
    pub config_fingerprint: String,
    pub uncertainty_threshold: f64,
    pub exclude_uncertain: bool,
    pub metrics: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stratify_attribute: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub stratified: BTreeMap<String, MetricsReport>,
}

impl RunResult {
    pub fn load(path: &Path) -> Result<Self> {
        load_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_json(path, self).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read_file(path)?).map_err(|e| Error::MalformedFile {
        context: path.display().to_string(),
        message: e.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentAggregate {
    pub config_fingerprint: String,
    pub iterations: usize,
    pub run_ids: Vec<String>,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mean_n_certain: f64,
    pub mean_n_excluded: f64,
    pub mean_confidence: f64,
    pub labels: Vec<String>,
    /// Entrywise sum of the per-run confusion matrices.
    pub confusion: Vec<Vec<u64>>,
}

impl ExperimentAggregate {
    pub fn load(path: &Path) -> Result<Self> {
        load_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_json(path, self).map_err(|e| Error::io(path, e))
    }
}

/// Unweighted mean of each scalar over runs, plus the pooled confusion
/// matrix.
pub fn aggregate_runs(results: &[RunResult]) -> Result<ExperimentAggregate> {
    let first = results.first().ok_or(Error::EmptyEvaluation)?;
    for r in &results[1..] {
        if r.config_fingerprint != first.config_fingerprint {
            return Err(Error::MixedConfig(
                first.config_fingerprint.clone(),
                r.config_fingerprint.clone(),
            ));
        }
        if r.metrics.labels != first.metrics.labels {
            return Err(Error::MixedConfig(
                format!("labels {:?}", first.metrics.labels),
                format!("labels {:?}", r.metrics.labels),
            ));
        }
    }
    let n = results.len() as f64;
    let mean = |f: fn(&RunResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    let g = first.metrics.labels.len();
    let mut confusion = vec![vec![0u64; g]; g];
    for r in results {
        for (row, rrow) in confusion.iter_mut().zip(&r.metrics.confusion) {
            for (c, v) in row.iter_mut().zip(rrow) {
                *c += v;
            }
        }
    }
    Ok(ExperimentAggregate {
        config_fingerprint: first.config_fingerprint.clone(),
        iterations: results.len(),
        run_ids: results.iter().map(|r| r.run_id.clone()).collect(),
        accuracy: mean(|r| r.metrics.accuracy),
        precision: mean(|r| r.metrics.precision),
        recall: mean(|r| r.metrics.recall),
        f1: mean(|r| r.metrics.f1),
        mean_n_certain: mean(|r| r.metrics.n_certain as f64),
        mean_n_excluded: mean(|r| r.metrics.n_uncertain as f64),
        mean_confidence: mean(|r| r.metrics.mean_confidence),
        labels: first.metrics.labels.clone(),
        confusion,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjustedCounts {
    pub counts: BTreeMap<String, u64>,
    /// Percent of the adjusted total, per label.
    pub percentages: BTreeMap<String, f64>,
    pub removed: u64,
}

/// Remove the poor-quality share of the `unknown_label` segment:
/// `counts[unknown] -= round(fraction * counts[unknown])`.
pub fn unknown_quality_adjustment(
    class_counts: &BTreeMap<String, u64>,
    unknown_label: &str,
    poor_quality_fraction: f64,
) -> Result<AdjustedCounts> {
    if !(0.0..=1.0).contains(&poor_quality_fraction) {
        return Err(Error::InvalidValue {
            path: "poor_quality_fraction".into(),
            constraint: format!("must be in [0, 1], got {poor_quality_fraction}"),
        });
    }
    let unknown = *class_counts
        .get(unknown_label)
        .ok_or_else(|| Error::UnknownLabel(unknown_label.to_string()))?;
    let removed = (poor_quality_fraction * unknown as f64).round() as u64;
    let mut counts = class_counts.clone();
    counts.insert(unknown_label.to_string(), unknown - removed);
    Ok(AdjustedCounts {
        percentages: percentages(&counts),
        counts,
        removed,
    })
}

pub fn percentages(counts: &BTreeMap<String, u64>) -> BTreeMap<String, f64> {
    let total: u64 = counts.values().sum();
    counts
        .iter()
        .map(|(k, &v)| (k.clone(), 100.0 * ratio(v, total)))
        .collect()
}
