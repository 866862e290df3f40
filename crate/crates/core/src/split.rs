//! Stratified train/test partition and per-run train/validation partition.
//!
//! Within each stratum exactly `round(fraction * n_stratum)` entries are
//! held out. Exact `.5` ties are rounded up or down so that the global
//! held-out count lands on `round(fraction * n)` (largest remainder; tied
//! strata ordered by size, then name).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetManifest, ManifestEntry, Metadata, SplitTag};
use crate::detect::{derive_season, parse_capture_date};
use crate::error::{read_file, Error, Result};
use crate::fsutil;

const TIE_EPS: f64 = 1e-9;

/// Metadata keys tried, in order, when deriving `season` from capture time.
pub const TIMESTAMP_KEYS: [&str; 4] = ["timestamp", "datetime", "date", "capture_time"];

/// Value of `attribute` for one entry.
///
/// The target scheme name (or `label`) maps to the entry's label; other
/// names are looked up in metadata. `season` falls back to deriving the
/// season from a capture timestamp.
pub fn resolve_attribute(entry: &ManifestEntry, scheme_name: &str, attribute: &str) -> Option<String> {
    if attribute == scheme_name || attribute == "label" {
        return Some(entry.label.clone());
    }
    metadata_attribute(&entry.metadata, attribute)
}

/// Metadata value for `attribute`, deriving `season` from a capture
/// timestamp when no explicit value exists.
pub fn metadata_attribute(metadata: &Metadata, attribute: &str) -> Option<String> {
    if let Some(v) = metadata.get(attribute) {
        return Some(v.clone());
    }
    if attribute == "season" {
        return TIMESTAMP_KEYS
            .iter()
            .filter_map(|k| metadata.get(*k))
            .find_map(|v| parse_capture_date(v))
            .map(|d| derive_season(d).to_string());
    }
    None
}

/// Number of entries to hold out in each stratum, given stratum sizes.
pub fn held_out_counts(sizes: &BTreeMap<String, usize>, fraction: f64) -> BTreeMap<String, usize> {
    let total: usize = sizes.values().sum();
    let target = (fraction * total as f64).round() as usize;
    let mut counts = BTreeMap::new();
    let mut ties = Vec::new();
    let mut base = 0usize;
    for (key, &n) in sizes {
        let exact = fraction * n as f64;
        let floor = exact.floor();
        if (exact - floor - 0.5).abs() < TIE_EPS {
            ties.push((key.clone(), n));
            counts.insert(key.clone(), floor as usize);
            base += floor as usize;
        } else {
            let r = exact.round() as usize;
            counts.insert(key.clone(), r);
            base += r;
        }
    }
    let mut up = target.saturating_sub(base).min(ties.len());
    ties.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    for (key, _) in ties {
        if up == 0 {
            break;
        }
        *counts.get_mut(&key).unwrap() += 1;
        up -= 1;
    }
    counts
}

fn stratum_rng(seed: u64, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(s)
}

/// Split `entries` into (kept, held_out) bbox ids, stratified by the value
/// `key_of` returns. Output is a pure function of the entry set, the
/// stratum keys, `fraction` and `seed`.
fn split_by<'a, F>(
    entries: &[&'a ManifestEntry],
    fraction: f64,
    seed: u64,
    attribute: &str,
    key_of: F,
) -> Result<(Vec<String>, Vec<String>)>
where
    F: Fn(&ManifestEntry) -> Option<String>,
{
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidValue {
            path: "fraction".into(),
            constraint: format!("must be in (0, 1), got {fraction}"),
        });
    }
    let mut strata: BTreeMap<String, Vec<&'a ManifestEntry>> = BTreeMap::new();
    let mut missing = Vec::new();
    for e in entries {
        match key_of(e) {
            Some(k) => strata.entry(k).or_default().push(e),
            None => missing.push(e.bbox_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingAttribute {
            attribute: attribute.to_string(),
            bbox_ids: missing,
        });
    }
    let sizes: BTreeMap<String, usize> = strata.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    let counts = held_out_counts(&sizes, fraction);

    let mut kept = Vec::new();
    let mut held = Vec::new();
    for (key, mut members) in strata {
        if members.len() < 2 {
            log::warn!("stratum `{key}` of `{attribute}` has fewer than 2 entries");
        }
        members.sort_by(|a, b| a.bbox_id.cmp(&b.bbox_id));
        members.shuffle(&mut stratum_rng(seed, &key));
        let k = counts[&key];
        held.extend(members[..k].iter().map(|e| e.bbox_id.clone()));
        kept.extend(members[k..].iter().map(|e| e.bbox_id.clone()));
    }
    kept.sort();
    held.sort();
    Ok((kept, held))
}

/// Stratified two-way split of the whole manifest: returns (A, B) where B
/// holds `round(fraction * n)` entries of every stratum.
pub fn stratified_split(
    manifest: &DatasetManifest,
    fraction: f64,
    attribute: &str,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    let entries: Vec<&ManifestEntry> = manifest.entries.iter().collect();
    let scheme = manifest.scheme.name.clone();
    split_by(&entries, fraction, seed, attribute, |e| {
        resolve_attribute(e, &scheme, attribute)
    })
}

/// Split the training partition into (train, val), stratified on the
/// target class.
pub fn train_val_split(
    manifest: &DatasetManifest,
    train_ids: &[String],
    val_fraction: f64,
    run_seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    let wanted: BTreeSet<&str> = train_ids.iter().map(String::as_str).collect();
    let entries: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| wanted.contains(e.bbox_id.as_str()))
        .collect();
    if entries.len() != wanted.len() {
        return Err(Error::EmptySplit(
            "train ids not all present in manifest; train".into(),
        ));
    }
    split_by(&entries, val_fraction, run_seed, "label", |e| Some(e.label.clone()))
}

/// bbox id -> partition, plus how it was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub attribute: String,
    pub test_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_fraction: Option<f64>,
    pub assignments: BTreeMap<String, SplitTag>,
    /// Share of source images whose boxes ended up in more than one
    /// partition.
    pub images_straddling: f64,
}

impl SplitAssignment {
    pub fn ids(&self, tag: SplitTag) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, t)| **t == tag)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn count(&self, tag: SplitTag) -> usize {
        self.assignments.values().filter(|t| **t == tag).count()
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_slice(&read_file(path)?).map_err(|e| Error::MalformedFile {
            context: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_json(path, self).map_err(|e| Error::io(path, e))
    }
}

fn straddling(manifest: &DatasetManifest, assignments: &BTreeMap<String, SplitTag>) -> f64 {
    let mut per_image: BTreeMap<&str, BTreeSet<SplitTag>> = BTreeMap::new();
    for e in &manifest.entries {
        if let Some(t) = assignments.get(&e.bbox_id) {
            per_image.entry(&e.image_id).or_default().insert(*t);
        }
    }
    if per_image.is_empty() {
        return 0.0;
    }
    let n = per_image.values().filter(|s| s.len() > 1).count();
    n as f64 / per_image.len() as f64
}

/// Train/test assignment for the manifest; also writes the tags into the
/// manifest entries.
pub fn assign_test_split(
    manifest: &mut DatasetManifest,
    test_fraction: f64,
    attribute: &str,
    seed: u64,
) -> Result<SplitAssignment> {
    let (train, test) = stratified_split(manifest, test_fraction, attribute, seed)?;
    let mut assignments = BTreeMap::new();
    for id in train {
        assignments.insert(id, SplitTag::Train);
    }
    for id in test {
        assignments.insert(id, SplitTag::Test);
    }
    for e in &mut manifest.entries {
        e.split = assignments.get(&e.bbox_id).copied();
    }
    let images_straddling = straddling(manifest, &assignments);
    Ok(SplitAssignment {
        seed,
        attribute: attribute.to_string(),
        test_fraction,
        val_fraction: None,
        assignments,
        images_straddling,
    })
}

/// Per-run assignment: the fixed test partition plus a train/val split of
/// the remainder drawn with `run_seed`.
pub fn run_assignment(
    manifest: &DatasetManifest,
    base: &SplitAssignment,
    val_fraction: f64,
    run_seed: u64,
) -> Result<SplitAssignment> {
    let train_ids = base.ids(SplitTag::Train);
    if train_ids.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let (train, val) = train_val_split(manifest, &train_ids, val_fraction, run_seed)?;
    let mut assignments = base.assignments.clone();
    for id in train {
        assignments.insert(id, SplitTag::Train);
    }
    for id in val {
        assignments.insert(id, SplitTag::Val);
    }
    let images_straddling = straddling(manifest, &assignments);
    Ok(SplitAssignment {
        seed: run_seed,
        attribute: base.attribute.clone(),
        test_fraction: base.test_fraction,
        val_fraction: Some(val_fraction),
        assignments,
        images_straddling,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClassScheme, Provenance};

    pub(crate) fn manifest_with(classes: &[(&str, usize)]) -> DatasetManifest {
        let labels: Vec<&str> = classes.iter().map(|c| c.0).collect();
        let scheme = ClassScheme::new("target", &labels).unwrap();
        let mut entries = Vec::new();
        for (ci, (label, n)) in classes.iter().enumerate() {
            for i in 0..*n {
                let id = format!("{label}-{i:04}");
                entries.push(ManifestEntry {
                    bbox_id: id.clone(),
                    image_id: format!("img-{}", i / 2),
                    crop_path: format!("crops/{id}.png"),
                    label: label.to_string(),
                    class_index: ci,
                    confidence: 1.0,
                    split: None,
                    metadata: Default::default(),
                });
            }
        }
        DatasetManifest {
            scheme,
            entries,
            provenance: Provenance {
                config_fingerprint: "x".into(),
                detections_file: "d".into(),
                annotations_file: "a".into(),
            },
        }
    }

    fn count_label(m: &DatasetManifest, ids: &[String], label: &str) -> usize {
        m.entries
            .iter()
            .filter(|e| e.label == label && ids.contains(&e.bbox_id))
            .count()
    }

    #[test]
    fn sixty_forty() {
        let m = manifest_with(&[("a", 60), ("b", 40)]);
        let (train, test) = stratified_split(&m, 0.2, "target", 7).unwrap();
        assert_eq!(test.len(), 20);
        assert_eq!(train.len(), 80);
        assert_eq!(count_label(&m, &test, "a"), 12);
        assert_eq!(count_label(&m, &test, "b"), 8);
    }

    #[test]
    fn single_class_plain_split() {
        let m = manifest_with(&[("a", 50)]);
        let (train, test) = stratified_split(&m, 0.2, "target", 1).unwrap();
        assert_eq!((train.len(), test.len()), (40, 10));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let m = manifest_with(&[("a", 30), ("b", 25)]);
        let r1 = stratified_split(&m, 0.2, "target", 3).unwrap();
        let r2 = stratified_split(&m, 0.2, "target", 3).unwrap();
        assert_eq!(r1, r2);
        let mut shuffled = m.clone();
        shuffled.entries.reverse();
        assert_eq!(stratified_split(&shuffled, 0.2, "target", 3).unwrap(), r1);
    }

    #[test]
    fn train_val_170_30() {
        let m = manifest_with(&[("a", 120), ("b", 80)]);
        let ids: Vec<String> = m.entries.iter().map(|e| e.bbox_id.clone()).collect();
        let (train, val) = train_val_split(&m, &ids, 0.15, 42).unwrap();
        assert_eq!((train.len(), val.len()), (170, 30));
        assert_eq!(count_label(&m, &val, "a"), 18);
        assert_eq!(count_label(&m, &val, "b"), 12);

        // a different run seed gives a different validation set
        let (_, val2) = train_val_split(&m, &ids, 0.15, 43).unwrap();
        assert_ne!(val, val2);
    }

    #[test]
    fn ties_hit_global_target() {
        // 0.5 * 3 = 1.5 in each of three strata; global round(4.5) = 5
        let sizes: BTreeMap<String, usize> =
            [("a", 3), ("b", 3), ("c", 3)].map(|(k, n)| (k.to_string(), n)).into();
        let counts = held_out_counts(&sizes, 0.5);
        assert_eq!(counts.values().sum::<usize>(), 5);
        assert!(counts.values().all(|&c| c == 1 || c == 2));
    }

    #[test]
    fn missing_attribute_lists_ids() {
        let m = manifest_with(&[("a", 4)]);
        match stratified_split(&m, 0.5, "camera", 0) {
            Err(Error::MissingAttribute { attribute, bbox_ids }) => {
                assert_eq!(attribute, "camera");
                assert_eq!(bbox_ids.len(), 4);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn season_attribute_from_timestamp() {
        let mut m = manifest_with(&[("a", 10)]);
        for (i, e) in m.entries.iter_mut().enumerate() {
            let month = if i % 2 == 0 { 6 } else { 12 };
            e.metadata
                .insert("timestamp".into(), format!("2021-{month:02}-03 10:00:00"));
        }
        assert_eq!(resolve_attribute(&m.entries[0], "target", "season").unwrap(), "summer");
        assert_eq!(resolve_attribute(&m.entries[1], "target", "season").unwrap(), "winter");
        let (_, test) = stratified_split(&m, 0.2, "season", 0).unwrap();
        assert_eq!(test.len(), 2);
    }

    #[test]
    fn run_assignment_partitions_manifest() {
        let mut m = manifest_with(&[("a", 70), ("b", 30)]);
        let base = assign_test_split(&mut m, 0.2, "target", 5).unwrap();
        assert!(m.entries.iter().all(|e| e.split.is_some()));
        let run = run_assignment(&m, &base, 0.15, 6).unwrap();
        assert_eq!(run.assignments.len(), 100);
        assert_eq!(run.count(SplitTag::Test), 20);
        assert_eq!(run.count(SplitTag::Val), 12);
        assert_eq!(run.count(SplitTag::Train), 68);
        assert_eq!(run.ids(SplitTag::Test), base.ids(SplitTag::Test));
        assert!((0.0..=1.0).contains(&run.images_straddling));
    }
}
