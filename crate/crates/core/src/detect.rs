//! Detection ingest: run a pluggable detector over an image folder, write
//! the unified detections file, and enrich detections with external
//! metadata (camera location, capture time, season, ...).

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::Command;

use chrono::{Datelike, NaiveDate, NaiveDateTime};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Map;
use sha2::{Digest, Sha256};

use crate::data::{self, AnnotationSet, BBox, BoxConvention, Detection, Metadata};
use crate::error::{Error, Result};
use crate::fsutil;

pub const DEFAULT_MIN_WRITE_CONFIDENCE: f64 = 0.1;

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

/// One box as returned by a detector, already in relative xywh.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawBox {
    pub category: i64,
    pub bbox: BBox,
    pub confidence: f64,
}

/// Anything that turns an image into boxes.
pub trait DetectorAdapter: Send + Sync {
    fn name(&self) -> &str;
    fn version(&self) -> &str;
    fn detect(&self, image_path: &Path, image_dims: (u32, u32)) -> Result<Vec<RawBox>>;
}

/// Deterministic detector for tests and demos.
///
/// `Hashed` derives one box per image from a hash of the file bytes.
/// `Scripted` returns fixed boxes keyed by the image path relative to the
/// scanned directory; unknown images get no boxes.
#[derive(Clone, Debug)]
pub enum StubDetector {
    Hashed,
    Scripted(BTreeMap<String, Vec<RawBox>>),
}

impl StubDetector {
    pub fn scripted(boxes: BTreeMap<String, Vec<RawBox>>) -> Self {
        StubDetector::Scripted(boxes)
    }

    fn hashed_box(bytes: &[u8]) -> RawBox {
        let h = Sha256::digest(bytes);
        let unit = |i: usize| f64::from(u16::from_le_bytes([h[i], h[i + 1]])) / 65535.0;
        let width = 0.1 + 0.4 * unit(0);
        let height = 0.1 + 0.4 * unit(2);
        let x_min = (1.0 - width) * unit(4);
        let y_min = (1.0 - height) * unit(6);
        RawBox {
            category: data::ANIMAL_CATEGORY,
            bbox: BBox::new(x_min, y_min, width, height),
            confidence: 0.5 + 0.5 * unit(8),
        }
    }
}

impl DetectorAdapter for StubDetector {
    fn name(&self) -> &str {
        "stub"
    }

    fn version(&self) -> &str {
        match self {
            StubDetector::Hashed => "hashed-1",
            StubDetector::Scripted(_) => "scripted-1",
        }
    }

    fn detect(&self, image_path: &Path, _dims: (u32, u32)) -> Result<Vec<RawBox>> {
        match self {
            StubDetector::Hashed => {
                let bytes = crate::error::read_file(image_path)?;
                Ok(vec![Self::hashed_box(&bytes)])
            }
            StubDetector::Scripted(map) => {
                let name = image_path.file_name().and_then(|n| n.to_str()).unwrap_or("");
                let by_path = map.iter().find(|(k, _)| image_path.ends_with(k.as_str()));
                Ok(by_path
                    .map(|(_, v)| v.clone())
                    .or_else(|| map.get(name).cloned())
                    .unwrap_or_default())
            }
        }
    }
}

/// Runs an external detector process once per image.
///
/// The command is invoked as `program args... <image path>` and must print
/// a JSON list of `{"category", "bbox", "confidence"}` records. Boxes are
/// normalized from `convention`; categories are remapped through
/// `category_map` (e.g. `1 -> 0` for detectors that number "animal" as 1).
#[derive(Clone, Debug)]
pub struct ExternalDetector {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub convention: BoxConvention,
    pub category_map: BTreeMap<i64, i64>,
    pub version: String,
}

#[derive(Deserialize)]
struct ExternalBox {
    category: i64,
    bbox: [f64; 4],
    confidence: f64,
}

impl DetectorAdapter for ExternalDetector {
    fn name(&self) -> &str {
        self.program.to_str().unwrap_or("external")
    }

    fn version(&self) -> &str {
        &self.version
    }

    fn detect(&self, image_path: &Path, dims: (u32, u32)) -> Result<Vec<RawBox>> {
        let fail = |message: String| Error::Detector {
            image: image_path.to_path_buf(),
            message,
        };
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(image_path)
            .output()
            .map_err(|e| fail(format!("spawn {}: {e}", self.program.display())))?;
        if !out.status.success() {
            return Err(fail(format!(
                "exit {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let parsed: Vec<ExternalBox> =
            serde_json::from_slice(&out.stdout).map_err(|e| fail(format!("bad output: {e}")))?;
        parsed
            .into_iter()
            .map(|b| {
                Ok(RawBox {
                    category: *self.category_map.get(&b.category).unwrap_or(&b.category),
                    bbox: data::normalize_bbox(b.bbox, self.convention, dims)?,
                    confidence: b.confidence.clamp(0.0, 1.0),
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub image_path: String,
    pub reason: String,
}

/// Sidecar report written next to the detections file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub detector: String,
    pub detector_version: String,
    pub min_write_confidence: f64,
    pub images_scanned: usize,
    pub detections_written: usize,
    pub boxes_below_min_confidence: usize,
    /// Unreadable images, skipped with a warning.
    pub skipped: Vec<SkippedImage>,
    /// Readable images for which no box was written.
    pub without_detections: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct DetectionRun {
    pub detections: Vec<Detection>,
    pub report: DetectionReport,
}

fn list_images(image_dir: &Path) -> Result<Vec<String>> {
    let mut rel = Vec::new();
    for entry in walkdir::WalkDir::new(image_dir).follow_links(true) {
        let entry = entry.map_err(|e| {
            Error::io(
                image_dir,
                e.into_io_error()
                    .unwrap_or_else(|| std::io::Error::other("walk failed")),
            )
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let ext = entry
            .path()
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let r = entry.path().strip_prefix(image_dir).unwrap_or(entry.path());
        rel.push(r.to_string_lossy().replace('\\', "/"));
    }
    rel.sort();
    Ok(rel)
}

fn image_id_for(rel_path: &str) -> String {
    match rel_path.rfind('.') {
        Some(i) => rel_path[..i].to_string(),
        None => rel_path.to_string(),
    }
}

enum PerImage {
    Boxes(Vec<RawBox>),
    Skipped(String),
}

/// Detect boxes in every image under `image_dir` without writing anything.
pub fn detect_images(
    image_dir: &Path,
    adapter: &dyn DetectorAdapter,
    min_write_confidence: f64,
) -> Result<DetectionRun> {
    let images = list_images(image_dir)?;
    if images.is_empty() {
        return Err(Error::EmptyDirectory(image_dir.to_path_buf()));
    }

    let results: Vec<Result<PerImage>> = images
        .par_iter()
        .map(|rel| {
            let path = image_dir.join(rel);
            let dims = match image::image_dimensions(&path) {
                Ok(d) => d,
                Err(e) => return Ok(PerImage::Skipped(e.to_string())),
            };
            let boxes = adapter.detect(&path, dims)?;
            for b in &boxes {
                b.bbox.check().map_err(|m| Error::Detector {
                    image: path.clone(),
                    message: format!("invalid box: {m}"),
                })?;
            }
            Ok(PerImage::Boxes(boxes))
        })
        .collect();

    let mut report = DetectionReport {
        detector: adapter.name().to_string(),
        detector_version: adapter.version().to_string(),
        min_write_confidence,
        images_scanned: images.len(),
        ..Default::default()
    };
    let mut detections = Vec::new();
    for (rel, res) in images.iter().zip(results) {
        let mut boxes = match res? {
            PerImage::Skipped(reason) => {
                log::warn!("skipping unreadable image {rel}: {reason}");
                report.skipped.push(SkippedImage {
                    image_path: rel.clone(),
                    reason,
                });
                continue;
            }
            PerImage::Boxes(b) => b,
        };
        let before = boxes.len();
        boxes.retain(|b| b.confidence >= min_write_confidence);
        report.boxes_below_min_confidence += before - boxes.len();
        if boxes.is_empty() {
            report.without_detections.push(rel.clone());
            continue;
        }
        boxes.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let image_id = image_id_for(rel);
        for (ordinal, b) in boxes.into_iter().enumerate() {
            detections.push(Detection {
                bbox_id: format!("{image_id}#{ordinal}"),
                image_id: image_id.clone(),
                image_path: rel.clone(),
                category: b.category,
                bbox: b.bbox,
                confidence: b.confidence,
                extra: Map::new(),
            });
        }
    }
    if report.skipped.len() == images.len() {
        return Err(Error::EmptyDirectory(image_dir.to_path_buf()));
    }
    report.detections_written = detections.len();
    Ok(DetectionRun { detections, report })
}

/// Sidecar report path for a detections file: `detections.json` ->
/// `detections.report.json`.
pub fn report_path(detections_path: &Path) -> PathBuf {
    let stem = detections_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("detections");
    detections_path.with_file_name(format!("{stem}.report.json"))
}

/// Detect, then write the detections file and its sidecar report.
pub fn run_detection(
    image_dir: &Path,
    adapter: &dyn DetectorAdapter,
    min_write_confidence: f64,
    detections_path: &Path,
) -> Result<DetectionRun> {
    let run = detect_images(image_dir, adapter, min_write_confidence)?;
    data::save_detections(detections_path, &run.detections)?;
    let rp = report_path(detections_path);
    fsutil::write_json(&rp, &run.report).map_err(|e| Error::io(&rp, e))?;
    Ok(run)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JoinKey {
    ImageId,
    BboxId,
}

impl JoinKey {
    pub fn column(self) -> &'static str {
        match self {
            JoinKey::ImageId => "image_id",
            JoinKey::BboxId => "bbox_id",
        }
    }

    fn of(self, d: &Detection) -> &str {
        match self {
            JoinKey::ImageId => &d.image_id,
            JoinKey::BboxId => &d.bbox_id,
        }
    }
}

/// Rows of key/value metadata, keyed by image or bbox id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetadataTable {
    pub join: Option<JoinKey>,
    pub rows: BTreeMap<String, Metadata>,
}

impl MetadataTable {
    pub fn new(join: JoinKey) -> Self {
        MetadataTable {
            join: Some(join),
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, values: Metadata) -> Result<()> {
        let key = key.into();
        if self.rows.contains_key(&key) {
            return Err(Error::DuplicateJoinKey(key));
        }
        self.rows.insert(key, values);
        Ok(())
    }

    /// Read delimited text with a header row; the join column is the one
    /// named `image_id` or `bbox_id`.
    pub fn from_delimited<R: Read>(reader: R, join: JoinKey, delimiter: u8) -> Result<Self> {
        let malformed = |message: String| Error::MalformedFile {
            context: "metadata table".into(),
            message,
        };
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers().map_err(|e| malformed(e.to_string()))?.clone();
        let key_col = headers
            .iter()
            .position(|h| h == join.column())
            .ok_or_else(|| malformed(format!("no `{}` column in header", join.column())))?;
        let mut table = MetadataTable::new(join);
        for rec in rdr.records() {
            let rec = rec.map_err(|e| malformed(e.to_string()))?;
            let mut row = Metadata::new();
            for (i, (h, v)) in headers.iter().zip(rec.iter()).enumerate() {
                if i != key_col {
                    row.insert(h.to_string(), v.to_string());
                }
            }
            table.insert(rec.get(key_col).unwrap_or_default(), row)?;
        }
        Ok(table)
    }

    pub fn from_path(path: &Path, join: JoinKey) -> Result<Self> {
        let delimiter = match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") => b'\t',
            _ => b',',
        };
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_delimited(f, join, delimiter)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EnrichReport {
    pub matched: usize,
    pub unmatched: usize,
    /// (bbox_id, key) pairs whose existing value was replaced.
    pub overwritten: Vec<(String, String)>,
}

/// Merge table rows into the annotation metadata of matching detections.
pub fn enrich(
    detections: &[Detection],
    table: &MetadataTable,
    join: JoinKey,
    annotations: &mut AnnotationSet,
) -> EnrichReport {
    let mut report = EnrichReport::default();
    for d in detections {
        let Some(row) = table.rows.get(join.of(d)) else {
            report.unmatched += 1;
            continue;
        };
        report.matched += 1;
        let meta = annotations.metadata.entry(d.bbox_id.clone()).or_default();
        for (k, v) in row {
            if let Some(old) = meta.insert(k.clone(), v.clone()) {
                if &old != v {
                    log::warn!("{}: metadata `{k}` overwritten ({old} -> {v})", d.bbox_id);
                    report.overwritten.push((d.bbox_id.clone(), k.clone()));
                }
            }
        }
    }
    report
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Season {
    Summer,
    Winter,
}

impl Season {
    pub fn as_str(self) -> &'static str {
        match self {
            Season::Summer => "summer",
            Season::Winter => "winter",
        }
    }
}

impl std::fmt::Display for Season {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// May through September is summer; everything else is winter.
pub fn derive_season(date: NaiveDate) -> Season {
    if (5..=9).contains(&date.month()) {
        Season::Summer
    } else {
        Season::Winter
    }
}

/// Parse the capture-time formats seen in camera metadata: ISO dates,
/// ISO/RFC 3339 date-times and EXIF `YYYY:MM:DD HH:MM:SS`.
pub fn parse_capture_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Some(d);
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
        return Some(dt.date_naive());
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y:%m:%d %H:%M:%S"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.date());
        }
    }
    None
}
