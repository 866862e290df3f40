//! Unified on-disk data model: detections, class schemes, annotations and
//! dataset manifests.
//!
//! Bounding boxes are stored relative to the image size as
//! `(x_min, y_min, width, height)`. The detector category uses `0` for
//! "animal"; adapters map other conventions onto it.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{read_file, Error, Result};
use crate::fsutil;

/// Slack allowed on the right/bottom edge of a stored bbox.
pub const BBOX_EDGE_EPS: f64 = 1e-9;
/// Tolerance within which [`normalize_bbox`] clamps instead of rejecting.
pub const NORMALIZE_TOL: f64 = 1e-6;

pub const ANIMAL_CATEGORY: i64 = 0;

/// Relative `(x_min, y_min, width, height)`; serialized as a 4-element array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub width: f64,
    pub height: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.width, b.height]
    }
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, width: f64, height: f64) -> Self {
        BBox {
            x_min,
            y_min,
            width,
            height,
        }
    }

    /// Check the stored-box invariants; returns a description of the first
    /// violation.
    pub fn check(&self) -> std::result::Result<(), String> {
        let all = [self.x_min, self.y_min, self.width, self.height];
        if all.iter().any(|v| !v.is_finite()) {
            return Err("coordinates must be finite".into());
        }
        if self.x_min < 0.0 || self.y_min < 0.0 {
            return Err(format!(
                "x_min/y_min must be >= 0, got ({}, {})",
                self.x_min, self.y_min
            ));
        }
        if self.width <= 0.0 || self.height <= 0.0 {
            return Err(format!(
                "width/height must be > 0, got ({}, {})",
                self.width, self.height
            ));
        }
        if self.x_min + self.width > 1.0 + BBOX_EDGE_EPS {
            return Err(format!("x_min + width = {} > 1", self.x_min + self.width));
        }
        if self.y_min + self.height > 1.0 + BBOX_EDGE_EPS {
            return Err(format!("y_min + height = {} > 1", self.y_min + self.height));
        }
        Ok(())
    }

    pub fn centroid(&self) -> (f64, f64) {
        (
            self.x_min + self.width / 2.0,
            self.y_min + self.height / 2.0,
        )
    }
}

/// One detector bounding box linked to its image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox_id: String,
    pub image_id: String,
    pub image_path: String,
    pub category: i64,
    pub bbox: BBox,
    pub confidence: f64,
    /// Fields we do not interpret; kept so files round-trip.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

const DETECTION_FIELDS: [&str; 6] = [
    "bbox_id",
    "image_id",
    "image_path",
    "category",
    "bbox",
    "confidence",
];

/// Parse and validate a detections file (a top-level JSON list of records).
pub fn validate_detections(content: &[u8]) -> Result<Vec<Detection>> {
    let root: Value = serde_json::from_slice(content).map_err(|e| Error::MalformedFile {
        context: "detections".into(),
        message: e.to_string(),
    })?;
    let Value::Array(items) = root else {
        return Err(Error::MalformedFile {
            context: "detections".into(),
            message: "top level must be a list of detection records".into(),
        });
    };

    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.into_iter().enumerate() {
        let det = parse_detection(i, item)?;
        if !seen.insert(det.bbox_id.clone()) {
            return Err(violation(&det.bbox_id, "bbox_id", "duplicate bbox_id"));
        }
        out.push(det);
    }
    Ok(out)
}

fn violation(bbox_id: &str, field: &str, message: impl Into<String>) -> Error {
    Error::SchemaViolation {
        bbox_id: bbox_id.to_string(),
        field: field.to_string(),
        message: message.into(),
    }
}

fn parse_detection(index: usize, item: Value) -> Result<Detection> {
    let Value::Object(mut obj) = item else {
        return Err(violation(&format!("#{index}"), "<record>", "record must be an object"));
    };
    let bbox_id = match obj.get("bbox_id") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        Some(_) => {
            return Err(violation(&format!("#{index}"), "bbox_id", "must be a non-empty string"))
        }
        None => return Err(violation(&format!("#{index}"), "bbox_id", "missing field")),
    };
    let id = bbox_id.as_str();

    let string_field = |obj: &Map<String, Value>, name: &str| -> Result<String> {
        match obj.get(name) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(violation(id, name, "must be a string")),
            None => Err(violation(id, name, "missing field")),
        }
    };
    let image_id = string_field(&obj, "image_id")?;
    let image_path = string_field(&obj, "image_path")?;

    let category = match obj.get("category") {
        Some(v) => v
            .as_i64()
            .ok_or_else(|| violation(id, "category", "must be an integer"))?,
        None => return Err(violation(id, "category", "missing field")),
    };

    let bbox = match obj.get("bbox") {
        Some(Value::Array(a)) if a.len() == 4 => {
            let mut c = [0.0; 4];
            for (slot, v) in c.iter_mut().zip(a) {
                *slot = v
                    .as_f64()
                    .ok_or_else(|| violation(id, "bbox", "coordinates must be numbers"))?;
            }
            BBox::from(c)
        }
        Some(_) => return Err(violation(id, "bbox", "must be [x_min, y_min, width, height]")),
        None => return Err(violation(id, "bbox", "missing field")),
    };
    bbox.check().map_err(|m| violation(id, "bbox", m))?;

    let confidence = match obj.get("confidence") {
        Some(v) => v
            .as_f64()
            .ok_or_else(|| violation(id, "confidence", "must be a number"))?,
        None => return Err(violation(id, "confidence", "missing field")),
    };
    if !(0.0..=1.0).contains(&confidence) {
        return Err(violation(
            id,
            "confidence",
            format!("must be in [0, 1], got {confidence}"),
        ));
    }

    for f in DETECTION_FIELDS {
        obj.remove(f);
    }
    Ok(Detection {
        bbox_id,
        image_id,
        image_path,
        category,
        bbox,
        confidence,
        extra: obj,
    })
}

/// Serialize detections in the canonical file layout.
pub fn write_detections(detections: &[Detection]) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(detections).expect("detections serialize");
    bytes.push(b'\n');
    bytes
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    validate_detections(&read_file(path)?)
}

pub fn save_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    fsutil::write_atomic(path, &write_detections(detections)).map_err(|e| Error::io(path, e))
}

/// Coordinate conventions found in detector outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxConvention {
    RelativeXywh,
    AbsoluteXywh,
    AbsoluteXyxy,
}

/// Convert coordinates in any supported convention to a relative
/// `(x_min, y_min, width, height)` box.
pub fn normalize_bbox(
    coords: [f64; 4],
    convention: BoxConvention,
    image_dims: (u32, u32),
) -> Result<BBox> {
    let (w, h) = image_dims;
    if w == 0 || h == 0 {
        return Err(Error::OutOfBounds(format!("image dims must be > 0, got {w}x{h}")));
    }
    let (w, h) = (f64::from(w), f64::from(h));
    let [a, b, c, d] = coords;
    let raw = match convention {
        BoxConvention::RelativeXywh => BBox::new(a, b, c, d),
        BoxConvention::AbsoluteXywh => BBox::new(a / w, b / h, c / w, d / h),
        BoxConvention::AbsoluteXyxy => BBox::new(a / w, b / h, (c - a) / w, (d - b) / h),
    };
    clamp_within_tolerance(raw)
}

fn clamp_within_tolerance(mut b: BBox) -> Result<BBox> {
    if b.check().is_ok() {
        return Ok(b);
    }
    if !(b.width > 0.0 && b.height > 0.0)
        || b.x_min < -NORMALIZE_TOL
        || b.y_min < -NORMALIZE_TOL
        || b.x_min + b.width > 1.0 + NORMALIZE_TOL
        || b.y_min + b.height > 1.0 + NORMALIZE_TOL
    {
        return Err(Error::OutOfBounds(format!(
            "({}, {}, {}, {}) exceeds the unit square",
            b.x_min, b.y_min, b.width, b.height
        )));
    }
    if b.x_min < 0.0 {
        b.width += b.x_min;
        b.x_min = 0.0;
    }
    if b.y_min < 0.0 {
        b.height += b.y_min;
        b.y_min = 0.0;
    }
    b.width = b.width.min(1.0 - b.x_min);
    b.height = b.height.min(1.0 - b.y_min);
    b.check().map_err(Error::OutOfBounds)?;
    Ok(b)
}

/// Inverse of [`normalize_bbox`].
pub fn denormalize_bbox(b: &BBox, convention: BoxConvention, image_dims: (u32, u32)) -> [f64; 4] {
    let (w, h) = (f64::from(image_dims.0), f64::from(image_dims.1));
    match convention {
        BoxConvention::RelativeXywh => [b.x_min, b.y_min, b.width, b.height],
        BoxConvention::AbsoluteXywh => [b.x_min * w, b.y_min * h, b.width * w, b.height * h],
        BoxConvention::AbsoluteXyxy => [
            b.x_min * w,
            b.y_min * h,
            (b.x_min + b.width) * w,
            (b.y_min + b.height) * h,
        ],
    }
}

/// A classification target and its ordered labels. Label order is the class
/// index order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassScheme {
    pub name: String,
    pub labels: Vec<String>,
}

impl ClassScheme {
    pub fn new(name: impl Into<String>, labels: &[&str]) -> Result<Self> {
        let s = ClassScheme {
            name: name.into(),
            labels: labels.iter().map(|l| l.to_string()).collect(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let path = format!("schemes.{}", self.name);
        if self.name.is_empty() {
            return Err(Error::InvalidValue {
                path,
                constraint: "scheme name must be non-empty".into(),
            });
        }
        if self.labels.is_empty() {
            return Err(Error::InvalidValue {
                path,
                constraint: "labels must be non-empty".into(),
            });
        }
        let mut seen = BTreeSet::new();
        for l in &self.labels {
            if l.is_empty() || !seen.insert(l.as_str()) {
                return Err(Error::InvalidValue {
                    path,
                    constraint: format!("labels must be non-empty and distinct (`{l}`)"),
                });
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// A label value; `Unlabeled` is distinct from any label string so that
/// "unknown" can itself be a class. Stored as JSON `null`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub enum Label {
    #[default]
    Unlabeled,
    Value(String),
}

impl Label {
    pub fn value(&self) -> Option<&str> {
        match self {
            Label::Unlabeled => None,
            Label::Value(s) => Some(s),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.value().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(match Option::<String>::deserialize(d)? {
            Some(s) => Label::Value(s),
            None => Label::Unlabeled,
        })
    }
}

pub type Metadata = BTreeMap<String, String>;

/// Annotations file: scheme definitions, per-bbox labels and metadata.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSet {
    #[serde(default)]
    pub schemes: Vec<ClassScheme>,
    /// bbox_id -> scheme name -> label
    #[serde(default)]
    pub records: BTreeMap<String, BTreeMap<String, Label>>,
    /// bbox_id -> key -> value (camera location, timestamp, ...)
    #[serde(default)]
    pub metadata: BTreeMap<String, Metadata>,
}

impl AnnotationSet {
    pub fn scheme(&self, name: &str) -> Option<&ClassScheme> {
        self.schemes.iter().find(|s| s.name == name)
    }

    pub fn label(&self, bbox_id: &str, scheme: &str) -> &Label {
        static UNLABELED: Label = Label::Unlabeled;
        self.records
            .get(bbox_id)
            .and_then(|m| m.get(scheme))
            .unwrap_or(&UNLABELED)
    }

    /// Set one label after checking it against its scheme.
    pub fn set_label(&mut self, bbox_id: &str, scheme: &str, label: Label) -> Result<()> {
        let s = self
            .scheme(scheme)
            .ok_or_else(|| Error::UnknownLabel(format!("{scheme} (no such scheme)")))?;
        if let Label::Value(v) = &label {
            if s.index_of(v).is_none() {
                return Err(Error::UnknownLabel(v.clone()));
            }
        }
        self.records
            .entry(bbox_id.to_string())
            .or_default()
            .insert(scheme.to_string(), label);
        Ok(())
    }

    /// Whether any record uses `label` under `scheme`.
    pub fn label_in_use(&self, scheme: &str, label: &str) -> bool {
        self.records
            .values()
            .any(|m| m.get(scheme).and_then(Label::value) == Some(label))
    }

    /// Create or replace a scheme. Removing a label that some record uses is
    /// refused.
    pub fn upsert_scheme(&mut self, scheme: ClassScheme) -> Result<()> {
        scheme.validate()?;
        if let Some(existing) = self.scheme(&scheme.name) {
            for old in &existing.labels {
                if scheme.index_of(old).is_none() && self.label_in_use(&scheme.name, old) {
                    return Err(Error::InvalidValue {
                        path: format!("schemes.{}", scheme.name),
                        constraint: format!("label `{old}` is in use and cannot be removed"),
                    });
                }
            }
        }
        match self.schemes.iter_mut().find(|s| s.name == scheme.name) {
            Some(slot) => *slot = scheme,
            None => self.schemes.push(scheme),
        }
        Ok(())
    }

    /// Check labels against schemes and bbox ids against `detections`.
    pub fn validate(&self, detections: &[Detection]) -> Result<()> {
        for s in &self.schemes {
            s.validate()?;
        }
        let ids: BTreeSet<&str> = detections.iter().map(|d| d.bbox_id.as_str()).collect();
        for (bbox_id, labels) in &self.records {
            if !ids.contains(bbox_id.as_str()) {
                return Err(violation(bbox_id, "bbox_id", "annotation has no matching detection"));
            }
            for (scheme, label) in labels {
                let s = self
                    .scheme(scheme)
                    .ok_or_else(|| violation(bbox_id, scheme, "unknown class scheme"))?;
                if let Label::Value(v) = label {
                    if s.index_of(v).is_none() {
                        return Err(violation(
                            bbox_id,
                            scheme,
                            format!("label `{v}` not in scheme"),
                        ));
                    }
                }
            }
        }
        for bbox_id in self.metadata.keys() {
            if !ids.contains(bbox_id.as_str()) {
                return Err(violation(bbox_id, "metadata", "metadata has no matching detection"));
            }
        }
        Ok(())
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        let set: AnnotationSet = serde_json::from_slice(bytes).map_err(|e| Error::MalformedFile {
            context: "annotations".into(),
            message: e.to_string(),
        })?;
        for s in &set.schemes {
            s.validate()?;
        }
        Ok(set)
    }

    /// Load, treating a missing file as an empty set.
    pub fn load_or_default(path: &Path) -> Result<Self> {
        match std::fs::read(path) {
            Ok(bytes) => Self::from_slice(&bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("annotations serialize");
        bytes.push(b'\n');
        bytes
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub bbox_id: String,
    pub image_id: String,
    /// Relative to the manifest's directory.
    pub crop_path: String,
    pub label: String,
    pub class_index: usize,
    pub confidence: f64,
    /// `None` until the split stage has run.
    pub split: Option<SplitTag>,
    pub metadata: Metadata,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_fingerprint: String,
    pub detections_file: String,
    pub annotations_file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scheme: ClassScheme,
    pub entries: Vec<ManifestEntry>,
    pub provenance: Provenance,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        self.scheme.validate()?;
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.bbox_id.as_str()) {
                return Err(violation(&e.bbox_id, "bbox_id", "duplicate manifest entry"));
            }
            if self.scheme.index_of(&e.label) != Some(e.class_index) {
                return Err(violation(
                    &e.bbox_id,
                    "class_index",
                    format!("{} does not match label `{}`", e.class_index, e.label),
                ));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: DatasetManifest =
            serde_json::from_slice(&read_file(path)?).map_err(|e| Error::MalformedFile {
                context: path.display().to_string(),
                message: e.to_string(),
            })?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_json(path, self).map_err(|e| Error::io(path, e))
    }

    pub fn entries_with(&self, tag: SplitTag) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == Some(tag))
    }

    /// Per-class entry counts in scheme order.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.scheme.num_classes()];
        for e in &self.entries {
            counts[e.class_index] += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(bbox: &str, conf: &str) -> String {
        format!(
            r#"[{{"bbox_id":"b1","image_id":"i1","image_path":"i1.jpg","category":0,"bbox":{bbox},"confidence":{conf}}}]"#
        )
    }

    #[test]
    fn minimal_record_parses() {
        let dets = validate_detections(record("[0.1,0.1,0.2,0.1]", "0.97").as_bytes()).unwrap();
        assert_eq!(dets.len(), 1);
        let d = &dets[0];
        assert_eq!(d.bbox_id, "b1");
        assert_eq!(d.category, ANIMAL_CATEGORY);
        assert_eq!(d.bbox, BBox::new(0.1, 0.1, 0.2, 0.1));
        assert_eq!(d.confidence, 0.97);
    }

    fn field_of(err: Error) -> String {
        match err {
            Error::SchemaViolation { field, .. } => field,
            other => panic!("expected SchemaViolation, got {other:?}"),
        }
    }

    #[test]
    fn confidence_out_of_range() {
        let err = validate_detections(record("[0.1,0.1,0.2,0.1]", "1.3").as_bytes()).unwrap_err();
        assert_eq!(field_of(err), "confidence");
    }

    #[test]
    fn bbox_past_right_edge() {
        let err = validate_detections(record("[0.82,0.1,0.2,0.1]", "0.5").as_bytes()).unwrap_err();
        assert_eq!(field_of(err), "bbox");
    }

    #[test]
    fn missing_field_named() {
        let err = validate_detections(
            br#"[{"bbox_id":"b9","image_id":"i","image_path":"p","bbox":[0,0,1,1],"confidence":1}]"#,
        )
        .unwrap_err();
        match err {
            Error::SchemaViolation { bbox_id, field, .. } => {
                assert_eq!(bbox_id, "b9");
                assert_eq!(field, "category");
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn malformed_and_duplicate() {
        assert!(matches!(
            validate_detections(b"{not json"),
            Err(Error::MalformedFile { .. })
        ));
        assert!(matches!(
            validate_detections(b"{}"),
            Err(Error::MalformedFile { .. })
        ));
        let one = r#"{"bbox_id":"b1","image_id":"i1","image_path":"i1.jpg","category":0,"bbox":[0,0,0.5,0.5],"confidence":0.5}"#;
        let err = validate_detections(format!("[{one},{one}]").as_bytes()).unwrap_err();
        assert_eq!(field_of(err), "bbox_id");
    }

    #[test]
    fn extra_fields_survive_round_trip() {
        let src = br#"[{"bbox_id":"b1","image_id":"i1","image_path":"i1.jpg","category":0,"bbox":[0.1,0.1,0.2,0.1],"confidence":0.97,"md_version":"v6","frame":{"n":3}}]"#;
        let dets = validate_detections(src).unwrap();
        assert_eq!(dets[0].extra["md_version"], "v6");
        let again = validate_detections(&write_detections(&dets)).unwrap();
        assert_eq!(dets, again);
    }

    #[test]
    fn normalize_examples() {
        let rel = normalize_bbox([0.1, 0.2, 0.3, 0.4], BoxConvention::RelativeXywh, (7, 9)).unwrap();
        assert_eq!(rel, BBox::new(0.1, 0.2, 0.3, 0.4));

        let xywh =
            normalize_bbox([100.0, 100.0, 200.0, 100.0], BoxConvention::AbsoluteXywh, (1000, 800))
                .unwrap();
        assert_eq!(xywh, BBox::new(0.1, 0.125, 0.2, 0.125));

        let xyxy =
            normalize_bbox([100.0, 100.0, 300.0, 200.0], BoxConvention::AbsoluteXyxy, (1000, 800))
                .unwrap();
        assert_eq!(xyxy, BBox::new(0.1, 0.125, 0.2, 0.125));
    }

    #[test]
    fn normalize_clamps_within_tolerance_only() {
        let b = normalize_bbox(
            [800.0000001, 0.0, 200.0, 100.0],
            BoxConvention::AbsoluteXywh,
            (1000, 800),
        )
        .unwrap();
        assert!(b.x_min + b.width <= 1.0 + BBOX_EDGE_EPS);
        let err = normalize_bbox([900.0, 0.0, 200.0, 100.0], BoxConvention::AbsoluteXywh, (1000, 800));
        assert!(matches!(err, Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn scheme_and_annotations() {
        let scheme = ClassScheme::new("sex", &["female", "male", "unknown"]).unwrap();
        assert_eq!(scheme.index_of("unknown"), Some(2));
        assert!(ClassScheme::new("x", &[]).is_err());
        assert!(ClassScheme::new("x", &["a", "a"]).is_err());

        let mut set = AnnotationSet::default();
        set.upsert_scheme(scheme.clone()).unwrap();
        set.set_label("b1", "sex", Label::Value("male".into())).unwrap();
        assert!(matches!(
            set.set_label("b1", "sex", Label::Value("alien".into())),
            Err(Error::UnknownLabel(_))
        ));
        assert_eq!(set.label("b2", "sex"), &Label::Unlabeled);

        // removing a used label is refused, removing an unused one is fine
        let shrunk = ClassScheme::new("sex", &["female", "unknown"]).unwrap();
        assert!(set.upsert_scheme(shrunk).is_err());
        let shrunk = ClassScheme::new("sex", &["female", "male"]).unwrap();
        set.upsert_scheme(shrunk).unwrap();

        let round = AnnotationSet::from_slice(&set.to_bytes()).unwrap();
        assert_eq!(round, set);
    }

    #[test]
    fn unlabeled_is_null_not_a_string() {
        let mut set = AnnotationSet::default();
        set.upsert_scheme(ClassScheme::new("age", &["adult", "unknown"]).unwrap())
            .unwrap();
        set.set_label("b1", "age", Label::Unlabeled).unwrap();
        set.set_label("b2", "age", Label::Value("unknown".into())).unwrap();
        let json: Value = serde_json::from_slice(&set.to_bytes()).unwrap();
        assert_eq!(json["records"]["b1"]["age"], Value::Null);
        assert_eq!(json["records"]["b2"]["age"], "unknown");
    }

    fn arb_bbox() -> impl Strategy<Value = BBox> {
        (0.0f64..0.9, 0.0f64..0.9, 0.01f64..1.0, 0.01f64..1.0).prop_map(|(x, y, w, h)| {
            BBox::new(x, y, w.min(1.0 - x), h.min(1.0 - y))
        })
    }

    fn arb_detection() -> impl Strategy<Value = Detection> {
        (arb_bbox(), 0.0f64..=1.0, "[a-z]{1,6}", 0i64..3, proptest::option::of("[a-z ]{0,8}"))
            .prop_map(|(bbox, confidence, image, category, note)| {
                let mut extra = Map::new();
                if let Some(n) = note {
                    extra.insert("note".into(), Value::String(n));
                }
                Detection {
                    bbox_id: String::new(),
                    image_id: image.clone(),
                    image_path: format!("{image}.jpg"),
                    category,
                    bbox,
                    confidence,
                    extra,
                }
            })
    }

    proptest! {
        #[test]
        fn detections_round_trip(mut dets in proptest::collection::vec(arb_detection(), 0..8)) {
            for (i, d) in dets.iter_mut().enumerate() {
                d.bbox_id = format!("{}#{i}", d.image_id);
            }
            let parsed = validate_detections(&write_detections(&dets)).unwrap();
            prop_assert_eq!(&parsed, &dets);
            prop_assert_eq!(write_detections(&parsed), write_detections(&dets));
        }

        #[test]
        fn normalize_idempotent_on_relative(b in arb_bbox()) {
            let once = normalize_bbox(b.into(), BoxConvention::RelativeXywh, (640, 480)).unwrap();
            let twice = normalize_bbox(once.into(), BoxConvention::RelativeXywh, (640, 480)).unwrap();
            prop_assert_eq!(once, b);
            prop_assert_eq!(twice, once);
        }

        #[test]
        fn denormalize_recovers_input(
            b in arb_bbox(),
            w in 1u32..5000,
            h in 1u32..5000,
            conv in prop_oneof![
                Just(BoxConvention::RelativeXywh),
                Just(BoxConvention::AbsoluteXywh),
                Just(BoxConvention::AbsoluteXyxy),
            ],
        ) {
            let input = denormalize_bbox(&b, conv, (w, h));
            let out = normalize_bbox(input, conv, (w, h)).unwrap();
            prop_assert!(out.check().is_ok());
            let back = denormalize_bbox(&out, conv, (w, h));
            for (a, b) in back.iter().zip(&input) {
                prop_assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }
    }
}
