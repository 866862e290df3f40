//! Preprocessing: confidence threshold, square crop around the box
//! centroid (shift or pad), bilinear rescale, manifest.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{CropStrategy, ExperimentConfig, ShiftFallback, MIN_TARGET_DIM};
use crate::data::{
    self, AnnotationSet, BBox, DatasetManifest, Detection, Label, ManifestEntry, Provenance,
};
use crate::error::{Error, Result};
use crate::fsutil;

// Absorbs float noise like 0.2 * 1000 = 200.00000000000003 before ceil/floor.
const PIXEL_EPS: f64 = 1e-9;

/// Keep detections with `confidence >= ct`, preserving order.
pub fn filter_confidence(detections: &[Detection], ct: f64) -> Vec<Detection> {
    detections
        .iter()
        .filter(|d| d.confidence >= ct)
        .cloned()
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub left: u32,
    pub top: u32,
    pub right: u32,
    pub bottom: u32,
}

impl Padding {
    pub fn is_zero(&self) -> bool {
        *self == Padding::default()
    }
}

/// Square crop rectangle in absolute pixels. `left`/`top` may be negative
/// under the pad strategy; the out-of-image margins are in `pad`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub left: i64,
    pub top: i64,
    pub side: u32,
    pub strategy: CropStrategy,
    pub pad: Padding,
    /// Shift was requested but the square did not fit, so pad was used.
    pub fell_back: bool,
}

/// Square crop of side `ceil(max(w_px, h_px))` centered on the box
/// centroid, then shifted inside the image or padded.
pub fn square_crop(
    bbox: &BBox,
    image_dims: (u32, u32),
    strategy: CropStrategy,
    fallback: ShiftFallback,
) -> Result<CropSpec> {
    let (width, height) = image_dims;
    if width == 0 || height == 0 {
        return Err(Error::OutOfBounds(format!("image dims {width}x{height}")));
    }
    let (w, h) = (f64::from(width), f64::from(height));
    let longest = (bbox.width * w).max(bbox.height * h);
    let side = ((longest - PIXEL_EPS).ceil() as u32).max(1);
    let (cx, cy) = bbox.centroid();
    let half = f64::from(side) / 2.0;
    let left_f = cx * w - half;
    let top_f = cy * h - half;

    let padded = |fell_back: bool| {
        let left = (left_f + PIXEL_EPS).floor() as i64;
        let top = (top_f + PIXEL_EPS).floor() as i64;
        let s = i64::from(side);
        let pad = Padding {
            left: (-left).max(0) as u32,
            top: (-top).max(0) as u32,
            right: (left + s - i64::from(width)).max(0) as u32,
            bottom: (top + s - i64::from(height)).max(0) as u32,
        };
        CropSpec {
            left,
            top,
            side,
            strategy: CropStrategy::Pad,
            pad,
            fell_back,
        }
    };

    match strategy {
        CropStrategy::Pad => Ok(padded(false)),
        CropStrategy::Shift => {
            if side > width || side > height {
                return match fallback {
                    ShiftFallback::Pad => {
                        log::info!(
                            "square side {side}px exceeds {width}x{height}; padding instead of shifting"
                        );
                        Ok(padded(true))
                    }
                    ShiftFallback::Error => Err(Error::SquareExceedsImage {
                        side,
                        width,
                        height,
                    }),
                };
            }
            let max_left = f64::from(width - side);
            let max_top = f64::from(height - side);
            let left = (left_f.clamp(0.0, max_left) + PIXEL_EPS).floor() as i64;
            let top = (top_f.clamp(0.0, max_top) + PIXEL_EPS).floor() as i64;
            Ok(CropSpec {
                left: left.min(max_left as i64),
                top: top.min(max_top as i64),
                side,
                strategy: CropStrategy::Shift,
                pad: Padding::default(),
                fell_back: false,
            })
        }
    }
}

/// Cut the crop out of `image`; pixels outside the image are black.
pub fn extract_crop(image: &RgbImage, spec: &CropSpec) -> RgbImage {
    let (iw, ih) = (i64::from(image.width()), i64::from(image.height()));
    let mut out = RgbImage::new(spec.side, spec.side);
    for y in 0..spec.side {
        let sy = spec.top + i64::from(y);
        if sy < 0 || sy >= ih {
            continue;
        }
        for x in 0..spec.side {
            let sx = spec.left + i64::from(x);
            if sx < 0 || sx >= iw {
                continue;
            }
            out.put_pixel(x, y, *image.get_pixel(sx as u32, sy as u32));
        }
    }
    out
}

/// Bilinear resample of a square crop to `target_dim`×`target_dim`.
///
/// Sample positions use pixel centers, so a same-size resize is an exact
/// copy.
pub fn rescale(crop: &RgbImage, target_dim: u32) -> Result<RgbImage> {
    let (w, h) = crop.dimensions();
    if w != h || w == 0 {
        return Err(Error::NonSquareInput {
            width: w,
            height: h,
        });
    }
    if target_dim < MIN_TARGET_DIM {
        return Err(Error::InvalidValue {
            path: "preprocessing.target_dim".into(),
            constraint: format!("must be >= {MIN_TARGET_DIM}, got {target_dim}"),
        });
    }
    if w == target_dim {
        return Ok(crop.clone());
    }
    let scale = f64::from(w) / f64::from(target_dim);
    let max = f64::from(w - 1);
    // precompute (i0, i1, frac) per output coordinate
    let taps: Vec<(u32, u32, f64)> = (0..target_dim)
        .map(|d| {
            let s = ((f64::from(d) + 0.5) * scale - 0.5).clamp(0.0, max);
            let i0 = s.floor();
            let i1 = (i0 + 1.0).min(max);
            (i0 as u32, i1 as u32, s - i0)
        })
        .collect();
    let mut out = RgbImage::new(target_dim, target_dim);
    for (oy, &(y0, y1, fy)) in taps.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in taps.iter().enumerate() {
            let p00 = crop.get_pixel(x0, y0);
            let p10 = crop.get_pixel(x1, y0);
            let p01 = crop.get_pixel(x0, y1);
            let p11 = crop.get_pixel(x1, y1);
            let mut px = [0u8; 3];
            for c in 0..3 {
                let top = f64::from(p00[c]) * (1.0 - fx) + f64::from(p10[c]) * fx;
                let bot = f64::from(p01[c]) * (1.0 - fx) + f64::from(p11[c]) * fx;
                px[c] = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(ox as u32, oy as u32, Rgb(px));
        }
    }
    Ok(out)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    fsutil::write_atomic(path, &bytes).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub detections_total: usize,
    pub below_confidence_threshold: usize,
    /// No label record at all for the target scheme.
    pub missing_annotation: usize,
    /// Explicitly unlabeled for the target scheme.
    pub unlabeled: usize,
    pub shift_fallbacks: Vec<String>,
    pub crops_written: usize,
}

#[derive(Clone, Debug)]
pub struct PreprocessOutput {
    pub manifest: DatasetManifest,
    pub report: PreprocessReport,
}

/// Threshold, crop, rescale and write crops plus `manifest.json` under
/// `io.output_dir`.
pub fn run_preprocess(config: &ExperimentConfig) -> Result<PreprocessOutput> {
    let p = &config.preprocessing;
    let target = &config.training.target_scheme;
    let detections = data::load_detections(&config.detections_path())?;
    if detections.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} has no detections",
            config.detections_path().display()
        )));
    }
    let annotations = AnnotationSet::load_or_default(&config.annotations_path())?;
    annotations.validate(&detections)?;
    let scheme = annotations
        .scheme(target)
        .cloned()
        .ok_or_else(|| Error::InvalidValue {
            path: "training.target_scheme".into(),
            constraint: format!("scheme `{target}` is not defined in the annotations file"),
        })?;

    let mut report = PreprocessReport {
        detections_total: detections.len(),
        ..Default::default()
    };
    let kept = filter_confidence(&detections, p.confidence_threshold);
    report.below_confidence_threshold = detections.len() - kept.len();

    let mut labeled: Vec<(Detection, String)> = Vec::new();
    for d in kept {
        let record = annotations.records.get(&d.bbox_id).and_then(|m| m.get(target));
        match record {
            None => report.missing_annotation += 1,
            Some(Label::Unlabeled) => report.unlabeled += 1,
            Some(Label::Value(v)) => labeled.push((d, v.clone())),
        }
    }
    if report.missing_annotation > 0 {
        log::warn!(
            "{} detections above the threshold have no `{target}` annotation",
            report.missing_annotation
        );
    }
    if labeled.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no labeled detections with confidence >= {}",
            p.confidence_threshold
        )));
    }

    // group by source image so each image is decoded once
    let mut by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (d, _)) in labeled.iter().enumerate() {
        by_image.entry(d.image_path.as_str()).or_default().push(i);
    }
    let crops_dir = config.io.output_dir.join("crops");
    let groups: Vec<(&str, Vec<usize>)> = by_image.into_iter().collect();
    let results: Vec<Result<Vec<(usize, CropSpec)>>> = groups
        .par_iter()
        .map(|(image_path, idxs)| {
            let img = load_rgb(&config.io.data_dir.join(image_path))?;
            let dims = img.dimensions();
            idxs.iter()
                .map(|&i| {
                    let d = &labeled[i].0;
                    let spec = square_crop(&d.bbox, dims, p.crop_strategy, p.shift_fallback)?;
                    let crop = rescale(&extract_crop(&img, &spec), p.target_dim)?;
                    save_png(&crops_dir.join(crop_file_name(&d.bbox_id)), &crop)?;
                    Ok((i, spec))
                })
                .collect()
        })
        .collect();
    let mut specs: Vec<Option<CropSpec>> = vec![None; labeled.len()];
    for r in results {
        for (i, spec) in r? {
            specs[i] = Some(spec);
        }
    }

    let mut entries = Vec::with_capacity(labeled.len());
    for ((d, label), spec) in labeled.iter().zip(specs) {
        if spec.is_some_and(|s| s.fell_back) {
            report.shift_fallbacks.push(d.bbox_id.clone());
        }
        let class_index = scheme.index_of(label).ok_or_else(|| Error::SchemaViolation {
            bbox_id: d.bbox_id.clone(),
            field: target.clone(),
            message: format!("label `{label}` not in scheme"),
        })?;
        entries.push(ManifestEntry {
            bbox_id: d.bbox_id.clone(),
            image_id: d.image_id.clone(),
            crop_path: format!("crops/{}", crop_file_name(&d.bbox_id)),
            label: label.clone(),
            class_index,
            confidence: d.confidence,
            split: None,
            metadata: annotations.metadata.get(&d.bbox_id).cloned().unwrap_or_default(),
        });
    }
    report.crops_written = entries.len();

    let manifest = DatasetManifest {
        scheme,
        entries,
        provenance: Provenance {
            config_fingerprint: config.fingerprint(),
            detections_file: config.detections_path().display().to_string(),
            annotations_file: config.annotations_path().display().to_string(),
        },
    };
    manifest.validate()?;
    manifest.save(&config.manifest_path())?;
    let rp = config.io.output_dir.join("preprocess_report.json");
    fsutil::write_json(&rp, &report).map_err(|e| Error::io(&rp, e))?;
    Ok(PreprocessOutput { manifest, report })
}

pub fn crop_file_name(bbox_id: &str) -> String {
    format!("{}.png", fsutil::safe_file_stem(bbox_id))
}
