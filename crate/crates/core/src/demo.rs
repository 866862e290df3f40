//! Self-contained demo: synthetic camera-trap-like images of red and blue
//! shapes, scripted detections, and a small config that runs the whole
//! pipeline on CPU in well under a minute.
//!
//! The two classes differ in the dominant channel of the shape; the
//! background is neutral (red and blue drawn from the same range), so the
//! mean red-minus-blue intensity of a crop separates the classes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{load_config, ExperimentConfig};
use crate::data::{self, AnnotationSet, BBox, ClassScheme, Label};
use crate::detect::{JoinKey, RawBox, StubDetector};
use crate::error::{Error, Result};
use crate::eval::ExperimentAggregate;
use crate::pipeline;
use crate::preprocess::save_png;

pub const DEMO_IMAGES: usize = 200;
pub const DEMO_SEED: u64 = 20_240_611;
pub const DEMO_SCHEME: &str = "color";
pub const DEMO_LABELS: [&str; 2] = ["red", "blue"];
const WIDTH: u32 = 160;
const HEIGHT: u32 = 120;

/// The config the demo runs with. Relative paths resolve against the demo
/// root.
pub const DEMO_CONFIG: &str = r#"# Demo experiment: two synthetic shape classes.
[io]
data_dir = "data"
output_dir = "out"
model_dir = "models"
experiment_name = "demo-color"

[preprocessing]
confidence_threshold = 0.96
crop_strategy = "shift"
target_dim = 32

[training]
target_scheme = "color"
backbone = "resnet50"
augmentation = "light"
test_fraction = 0.20
val_fraction = 0.15
seed = 42
repeats = 3
# No pretrained weights ship with the demo.
pretrained = false

[training.transfer_stage]
epochs = 5
learning_rate = 0.05
batch_size = 16

[training.finetune_stage]
epochs = 5
learning_rate = 0.01
batch_size = 16
unfrozen_depth = 1

[evaluation]
uncertainty_threshold = 0.5
stratify_attribute = "season"
"#;

/// What `generate_dataset` produced.
#[derive(Clone, Debug)]
pub struct DemoDataset {
    pub data_dir: PathBuf,
    /// Keyed by image file name.
    pub detector: StubDetector,
    /// bbox id -> label, for the boxes that pass the confidence threshold.
    pub labels: BTreeMap<String, String>,
    pub metadata_table: PathBuf,
}

struct Shape {
    class: usize,
    bbox_px: (u32, u32, u32, u32),
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn draw_image(rng: &mut ChaCha8Rng, class: usize) -> (RgbImage, Shape) {
    let light = rng.random_range(0.7..1.15);
    let mut img = RgbImage::from_fn(WIDTH, HEIGHT, |_, _| Rgb([0, 0, 0]));
    for p in img.pixels_mut() {
        let rb = rng.random_range(85.0..125.0);
        let rb2 = rng.random_range(85.0..125.0);
        let g = rng.random_range(95.0..135.0);
        *p = Rgb([clamp_u8(rb * light), clamp_u8(g * light), clamp_u8(rb2 * light)]);
    }

    let w = rng.random_range(22..56u32);
    let h = rng.random_range(22..56u32);
    // a few shapes sit at the border so square crops need shifting
    let at_edge = rng.random_bool(0.15);
    let x0 = if at_edge { 0 } else { rng.random_range(0..WIDTH - w) };
    let y0 = rng.random_range(0..HEIGHT - h);
    let ellipse = rng.random_bool(0.5);
    let (hi, lo) = (rng.random_range(160.0..235.0), rng.random_range(30.0..95.0));
    let mid = rng.random_range(40.0..110.0);
    let color = if class == 0 { [hi, mid, lo] } else { [lo, mid, hi] };
    let (cx, cy) = (x0 as f64 + w as f64 / 2.0, y0 as f64 + h as f64 / 2.0);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let inside = !ellipse || {
                let dx = (x as f64 + 0.5 - cx) / (w as f64 / 2.0);
                let dy = (y as f64 + 0.5 - cy) / (h as f64 / 2.0);
                dx * dx + dy * dy <= 1.0
            };
            if inside {
                let n = rng.random_range(-12.0..12.0);
                img.put_pixel(
                    x,
                    y,
                    Rgb([
                        clamp_u8((color[0] + n) * light),
                        clamp_u8((color[1] + n) * light),
                        clamp_u8((color[2] + n) * light),
                    ]),
                );
            }
        }
    }
    (
        img,
        Shape {
            class,
            bbox_px: (x0, y0, w, h),
        },
    )
}

fn rel_box(x: u32, y: u32, w: u32, h: u32) -> BBox {
    BBox::new(
        f64::from(x) / f64::from(WIDTH),
        f64::from(y) / f64::from(HEIGHT),
        f64::from(w) / f64::from(WIDTH),
        f64::from(h) / f64::from(HEIGHT),
    )
}

/// Write `DEMO_IMAGES` images plus a metadata table under `data_dir` and
/// return the scripted detector that "finds" the shapes.
pub fn generate_dataset(data_dir: &Path, seed: u64) -> Result<DemoDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut script = BTreeMap::new();
    let mut labels = BTreeMap::new();
    let mut table = String::from("image_id,camera,timestamp\n");
    let start = NaiveDate::from_ymd_opt(2020, 7, 1).expect("valid date");
    for i in 0..DEMO_IMAGES {
        let camera = format!("cam{}", i % 4 + 1);
        let name = format!("img_{i:04}.png");
        let class = usize::from(rng.random_bool(0.5));
        let (img, shape) = draw_image(&mut rng, class);
        let dir = data_dir.join(&camera);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_png(&dir.join(&name), &img)?;

        let (x, y, w, h) = shape.bbox_px;
        let mut boxes = vec![RawBox {
            category: data::ANIMAL_CATEGORY,
            bbox: rel_box(x, y, w, h),
            confidence: rng.random_range(0.965..0.999),
        }];
        // background distractors, all below the confidence threshold
        if rng.random_bool(0.3) {
            let (dw, dh) = (rng.random_range(10..30u32), rng.random_range(10..30u32));
            boxes.push(RawBox {
                category: data::ANIMAL_CATEGORY,
                bbox: rel_box(
                    rng.random_range(0..WIDTH - dw),
                    rng.random_range(0..HEIGHT - dh),
                    dw,
                    dh,
                ),
                confidence: rng.random_range(0.2..0.9),
            });
        }
        script.insert(format!("{camera}/{name}"), boxes);
        let image_id = format!("{camera}/img_{i:04}");
        labels.insert(format!("{image_id}#0"), DEMO_LABELS[shape.class].to_string());
        let day = start + Duration::days((i as i64 * 3) % 660);
        table.push_str(&format!("{image_id},{camera},{}T12:00:00\n", day.format("%Y-%m-%d")));
    }
    let metadata_table = data_dir.join("metadata.csv");
    std::fs::write(&metadata_table, table).map_err(|e| Error::io(&metadata_table, e))?;
    Ok(DemoDataset {
        data_dir: data_dir.to_path_buf(),
        detector: StubDetector::scripted(script),
        labels,
        metadata_table,
    })
}

/// Stand-in for the human annotation step: define the scheme and label the
/// shape boxes. Distractor boxes stay unlabeled.
pub fn annotate(config: &ExperimentConfig, labels: &BTreeMap<String, String>) -> Result<()> {
    let path = config.annotations_path();
    let mut set = AnnotationSet::load_or_default(&path)?;
    set.upsert_scheme(ClassScheme::new(DEMO_SCHEME, &DEMO_LABELS)?)?;
    for d in data::load_detections(&config.detections_path())? {
        let label = match labels.get(&d.bbox_id) {
            Some(l) => Label::Value(l.clone()),
            None => Label::Unlabeled,
        };
        set.set_label(&d.bbox_id, DEMO_SCHEME, label)?;
    }
    set.save(&path)
}

#[derive(Clone, Debug, Serialize)]
pub struct DemoOutcome {
    pub config_path: PathBuf,
    pub experiment_id: String,
    pub detections: usize,
    pub crops: usize,
    pub aggregate: ExperimentAggregate,
}

/// Generate the dataset under `root` and run every stage.
pub fn run_demo(root: &Path, overwrite: bool) -> Result<DemoOutcome> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let config_path = root.join("demo.toml");
    std::fs::write(&config_path, DEMO_CONFIG).map_err(|e| Error::io(&config_path, e))?;
    let config = load_config(&config_path)?;
    if overwrite {
        for dir in [&config.io.output_dir, &config.io.model_dir.join(config.experiment_id())] {
            if dir.exists() {
                std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
    }

    log::info!("generating {DEMO_IMAGES} synthetic images in {}", config.io.data_dir.display());
    let ds = generate_dataset(&config.io.data_dir, DEMO_SEED)?;
    let det = pipeline::detect_stage(&config, &ds.detector, 0.1, overwrite)?;
    pipeline::enrich_stage(&config, &ds.metadata_table, JoinKey::ImageId)?;
    annotate(&config, &ds.labels)?;
    let pre = pipeline::preprocess_stage(&config, overwrite)?;
    pipeline::split_stage(&config, overwrite)?;
    pipeline::train_stage(&config, overwrite)?;
    let aggregate = pipeline::evaluate_stage(&config, None)?;
    Ok(DemoOutcome {
        config_path,
        experiment_id: config.experiment_id(),
        detections: det.detections_written,
        crops: pre.report.crops_written,
        aggregate,
    })
}
