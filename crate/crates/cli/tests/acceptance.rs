//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Exit status is non-zero when a criterion fails that is not listed in
//! `KNOWN_RED`, or when a listed one unexpectedly passes. Set
//! `CAMTRAP_ACCEPTANCE_STRICT=1` to make every failure fatal.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use camtrap_core::config::{load_config, Backbone, CropStrategy, ShiftFallback};
use camtrap_core::data::{BBox, ClassScheme, DatasetManifest, ManifestEntry, Metadata, Provenance};
use camtrap_core::eval::{
    apply_uncertainty_threshold, compute_metrics, evaluate_records, unknown_quality_adjustment, PredictionRecord,
};
use camtrap_core::preprocess::{extract_crop, square_crop, CropSpec};
use camtrap_core::split::stratified_split;
use camtrap_core::train::model::{ClassifierModel, Tensor};
use camtrap_core::train::TrainRecord;
use camtrap_core::ExperimentAggregate;

/// Criteria that fail for reasons documented in the decisions ledger.
/// The table-fixture gap is a property of the published counts.
const KNOWN_RED: &[&str] = &["table-fixtures"];

type Q = Ratio<i64>;
type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let strict = std::env::var("CAMTRAP_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let criteria: [Criterion; 9] = [
        ("metrics-oracle", metrics_oracle),
        ("weighted-recall-equals-accuracy", weighted_recall),
        ("crop-geometry", crop_geometry),
        ("stratified-split", split_suite),
        ("freeze-contract", freeze_contract),
        ("gradient-check", gradient_check),
        ("end-to-end-demo", end_to_end_demo),
        ("table-fixtures", table_fixtures),
        ("uncertainty-accounting", uncertainty_accounting),
    ];

    let mut fatal = 0;
    let mut passed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        let known = KNOWN_RED.contains(&name);
        match outcome {
            Ok(detail) => {
                passed += 1;
                println!("PASS  {name:<34} {detail} [{secs:.1}s]");
                if known {
                    println!("      {name} is listed as a known failure but passed; update KNOWN_RED");
                    fatal += 1;
                }
            }
            Err(detail) => {
                let tag = if known { " (known, see decisions ledger)" } else { "" };
                println!("FAIL  {name:<34} {detail}{tag} [{secs:.1}s]");
                if strict || !known {
                    fatal += 1;
                }
            }
        }
    }
    println!("acceptance: {passed}/{} criteria passed", criteria.len());
    if fatal == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn record(t: &str, p: &str, confidence: f64) -> PredictionRecord {
    PredictionRecord {
        bbox_id: String::new(),
        crop_path: String::new(),
        true_label: t.to_string(),
        predicted_label: p.to_string(),
        confidence,
        certain: true,
        run_id: "run-001".into(),
        metadata: Metadata::new(),
    }
}

fn q_to_f64(q: Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

fn q_div(a: i64, b: i64) -> Q {
    if b == 0 {
        Q::from_integer(0)
    } else {
        Q::new(a, b)
    }
}

/// Per-class and weighted metrics straight from the definitions, in exact
/// rational arithmetic. Returns (accuracy, precision, recall, f1, per-class
/// [p, r, f1]).
fn oracle(pairs: &[(usize, usize)], g: usize) -> (Q, Q, Q, Q, Vec<[Q; 3]>) {
    let n = pairs.len() as i64;
    let correct = pairs.iter().filter(|(t, p)| t == p).count() as i64;
    let mut per = Vec::new();
    let (mut wp, mut wr, mut wf) = (Q::from_integer(0), Q::from_integer(0), Q::from_integer(0));
    for k in 0..g {
        let tp = pairs.iter().filter(|&&(t, p)| t == k && p == k).count() as i64;
        let predicted = pairs.iter().filter(|&&(_, p)| p == k).count() as i64;
        let support = pairs.iter().filter(|&&(t, _)| t == k).count() as i64;
        let p = q_div(tp, predicted);
        let r = q_div(tp, support);
        let f = if p + r == Q::from_integer(0) {
            Q::from_integer(0)
        } else {
            Q::from_integer(2) * p * r / (p + r)
        };
        let w = Q::new(support, n);
        wp += w * p;
        wr += w * r;
        wf += w * f;
        per.push([p, r, f]);
    }
    (Q::new(correct, n), wp, wr, wf, per)
}

fn metrics_oracle() -> Outcome {
    const LABELS: [&str; 3] = ["a", "b", "c"];
    const TOL: f64 = 1e-12;
    let scheme = ClassScheme::new("t", &LABELS).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let mut sequences = 0u64;
    let mut worst = 0.0f64;
    for len in 1..=6u32 {
        for code in 0..9u64.pow(len) {
            let mut c = code;
            let pairs: Vec<(usize, usize)> = (0..len)
                .map(|_| {
                    let v = (c % 9) as usize;
                    c /= 9;
                    (v / 3, v % 3)
                })
                .collect();
            let records: Vec<PredictionRecord> =
                pairs.iter().map(|&(t, p)| record(LABELS[t], LABELS[p], 0.9)).collect();
            let got = compute_metrics(&records, &scheme).map_err(|e| e.to_string())?;
            let (acc, p, r, f, per) = oracle(&pairs, 3);
            let mut check = |what: &str, got: f64, want: Q| -> Result<(), String> {
                let d = (got - q_to_f64(want)).abs();
                worst = worst.max(d);
                ensure(d <= TOL, || format!("{what} on {pairs:?}: got {got}, oracle {want}"))
            };
            check("accuracy", got.accuracy, acc)?;
            check("precision", got.precision, p)?;
            check("recall", got.recall, r)?;
            check("f1", got.f1, f)?;
            for (k, m) in got.per_class.iter().enumerate() {
                check("class precision", m.precision, per[k][0])?;
                check("class recall", m.recall, per[k][1])?;
                check("class f1", m.f1, per[k][2])?;
            }
            sequences += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || {
        format!("sweep took {:.1}s (limit 10s)", elapsed.as_secs_f64())
    })?;
    Ok(format!(
        "{sequences} sequences, max |error| {worst:.1e}, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn weighted_recall() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let all: Vec<String> = (0..8).map(|i| format!("c{i}")).collect();
    for fixture in 0..1000 {
        let g = rng.random_range(2..=8);
        let labels: Vec<&str> = all[..g].iter().map(String::as_str).collect();
        let scheme = ClassScheme::new("t", &labels).map_err(|e| e.to_string())?;
        let n = rng.random_range(1..=300);
        let records: Vec<PredictionRecord> = (0..n)
            .map(|_| record(labels[rng.random_range(0..g)], labels[rng.random_range(0..g)], 0.5))
            .collect();
        let m = compute_metrics(&records, &scheme).map_err(|e| e.to_string())?;
        ensure(m.recall.to_bits() == m.accuracy.to_bits(), || {
            format!("fixture {fixture}: recall {} != accuracy {}", m.recall, m.accuracy)
        })?;
        // the identity itself, independent of how the report stores it
        let total = n as i64;
        let weighted: Q = m
            .per_class
            .iter()
            .enumerate()
            .map(|(k, c)| Q::new(c.support as i64, total) * q_div(m.confusion[k][k] as i64, c.support as i64))
            .sum();
        let correct = records.iter().filter(|r| r.is_correct()).count() as i64;
        ensure(weighted == Q::new(correct, total), || {
            format!("fixture {fixture}: sum_k w_k r_k = {weighted}, accuracy {correct}/{total}")
        })?;
        ensure(m.accuracy == correct as f64 / total as f64, || {
            format!("fixture {fixture}: accuracy {} != {correct}/{total}", m.accuracy)
        })?;
    }
    Ok("1000 fixtures, recall bit-identical to accuracy".into())
}

/// Out-of-image cells of `[start, start + side)` on an axis of length
/// `len`, counted one by one: (before, inside, after).
fn coverage(start: i64, side: u32, len: u32) -> (u32, u32, u32) {
    let (mut before, mut inside, mut after) = (0, 0, 0);
    for p in start..start + i64::from(side) {
        if p < 0 {
            before += 1;
        } else if p >= i64::from(len) {
            after += 1;
        } else {
            inside += 1;
        }
    }
    (before, inside, after)
}

/// Random box whose pixel size is a multiple of 1/1000 px, so the expected
/// side is exact integer arithmetic.
fn random_box(rng: &mut ChaCha8Rng, w: u32, h: u32) -> (BBox, u64, u64) {
    let wu = rng.random_range(1..=u64::from(w) * 1000);
    let hu = rng.random_range(1..=u64::from(h) * 1000);
    let bw = wu as f64 / 1000.0 / f64::from(w);
    let bh = hu as f64 / 1000.0 / f64::from(h);
    let x = rng.random_range(0.0..=1.0 - bw).max(0.0);
    let y = rng.random_range(0.0..=1.0 - bh).max(0.0);
    (BBox::new(x, y, bw, bh), wu, hu)
}

fn crop(b: &BBox, dims: (u32, u32), s: CropStrategy) -> Result<CropSpec, String> {
    square_crop(b, dims, s, ShiftFallback::Pad).map_err(|e| e.to_string())
}

fn crop_geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut shifted, mut fell_back, mut padded_boxes) = (0, 0, 0);
    for i in 0..10_000 {
        let (w, h) = (rng.random_range(1..=2000u32), rng.random_range(1..=2000u32));
        let (b, wu, hu) = random_box(&mut rng, w, h);
        let want_side = wu.max(hu).div_ceil(1000) as u32;

        let pad = crop(&b, (w, h), CropStrategy::Pad)?;
        let shift = crop(&b, (w, h), CropStrategy::Shift)?;
        for (name, c) in [("pad", &pad), ("shift", &shift)] {
            ensure(c.side == want_side, || {
                format!("box {i} {name}: side {} != ceil(max) {want_side} for {b:?} in {w}x{h}", c.side)
            })?;
        }

        // pad: the centered square, margins exactly the out-of-image cells
        let (l, inside_x, r) = coverage(pad.left, pad.side, w);
        let (t, inside_y, bo) = coverage(pad.top, pad.side, h);
        ensure(
            (pad.pad.left, pad.pad.right, pad.pad.top, pad.pad.bottom) == (l, r, t, bo),
            || format!("box {i}: pad {:?} but coverage gives l{l} r{r} t{t} b{bo}", pad.pad),
        )?;
        ensure(l + inside_x + r == pad.side && t + inside_y + bo == pad.side, || {
            format!("box {i}: pad margins do not sum to side")
        })?;
        let (cx, cy) = b.centroid();
        let centered_left = (cx * f64::from(w) - f64::from(want_side) / 2.0 + 1e-9).floor() as i64;
        let centered_top = (cy * f64::from(h) - f64::from(want_side) / 2.0 + 1e-9).floor() as i64;
        ensure(pad.left == centered_left && pad.top == centered_top, || {
            format!("box {i}: pad rect ({}, {}) is not centered ({centered_left}, {centered_top})", pad.left, pad.top)
        })?;
        if !pad.pad.is_zero() {
            padded_boxes += 1;
        }

        // shift: inside the image with minimal translation, or fallback
        if want_side <= w && want_side <= h {
            ensure(!shift.fell_back && shift.pad.is_zero(), || format!("box {i}: shift padded"))?;
            let max_left = i64::from(w - want_side);
            let max_top = i64::from(h - want_side);
            ensure(
                (0..=max_left).contains(&shift.left) && (0..=max_top).contains(&shift.top),
                || format!("box {i}: shift rect ({}, {}) side {want_side} leaves {w}x{h}", shift.left, shift.top),
            )?;
            ensure(
                shift.left == centered_left.clamp(0, max_left) && shift.top == centered_top.clamp(0, max_top),
                || format!("box {i}: shift is not the minimal translation"),
            )?;
            ensure(f64::from(shift.side) * 1000.0 >= wu.max(hu) as f64, || {
                format!("box {i}: side smaller than the box")
            })?;
            if (shift.left, shift.top) != (pad.left, pad.top) {
                shifted += 1;
            }
        } else {
            ensure(shift.fell_back && shift.pad == pad.pad && shift.left == pad.left, || {
                format!("box {i}: oversized square did not fall back to pad")
            })?;
            fell_back += 1;
        }

        // doubling the image: relative box unchanged, geometry doubles
        let big = crop(&b, (2 * w, 2 * h), CropStrategy::Pad)?;
        ensure(big.side == 2 * pad.side || big.side + 1 == 2 * pad.side, || {
            format!("box {i}: side {} at 2x vs {} at 1x", big.side, pad.side)
        })?;
        for (axis, a, a2) in [("left", pad.left, big.left), ("top", pad.top, big.top)] {
            ensure((a2 - 2 * a).abs() <= 2, || {
                format!("box {i}: {axis} {a2} at 2x vs {a} at 1x (more than 1 px apart)")
            })?;
        }
    }

    // padded pixels are black, everything else is image content
    for i in 0..300 {
        let (w, h) = (rng.random_range(1..=120u32), rng.random_range(1..=120u32));
        let (b, _, _) = random_box(&mut rng, w, h);
        let img = image::RgbImage::from_pixel(w, h, image::Rgb([200, 17, 99]));
        let c = crop(&b, (w, h), CropStrategy::Pad)?;
        let out = extract_crop(&img, &c);
        for (x, y, p) in out.enumerate_pixels() {
            let ix = c.left + i64::from(x);
            let iy = c.top + i64::from(y);
            let outside = ix < 0 || iy < 0 || ix >= i64::from(w) || iy >= i64::from(h);
            let want = if outside { [0, 0, 0] } else { [200, 17, 99] };
            ensure(p.0 == want, || format!("crop {i}: pixel ({x},{y}) is {:?}", p.0))?;
        }
    }
    Ok(format!(
        "10000 boxes, 0 violations ({shifted} shifted, {fell_back} fell back, {padded_boxes} padded)"
    ))
}

fn manifest(entries: Vec<ManifestEntry>) -> DatasetManifest {
    DatasetManifest {
        scheme: ClassScheme::new("t", &["a", "b", "c", "d"]).unwrap(),
        entries,
        provenance: Provenance {
            config_fingerprint: String::new(),
            detections_file: String::new(),
            annotations_file: String::new(),
        },
    }
}

fn split_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ties = 0;
    for m in 0..1000 {
        let strata = rng.random_range(1..=6);
        let n = rng.random_range(1..=120);
        let entries: Vec<ManifestEntry> = (0..n)
            .map(|i| {
                let mut metadata = Metadata::new();
                metadata.insert("camera".into(), format!("cam{}", rng.random_range(0..strata)));
                ManifestEntry {
                    bbox_id: format!("img{i:04}#0"),
                    image_id: format!("img{i:04}"),
                    crop_path: String::new(),
                    label: "a".into(),
                    class_index: 0,
                    confidence: 0.99,
                    split: None,
                    metadata,
                }
            })
            .collect();
        let manifest = manifest(entries);
        let mut sizes: BTreeMap<String, i64> = BTreeMap::new();
        for e in &manifest.entries {
            *sizes.entry(e.metadata["camera"].clone()).or_default() += 1;
        }
        let seed = rng.random::<u64>();
        for percent in [20i64, 15] {
            let fraction = percent as f64 / 100.0;
            let (kept, held) =
                stratified_split(&manifest, fraction, "camera", seed).map_err(|e| e.to_string())?;
            ensure(kept.len() + held.len() == n, || format!("manifest {m}: ids lost"))?;
            let mut all: Vec<&String> = kept.iter().chain(&held).collect();
            all.sort();
            all.dedup();
            ensure(all.len() == n, || format!("manifest {m}: an id landed in both partitions"))?;
            for (stratum, &size) in &sizes {
                let got = held.iter().filter(|id| stratum_of(&manifest, id) == stratum).count() as i64;
                // round(percent * size / 100) in integers; .5 admits both neighbours
                let twice = 2 * percent * size;
                let floor = percent * size / 100;
                let tie = twice % 200 == 100;
                let ok = if tie {
                    ties += 1;
                    got == floor || got == floor + 1
                } else {
                    got == (twice + 100) / 200
                };
                ensure(ok, || {
                    format!("manifest {m}, {percent}%: stratum {stratum} of {size} held out {got}")
                })?;
            }
            let again = stratified_split(&manifest, fraction, "camera", seed).map_err(|e| e.to_string())?;
            ensure(again == (kept.clone(), held.clone()), || {
                format!("manifest {m}: same seed gave a different split")
            })?;
        }
    }
    Ok(format!("1000 manifests at 80/20 and 85/15, {ties} half-way strata"))
}

fn stratum_of<'a>(manifest: &'a DatasetManifest, id: &str) -> &'a str {
    let e = manifest.entries.iter().find(|e| e.bbox_id == id).expect("id from manifest");
    &e.metadata["camera"]
}

fn gradient_check() -> Outcome {
    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for trial in 0..4 {
        let classes = 2 + trial % 3;
        let model = ClassifierModel::random(Backbone::Resnet50, classes, 16, 100 + trial as u64);
        let img = image::RgbImage::from_fn(16, 16, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]));
        let input = Tensor::from_image(&img);
        let target = rng.random_range(0..classes);
        let weight = rng.random_range(0.5..2.0);
        let n = model.blocks.len();
        let (_, grads) = model.loss_and_gradients(&input, target, weight, n);
        let loss_at = |m: &ClassifierModel| m.loss_and_gradients(&input, target, weight, n).0;

        let params = model.head.weight.len() + model.head.bias.len();
        for idx in 0..params {
            let mut plus = model.clone();
            let mut minus = model.clone();
            let (analytic, p, q) = if idx < model.head.weight.len() {
                (grads.head_weight[idx], &mut plus.head.weight[idx], &mut minus.head.weight[idx])
            } else {
                let j = idx - model.head.weight.len();
                (grads.head_bias[j], &mut plus.head.bias[j], &mut minus.head.bias[j])
            };
            *p += H;
            *q -= H;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * H);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            checked += 1;
            ensure(rel < 1e-3, || {
                format!("trial {trial}, head param {idx}: analytic {analytic}, numeric {numeric}")
            })?;
        }
    }
    Ok(format!("{checked} head parameters, max relative error {worst:.1e}"))
}

fn table_fixtures() -> Outcome {
    let counts = |pairs: &[(&str, u64)]| -> BTreeMap<String, u64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    };
    let groups = [
        (
            "sex",
            counts(&[("female", 1928), ("male", 1351), ("unknown", 148)]),
            0.862,
            counts(&[("female", 417), ("male", 262), ("unknown", 24)]),
            0.667,
        ),
        (
            "age",
            counts(&[("adult", 2946), ("juvenile", 517), ("yearling", 420), ("unknown", 84)]),
            0.820,
            counts(&[("adult", 573), ("juvenile", 59), ("yearling", 92), ("unknown", 12)]),
            0.538,
        ),
    ];
    let mut worst = (0.0f64, String::new());
    let mut violations = Vec::new();
    for (group, overall, f_overall, high, f_high) in &groups {
        let a = unknown_quality_adjustment(overall, "unknown", *f_overall).map_err(|e| e.to_string())?;
        let b = unknown_quality_adjustment(high, "unknown", *f_high).map_err(|e| e.to_string())?;
        for (class, p_all) in &a.percentages {
            let p_high = b.percentages[class];
            let gap = (p_all - p_high).abs();
            if gap > worst.0 {
                worst = (gap, format!("{group}/{class}"));
            }
            if gap > 5.0 {
                violations.push(format!(
                    "{group}/{class}: overall {p_all:.2}% vs high-confidence {p_high:.2}% ({gap:.2} pp > 5 pp)"
                ));
            }
        }
    }
    if violations.is_empty() {
        Ok(format!("largest gap {:.2} pp ({})", worst.0, worst.1))
    } else {
        Err(violations.join("; "))
    }
}

fn uncertainty_accounting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels = ["a", "b", "c"];
    let scheme = ClassScheme::new("t", &labels).map_err(|e| e.to_string())?;
    for fixture in 0..1000 {
        let n = rng.random_range(1..=200);
        let mut records: Vec<PredictionRecord> = (0..n)
            .map(|_| {
                // coarse grid so thresholds often hit a confidence exactly
                let conf = f64::from(rng.random_range(0..=20u32)) / 20.0;
                record(labels[rng.random_range(0..3)], labels[rng.random_range(0..3)], conf)
            })
            .collect();
        let ut = f64::from(rng.random_range(0..=20u32)) / 20.0;
        let m = evaluate_records(&mut records, &scheme, ut, false).map_err(|e| e.to_string())?;
        ensure(m.n_certain + m.n_uncertain == n, || {
            format!("fixture {fixture}: {} + {} != {n}", m.n_certain, m.n_uncertain)
        })?;
        let by_hand = records.iter().filter(|r| r.confidence >= ut).count();
        ensure(m.n_certain == by_hand && records.iter().all(|r| r.certain == (r.confidence >= ut)), || {
            format!("fixture {fixture}: {} certain, expected {by_hand}", m.n_certain)
        })?;

        let mut previous = usize::MAX;
        for step in 0..=40 {
            let t = f64::from(step) / 40.0;
            let (certain, uncertain) = apply_uncertainty_threshold(&mut records, t);
            ensure(certain.len() + uncertain.len() == n, || format!("fixture {fixture}: records lost"))?;
            ensure(certain.len() <= previous, || {
                format!("fixture {fixture}: n_certain rose to {} at ut {t}", certain.len())
            })?;
            previous = certain.len();
        }
    }
    Ok("1000 fixtures, counts conserved and monotone in ut".into())
}

/// Runs the `demo` subcommand once; both demo criteria read its outputs.
/// Returns the demo root and the wall-clock time of the run.
fn demo_run() -> Result<(&'static Path, Duration), String> {
    use std::sync::OnceLock;
    static DEMO: OnceLock<Result<(tempfile::TempDir, Duration), String>> = OnceLock::new();
    let result = DEMO.get_or_init(|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let start = Instant::now();
        let out = Command::new(env!("CARGO_BIN_EXE_camtrap"))
            .arg("demo")
            .arg("--dir")
            .arg(dir.path())
            .output()
            .map_err(|e| format!("cannot start camtrap: {e}"))?;
        if !out.status.success() {
            return Err(format!(
                "demo exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("")
            ));
        }
        Ok((dir, start.elapsed()))
    });
    result.as_ref().map(|(d, t)| (d.path(), *t)).map_err(Clone::clone)
}

fn end_to_end_demo() -> Outcome {
    let (dir, elapsed) = demo_run()?;
    let config = load_config(&dir.join("demo.toml")).map_err(|e| e.to_string())?;
    let agg_path = config.io.model_dir.join(config.experiment_id()).join("aggregate.json");
    let agg = ExperimentAggregate::load(&agg_path).map_err(|e| e.to_string())?;
    ensure(agg.iterations == 3, || format!("{} runs, expected 3", agg.iterations))?;
    ensure(elapsed < Duration::from_secs(600), || {
        format!("demo took {:.0}s (limit 600s)", elapsed.as_secs_f64())
    })?;
    ensure(agg.accuracy >= 0.90, || format!("aggregate accuracy {:.4} < 0.90", agg.accuracy))?;
    Ok(format!(
        "aggregate accuracy {:.4} over {} runs, demo wall time {:.1}s",
        agg.accuracy,
        agg.iterations,
        elapsed.as_secs_f64()
    ))
}

fn freeze_contract() -> Outcome {
    let (dir, _) = demo_run()?;
    let config = load_config(&dir.join("demo.toml")).map_err(|e| e.to_string())?;
    let depth = config.training.finetune_stage.unfrozen_depth;
    let runs = config.io.model_dir.join(config.experiment_id()).join("runs");
    let mut checked = 0;
    let mut entries: Vec<_> = std::fs::read_dir(&runs)
        .map_err(|e| format!("{}: {e}", runs.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for run in entries {
        let bytes = std::fs::read(run.join("train_record.json")).map_err(|e| e.to_string())?;
        let rec: TrainRecord = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
        let [transfer, finetune] = rec.stages.as_slice() else {
            return Err(format!("{}: expected two stages", rec.run_id));
        };
        ensure(transfer.backbone_checksums_before == transfer.backbone_checksums_after, || {
            format!("{}: backbone changed during the transfer stage", rec.run_id)
        })?;
        ensure(transfer.head_checksum_before != transfer.head_checksum_after, || {
            format!("{}: head did not move during the transfer stage", rec.run_id)
        })?;
        let n = finetune.backbone_checksums_before.len();
        for i in 0..n {
            let changed = finetune.backbone_checksums_before[i] != finetune.backbone_checksums_after[i];
            let should = i >= n - depth;
            ensure(changed == should, || {
                format!("{}: fine-tune block {i} changed={changed}, unfrozen depth {depth}", rec.run_id)
            })?;
        }
        ensure(finetune.head_checksum_before != finetune.head_checksum_after, || {
            format!("{}: head did not move during fine-tuning", rec.run_id)
        })?;
        checked += 1;
    }
    ensure(checked == 3, || format!("found {checked} train records, expected 3"))?;
    Ok(format!("{checked} demo runs; fine-tuning moved the last {depth} block(s) plus the head"))
}
