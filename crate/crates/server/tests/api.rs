use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use camtrap_core::config::CropStrategy;
use camtrap_core::data::{save_detections, AnnotationSet, BBox, ClassScheme, Detection};
use camtrap_core::eval::{aggregate_runs, compute_metrics, PredictionRecord, RunResult};
use camtrap_core::store::ExperimentStore;
use camtrap_core::train::{BestCheckpoint, TrainRecord, WeightsSource};
use camtrap_core::ExperimentConfig;
use camtrap_server::{revision, router, AppState, DatasetSource};

struct Fixture {
    _dir: tempfile::TempDir,
    app: Router,
    data_dir: PathBuf,
    store: ExperimentStore,
}

fn detection(id: &str, image: &str, bbox: BBox, conf: f64) -> Detection {
    Detection {
        bbox_id: id.into(),
        image_id: image.trim_end_matches(".png").into(),
        image_path: image.into(),
        category: 0,
        bbox,
        confidence: conf,
        extra: Default::default(),
    }
}

fn record(id: &str, t: &str, p: &str, conf: f64, certain: bool) -> PredictionRecord {
    PredictionRecord {
        bbox_id: id.into(),
        crop_path: format!("/crops/{id}.png"),
        true_label: t.into(),
        predicted_label: p.into(),
        confidence: conf,
        certain,
        run_id: "run-001".into(),
        metadata: BTreeMap::new(),
    }
}

fn seed_store(root: &Path) -> ExperimentStore {
    let store = ExperimentStore::new(root);
    let cfg = ExperimentConfig::from_toml_str(
        "[io]\ndata_dir = \"d\"\noutput_dir = \"o\"\nmodel_dir = \"m\"\nexperiment_name = \"sex-demo\"\n[training]\ntarget_scheme = \"sex\"\n",
    )
    .unwrap();
    let exp = store.open_or_create(&cfg).unwrap();
    let scheme = ClassScheme::new("sex", &["female", "male", "unknown"]).unwrap();
    let mut results = Vec::new();
    for (i, run) in ["run-001", "run-002"].iter().enumerate() {
        let recs = vec![
            record("a", "female", "female", 0.9, true),
            record("b", "male", "female", 0.8, true),
            record("c", "male", "male", 0.95, true),
            record("d", "female", "male", 0.7, i == 0),
        ];
        let metrics = compute_metrics(&recs, &scheme).unwrap();
        let result = RunResult {
            run_id: run.to_string(),
            seed: 42 + i as u64,
            config_fingerprint: exp.config_fingerprint.clone(),
            uncertainty_threshold: 0.75,
            exclude_uncertain: true,
            metrics,
            stratify_attribute: None,
            stratified: BTreeMap::new(),
        };
        let tr = TrainRecord {
            run_id: run.to_string(),
            seed: 42 + i as u64,
            config_fingerprint: exp.config_fingerprint.clone(),
            backbone: "resnet50".into(),
            weights_source: WeightsSource::Random,
            n_train: 10,
            n_val: 2,
            class_weights: vec![1.0; 3],
            stages: vec![],
            best: BestCheckpoint {
                stage: "finetune".into(),
                epoch: 1,
                val_accuracy: 1.0,
                val_loss: 0.1,
            },
            checkpoint_path: store.checkpoint_path("sex-demo", run),
        };
        store.save_train_record("sex-demo", &tr, false).unwrap();
        let errors: Vec<_> = recs.iter().filter(|r| r.certain && !r.is_correct()).cloned().collect();
        let uncertain: Vec<_> = recs.iter().filter(|r| !r.certain).cloned().collect();
        store.save_result("sex-demo", &result, &errors, &uncertain).unwrap();
        results.push(result);
    }
    store.save_aggregate("sex-demo", &aggregate_runs(&results).unwrap()).unwrap();
    store
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("deer");
    std::fs::create_dir_all(&data_dir).unwrap();
    image::RgbImage::from_pixel(100, 50, image::Rgb([10, 20, 30]))
        .save(data_dir.join("img1.png"))
        .unwrap();
    save_detections(
        &data_dir.join("detections.json"),
        &[
            detection("img1#0", "img1.png", BBox::new(0.1, 0.2, 0.3, 0.4), 0.97),
            detection("img1#1", "img1.png", BBox::new(0.8, 0.5, 0.2, 0.5), 0.5),
        ],
    )
    .unwrap();
    let mut ann = AnnotationSet::default();
    ann.upsert_scheme(ClassScheme::new("age", &["adult", "juvenile", "yearling", "unknown"]).unwrap())
        .unwrap();
    ann.save(&data_dir.join("annotations.json")).unwrap();

    let store = seed_store(&dir.path().join("models"));
    let static_dir = dir.path().join("ui");
    std::fs::create_dir_all(&static_dir).unwrap();
    std::fs::write(static_dir.join("index.html"), "<h1>ui</h1>").unwrap();
    let state = AppState::new(
        vec![DatasetSource {
            id: "deer".into(),
            data_dir: data_dir.clone(),
            detections_path: data_dir.join("detections.json"),
            annotations_path: data_dir.join("annotations.json"),
            crop_strategy: CropStrategy::Shift,
        }],
        store.clone(),
        Some(static_dir),
    );
    Fixture {
        _dir: dir,
        app: router(Arc::new(state)),
        data_dir,
        store,
    }
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, body)
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, _, b) = send(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn put_json(uri: &str, body: Value, if_match: Option<&str>) -> Request<Body> {
    let mut b = Request::put(uri).header(header::CONTENT_TYPE, "application/json");
    if let Some(r) = if_match {
        b = b.header(header::IF_MATCH, format!("\"{r}\""));
    }
    b.body(Body::from(body.to_string())).unwrap()
}

#[tokio::test]
async fn datasets_and_detections() {
    let f = fixture();
    let (s, v) = get_json(&f.app, "/datasets").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v[0]["id"], "deer");
    assert_eq!(v[0]["detections"], 2);
    let (s, v) = get_json(&f.app, "/datasets/deer/detections").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v.as_array().unwrap().len(), 2);
    let (s, _) = get_json(&f.app, "/datasets/nope/detections").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn annotation_write_then_read() {
    let f = fixture();
    let rev = revision(&f.data_dir.join("annotations.json"));
    let (s, _, _) = send(
        &f.app,
        put_json("/datasets/deer/annotations/img1%230", json!({"age": "adult"}), Some(&rev)),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let (_, v) = get_json(&f.app, "/datasets/deer/annotations").await;
    assert_eq!(v["annotations"]["records"]["img1#0"]["age"], "adult");

    // a fresh server over the same files sees the label
    let reloaded = AnnotationSet::load_or_default(&f.data_dir.join("annotations.json")).unwrap();
    assert_eq!(reloaded.label("img1#0", "age").value(), Some("adult"));
}

#[tokio::test]
async fn stale_or_missing_revision_conflicts() {
    let f = fixture();
    let rev = revision(&f.data_dir.join("annotations.json"));
    let req = || put_json("/datasets/deer/annotations/img1%230", json!({"age": "juvenile"}), Some(&rev));
    assert_eq!(send(&f.app, req()).await.0, StatusCode::OK);
    // second write with the old revision
    assert_eq!(send(&f.app, req()).await.0, StatusCode::CONFLICT);
    let (s, _, _) = send(&f.app, put_json("/datasets/deer/annotations/img1%230", json!({"age": "adult"}), None)).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn invalid_label_is_unprocessable() {
    let f = fixture();
    let rev = revision(&f.data_dir.join("annotations.json"));
    let (s, _, _) = send(
        &f.app,
        put_json("/datasets/deer/annotations/img1%230", json!({"age": "alien"}), Some(&rev)),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _, _) = send(
        &f.app,
        put_json("/datasets/deer/annotations/missing%230", json!({"age": "adult"}), Some(&rev)),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn schemes_create_update_and_guard_used_labels() {
    let f = fixture();
    let (s, _, _) = send(
        &f.app,
        put_json("/datasets/deer/schemes", json!({"name": "sex", "labels": ["female", "male", "unknown"]}), None),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let (_, v) = get_json(&f.app, "/datasets/deer/schemes").await;
    assert_eq!(v.as_array().unwrap().len(), 2);
    assert_eq!(v[1]["labels"].as_array().unwrap().len(), 3);

    let rev = revision(&f.data_dir.join("annotations.json"));
    send(&f.app, put_json("/datasets/deer/annotations/img1%230", json!({"sex": "male"}), Some(&rev))).await;
    let (s, _, _) = send(
        &f.app,
        put_json("/datasets/deer/schemes", json!({"name": "sex", "labels": ["female", "unknown"]}), None),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    // adding a label is fine
    let (s, _, _) = send(
        &f.app,
        put_json("/datasets/deer/schemes", json!({"name": "sex", "labels": ["female", "male", "unknown", "other"]}), None),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn images_full_and_crop() {
    let f = fixture();
    let (s, h, body) = send(&f.app, Request::get("/images/img1%230?mode=full").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(h[header::CONTENT_TYPE], "image/png");
    assert_eq!(h["x-bbox"], "0.1,0.2,0.3,0.4");
    assert_eq!(h["x-image-size"], "100x50");
    assert_eq!(body, std::fs::read(f.data_dir.join("img1.png")).unwrap());

    let (s, h, body) = send(&f.app, Request::get("/images/img1%230?mode=crop").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    // 30x20 px box -> 30 px square
    assert_eq!(h["x-crop"], "10,5,30");
    let crop = image::load_from_memory(&body).unwrap();
    assert_eq!((crop.width(), crop.height()), (30, 30));

    let (s, _, _) = send(&f.app, Request::get("/images/zzz?mode=crop").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _, _) = send(&f.app, Request::get("/images/img1%230?mode=thumb").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn experiments_match_store() {
    let f = fixture();
    let (s, v) = get_json(&f.app, "/experiments").await;
    assert_eq!(s, StatusCode::OK);
    let agg = f.store.load_aggregate("sex-demo").unwrap().unwrap();
    assert_eq!(v[0]["experiment_id"], "sex-demo");
    assert_eq!(v[0]["aggregate"]["iterations"], 2);
    assert_eq!(v[0]["aggregate"]["accuracy"].as_f64().unwrap(), agg.accuracy);
    let (_, v) = get_json(&f.app, "/experiments?scheme=age").await;
    assert!(v.as_array().unwrap().is_empty());

    let (s, v) = get_json(&f.app, "/experiments/sex-demo").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["aggregate"]["f1"].as_f64().unwrap(), agg.f1);
    assert_eq!(v["runs"].as_array().unwrap().len(), 2);
    assert_eq!(get_json(&f.app, "/experiments/nope").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn review_pages_and_filters() {
    let f = fixture();
    let (s, v) = get_json(&f.app, "/experiments/sex-demo/runs/run-001/errors").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["total"], 2);
    let (_, v) = get_json(&f.app, "/experiments/sex-demo/runs/run-001/errors?predicted=female").await;
    assert_eq!(v["total"], 1);
    assert_eq!(v["items"][0]["crop_path"], "/crops/b.png");
    let (_, v) = get_json(&f.app, "/experiments/sex-demo/runs/run-001/errors?per_page=1&page=2").await;
    assert_eq!(v["items"].as_array().unwrap().len(), 1);
    assert_eq!(v["total"], 2);
    let (_, v) = get_json(&f.app, "/experiments/sex-demo/runs/run-002/uncertain").await;
    assert_eq!(v["total"], 1);
    let (_, v) = get_json(&f.app, "/experiments/sex-demo/runs/run-001/uncertain").await;
    assert_eq!(v["total"], 0);
    assert_eq!(get_json(&f.app, "/experiments/sex-demo/runs/run-009/errors").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get_json(&f.app, "/experiments/sex-demo/runs/run-001/bogus").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn confusion_per_run_and_pooled() {
    let f = fixture();
    let (s, v) = get_json(&f.app, "/experiments/sex-demo/confusion?run=aggregate").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["labels"], json!(["female", "male", "unknown"]));
    let (_, one) = get_json(&f.app, "/experiments/sex-demo/confusion?run=run-001").await;
    assert_eq!(one["matrix"], json!([[1, 1, 0], [1, 1, 0], [0, 0, 0]]));
    let pooled: u64 = v["matrix"].as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap()).map(|x| x.as_u64().unwrap()).sum();
    assert_eq!(pooled, 8);
    assert_eq!(get_json(&f.app, "/experiments/sex-demo/confusion?run=run-404").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn static_ui_is_served() {
    let f = fixture();
    let (s, h, b) = send(&f.app, Request::get("/").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert!(h[header::CONTENT_TYPE].to_str().unwrap().starts_with("text/html"));
    assert_eq!(b, b"<h1>ui</h1>");
    let (s, _, _) = send(&f.app, Request::get("/../secret").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}
