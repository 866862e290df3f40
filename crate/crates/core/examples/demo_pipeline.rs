//! The full pipeline on generated data: detect, enrich, annotate,
//! preprocess, split, train and evaluate.
//!
//! Usage: cargo run --release -p camtrap-core --example demo_pipeline [DIR]

use std::path::PathBuf;

use camtrap_core::demo::run_demo;

fn main() -> camtrap_core::Result<()> {
    let root = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("camtrap-demo-example"));
    let outcome = run_demo(&root, true)?;
    let a = &outcome.aggregate;
    println!("{} detections, {} crops", outcome.detections, outcome.crops);
    println!(
        "{}: {} runs, accuracy {:.4}, f1 {:.4}, {:.1} certain / {:.1} excluded per run",
        outcome.experiment_id, a.iterations, a.accuracy, a.f1, a.mean_n_certain, a.mean_n_excluded
    );
    println!("pooled confusion {:?} over {:?}", a.confusion, a.labels);
    println!("config: {}", outcome.config_path.display());
    Ok(())
}
