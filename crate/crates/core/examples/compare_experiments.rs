//! Side-by-side comparison of every experiment in a store.
//!
//! Usage: cargo run -p camtrap-core --example compare_experiments [MODEL_DIR]
//! Without an argument the demo is run first and its store is used.

use std::path::PathBuf;

use camtrap_core::config::load_config;
use camtrap_core::demo::run_demo;
use camtrap_core::pipeline::{compare, evaluate_stage, format_comparison};
use camtrap_core::store::ExperimentStore;

fn main() -> camtrap_core::Result<()> {
    let model_dir = match std::env::args_os().nth(1) {
        Some(dir) => PathBuf::from(dir),
        None => {
            let root = std::env::temp_dir().join("camtrap-compare-example");
            let outcome = run_demo(&root, true)?;
            // a stricter threshold on the same checkpoints
            let config = load_config(&outcome.config_path)?;
            let strict = evaluate_stage(&config, Some(0.999))?;
            println!("ut 0.999 leaves {:.1} certain per run", strict.mean_n_certain);
            evaluate_stage(&config, None)?;
            config.io.model_dir
        }
    };
    let rows = compare(&ExperimentStore::new(&model_dir), None)?;
    print!("{}", format_comparison(&rows));
    Ok(())
}
