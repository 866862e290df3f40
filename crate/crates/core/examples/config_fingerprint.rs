//! Parse an experiment config, print its fingerprint, and show how config
//! errors point at the offending key.

use camtrap_core::demo::DEMO_CONFIG;
use camtrap_core::ExperimentConfig;

fn main() -> camtrap_core::Result<()> {
    let config = ExperimentConfig::from_toml_str(DEMO_CONFIG)?;
    println!("experiment  {}", config.experiment_id());
    println!("fingerprint {}", config.fingerprint());

    let mut tweaked = config.clone();
    tweaked.training.finetune_stage.unfrozen_depth = 2;
    println!("unfrozen_depth = 2 -> {}", tweaked.fingerprint());

    // Key order and comments do not matter.
    let reparsed = ExperimentConfig::from_toml_str(&config.to_toml_string())?;
    assert_eq!(reparsed.fingerprint(), config.fingerprint());

    for broken in [
        DEMO_CONFIG.replace("unfrozen_depth", "unfrozen_dept"),
        DEMO_CONFIG.replace("uncertainty_threshold = 0.5", "uncertainty_threshold = 1.5"),
        DEMO_CONFIG.replace("backbone = \"resnet50\"", "backbone = \"alexnet\""),
    ] {
        let err = ExperimentConfig::from_toml_str(&broken).unwrap_err();
        println!("rejected: {err}");
    }
    Ok(())
}
