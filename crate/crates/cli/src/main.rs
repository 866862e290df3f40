//! `camtrap`: one subcommand per pipeline stage, plus a self-contained demo.

use std::collections::BTreeMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use camtrap_core::config::load_config;
use camtrap_core::data::BoxConvention;
use camtrap_core::detect::{DetectorAdapter, ExternalDetector, JoinKey, StubDetector, DEFAULT_MIN_WRITE_CONFIDENCE};
use camtrap_core::pipeline::{self, ComparisonRow};
use camtrap_core::store::ExperimentStore;
use camtrap_core::{demo, Error, ExperimentConfig};
use camtrap_server::AppState;

#[derive(Parser)]
#[command(name = "camtrap", version, about = "Camera-trap image classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration file.
    #[arg(long, short)]
    config: PathBuf,
    /// Refuse to replace outputs that already exist.
    #[arg(long)]
    no_overwrite: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum DetectorKind {
    /// Deterministic placeholder boxes derived from image bytes.
    Stub,
    /// Run `--program` once per image.
    External,
}

#[derive(Clone, Copy, ValueEnum)]
enum Convention {
    RelativeXywh,
    AbsoluteXywh,
    AbsoluteXyxy,
}

impl From<Convention> for BoxConvention {
    fn from(c: Convention) -> Self {
        match c {
            Convention::RelativeXywh => BoxConvention::RelativeXywh,
            Convention::AbsoluteXywh => BoxConvention::AbsoluteXywh,
            Convention::AbsoluteXyxy => BoxConvention::AbsoluteXyxy,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Join {
    ImageId,
    BboxId,
}

#[derive(Subcommand)]
enum Command {
    /// Run an animal detector over the image directory.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "external")]
        detector: DetectorKind,
        /// Detector executable (external detector).
        #[arg(long, required_if_eq("detector", "external"))]
        program: Option<PathBuf>,
        /// Extra argument passed before the image path; repeatable.
        #[arg(long = "arg", allow_hyphen_values = true)]
        args: Vec<String>,
        #[arg(long, value_enum, default_value = "relative-xywh")]
        convention: Convention,
        /// Category remapping `from:to`, e.g. `1:0`; repeatable.
        #[arg(long = "category-map", value_parser = parse_category)]
        category_map: Vec<(i64, i64)>,
        #[arg(long, default_value = "unknown")]
        detector_version: String,
        /// Boxes below this detector confidence are not written at all.
        #[arg(long, default_value_t = DEFAULT_MIN_WRITE_CONFIDENCE)]
        min_confidence: f64,
    },
    /// Serve the annotation/results API (and UI, if given) on localhost.
    AnnotateServe {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long, default_value = camtrap_server::DEFAULT_ADDR)]
        addr: SocketAddr,
        /// Directory with the built web UI.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
    /// Merge a CSV/TSV metadata table into the annotations file.
    Enrich {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long, value_enum, default_value = "image-id")]
        join: Join,
    },
    /// Filter, crop and rescale detections into the training manifest.
    Preprocess {
        #[command(flatten)]
        common: Common,
    },
    /// Stratified train/test split of the manifest.
    Split {
        #[command(flatten)]
        common: Common,
    },
    /// Two-stage training, once per configured repeat.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate every trained run and write the experiment aggregate.
    Evaluate {
        #[arg(long, short)]
        config: PathBuf,
        /// Override `evaluation.uncertainty_threshold`.
        #[arg(long)]
        uncertainty_threshold: Option<f64>,
    },
    /// Cross-experiment summary table.
    Compare {
        /// Config whose `io.model_dir` is the store to read.
        #[arg(long, short, required_unless_present = "store")]
        config: Option<PathBuf>,
        /// Experiment store directory (instead of --config).
        #[arg(long)]
        store: Option<PathBuf>,
        /// Only experiments for this class scheme.
        #[arg(long)]
        scheme: Option<String>,
        /// Machine-readable output.
        #[arg(long)]
        json: bool,
    },
    /// Generate synthetic data and run the whole pipeline on it.
    Demo {
        #[arg(long, default_value = "camtrap-demo")]
        dir: PathBuf,
        #[arg(long)]
        no_overwrite: bool,
    },
}

fn parse_category(s: &str) -> Result<(i64, i64), String> {
    let (a, b) = s.split_once(':').ok_or("expected `from:to`")?;
    Ok((
        a.trim().parse().map_err(|e| format!("{e}"))?,
        b.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

/// Log to stderr and to a per-stage file.
struct Tee {
    file: Option<std::fs::File>,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        if let Some(f) = &mut self.file {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        std::io::stderr().flush()
    }
}

fn init_logging(log_file: Option<&Path>) {
    let file = log_file.and_then(|p| {
        std::fs::create_dir_all(p.parent()?).ok()?;
        std::fs::File::create(p).ok()
    });
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Pipe(Box::new(Tee { file })))
        .try_init();
}

fn stage_log(config: &ExperimentConfig, stage: &str) -> PathBuf {
    config.io.output_dir.join("logs").join(format!("{stage}.log"))
}

fn fail(err: &Error, log: Option<&Path>) -> ExitCode {
    match log {
        Some(p) => eprintln!("error: {err} (log: {})", p.display()),
        None => eprintln!("error: {err}"),
    }
    ExitCode::from(err.kind().exit_code() as u8)
}

/// Load the config, set up logging for `stage`, run `f`.
fn with_config<T>(path: &Path, stage: &str, f: impl FnOnce(&ExperimentConfig) -> camtrap_core::Result<T>) -> ExitCode
where
    T: std::fmt::Debug,
{
    let config = match load_config(path) {
        Ok(c) => c,
        Err(e) => {
            init_logging(None);
            return fail(&e, None);
        }
    };
    let log = stage_log(&config, stage);
    init_logging(Some(&log));
    match f(&config) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => fail(&e, Some(&log)),
    }
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn compare(store: &ExperimentStore, scheme: Option<&str>, json: bool) -> camtrap_core::Result<Vec<ComparisonRow>> {
    let rows = pipeline::compare(store, scheme)?;
    let table = pipeline::format_comparison(&rows);
    let body = serde_json::to_vec_pretty(&rows).expect("serializable");
    if store.root.is_dir() {
        let txt = store.root.join("comparison.txt");
        let js = store.root.join("comparison.json");
        camtrap_core::fsutil::write_atomic(&txt, table.as_bytes()).map_err(|e| Error::io(&txt, e))?;
        camtrap_core::fsutil::write_atomic(&js, &body).map_err(|e| Error::io(&js, e))?;
    }
    if json {
        print_json(&rows);
    } else {
        print!("{table}");
    }
    Ok(rows)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Detect {
            common,
            detector,
            program,
            args,
            convention,
            category_map,
            detector_version,
            min_confidence,
        } => with_config(&common.config, "detect", |cfg| {
            let adapter: Box<dyn DetectorAdapter> = match detector {
                DetectorKind::Stub => Box::new(StubDetector::Hashed),
                DetectorKind::External => Box::new(ExternalDetector {
                    program: program.clone().expect("clap enforces --program"),
                    args: args.clone(),
                    convention: convention.into(),
                    category_map: category_map.iter().copied().collect::<BTreeMap<_, _>>(),
                    version: detector_version.clone(),
                }),
            };
            let report = pipeline::detect_stage(cfg, adapter.as_ref(), min_confidence, !common.no_overwrite)?;
            log::info!(
                "{} images, {} detections written to {}",
                report.images_scanned,
                report.detections_written,
                cfg.detections_path().display()
            );
            Ok(())
        }),
        Command::AnnotateServe { config, addr, ui_dir } => with_config(&config, "annotate-serve", |cfg| {
            let state = Arc::new(AppState::from_config(cfg, ui_dir.clone()));
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
            rt.block_on(async {
                let server = camtrap_server::serve(state, addr);
                tokio::select! {
                    r = server => r,
                    _ = tokio::signal::ctrl_c() => Ok(()),
                }
            })
            .map_err(|e| Error::io(addr.to_string(), e))
        }),
        Command::Enrich { config, table, join } => with_config(&config, "enrich", |cfg| {
            let join = match join {
                Join::ImageId => JoinKey::ImageId,
                Join::BboxId => JoinKey::BboxId,
            };
            let r = pipeline::enrich_stage(cfg, &table, join)?;
            log::info!(
                "{} detections matched, {} unmatched, {} values overwritten",
                r.matched,
                r.unmatched,
                r.overwritten.len()
            );
            Ok(())
        }),
        Command::Preprocess { common } => with_config(&common.config, "preprocess", |cfg| {
            let out = pipeline::preprocess_stage(cfg, !common.no_overwrite)?;
            let r = &out.report;
            log::info!(
                "{} crops written ({} below threshold, {} unlabeled, {} without annotation, {} shift fallbacks)",
                r.crops_written,
                r.below_confidence_threshold,
                r.unlabeled,
                r.missing_annotation,
                r.shift_fallbacks.len()
            );
            Ok(())
        }),
        Command::Split { common } => with_config(&common.config, "split", |cfg| {
            let s = pipeline::split_stage(cfg, !common.no_overwrite)?;
            log::info!(
                "{} train / {} test, stratified on `{}` ({:.1}% of images straddle partitions)",
                s.count(camtrap_core::SplitTag::Train),
                s.count(camtrap_core::SplitTag::Test),
                s.attribute,
                100.0 * s.images_straddling
            );
            Ok(())
        }),
        Command::Train { common } => with_config(&common.config, "train", |cfg| {
            for r in pipeline::train_stage(cfg, !common.no_overwrite)? {
                log::info!(
                    "{}: best val accuracy {:.4} ({} epoch {}), checkpoint {}",
                    r.run_id,
                    r.best.val_accuracy,
                    r.best.stage,
                    r.best.epoch + 1,
                    r.checkpoint_path.display()
                );
            }
            Ok(())
        }),
        Command::Evaluate {
            config,
            uncertainty_threshold,
        } => with_config(&config, "evaluate", |cfg| {
            let agg = pipeline::evaluate_stage(cfg, uncertainty_threshold)?;
            print_json(&agg);
            Ok(())
        }),
        Command::Compare {
            config,
            store,
            scheme,
            json,
        } => {
            init_logging(None);
            let store = match (store, config) {
                (Some(s), _) => ExperimentStore::new(s),
                (None, Some(c)) => match load_config(&c) {
                    Ok(cfg) => pipeline::store_for(&cfg),
                    Err(e) => return fail(&e, None),
                },
                (None, None) => unreachable!("clap requires one of them"),
            };
            match compare(&store, scheme.as_deref(), json) {
                Ok(_) => ExitCode::SUCCESS,
                Err(e) => fail(&e, None),
            }
        }
        Command::Demo { dir, no_overwrite } => {
            let log = dir.join("logs").join("demo.log");
            init_logging(Some(&log));
            let started = std::time::Instant::now();
            match demo::run_demo(&dir, !no_overwrite) {
                Ok(out) => {
                    print_json(&out);
                    log::info!(
                        "demo finished in {:.1}s: aggregate accuracy {:.4} over {} runs",
                        started.elapsed().as_secs_f64(),
                        out.aggregate.accuracy,
                        out.aggregate.iterations
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e, Some(&log)),
            }
        }
    }
}
