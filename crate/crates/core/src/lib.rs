//! camtrap-core: a config-driven experimentation pipeline for camera-trap
//! image classification.
//!
//! The stages mirror the on-disk workflow:
//!
//! 1. [`detect`]: run a detector over an image folder and write the unified
//!    detections file; enrich with external metadata.
//! 2. Annotate (via the HTTP API in `camtrap-server`), producing the
//!    annotations file next to the images.
//! 3. [`preprocess`]: confidence threshold, square crop (shift or pad),
//!    rescale, manifest.
//! 4. [`split`]: stratified train/test and per-run train/validation splits.
//! 5. [`train`]: backbone + head classifier, transfer-learning stage then
//!    finetuning stage, repeated over seeds.
//! 6. [`eval`]: weighted metrics with uncertainty exclusion, stratified
//!    breakdowns, error/uncertainty logs, cross-run aggregates.
//! 7. [`store`]: experiment directories that the CLI and API read back.
//!
//! Every stage reads its parameters from one [`config::ExperimentConfig`].
//! [`pipeline`] wires the stages together and [`demo`] runs the whole
//! chain on a generated synthetic dataset.

pub mod config;
pub mod data;
pub mod demo;
pub mod detect;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod pipeline;
pub mod preprocess;
pub mod split;
pub mod store;
pub mod train;

pub use config::ExperimentConfig;
pub use data::{
    AnnotationSet, BBox, ClassScheme, DatasetManifest, Detection, Label, ManifestEntry, SplitTag,
};
pub use error::{Error, ErrorKind, Result};
pub use eval::{ExperimentAggregate, MetricsReport, PredictionRecord, RunResult};
