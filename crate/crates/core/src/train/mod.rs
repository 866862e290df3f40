//! Two-stage training: transfer learning (head only) followed by
//! finetuning (head plus the last few backbone blocks).

pub mod augment;
pub mod model;

use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ClassWeighting, ExperimentConfig};
use crate::data::{DatasetManifest, SplitTag};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::preprocess::load_rgb;
use crate::split::SplitAssignment;

pub use augment::{augment, sample_seed, AugmentationPolicy};
pub use model::{
    argmax, build_model, predict, softmax, BuildOptions, ClassifierModel, DirWeights, Gradients,
    Prediction, Tensor, WeightsProvider, WeightsSource,
};

/// One preprocessed crop with its class index.
#[derive(Clone, Debug)]
pub struct Sample {
    pub bbox_id: String,
    pub image: RgbImage,
    pub target: usize,
}

/// Load the crops for `tag` from a manifest whose crop paths are relative
/// to `manifest_dir`.
pub fn load_samples(
    manifest: &DatasetManifest,
    manifest_dir: &Path,
    split: &SplitAssignment,
    tag: SplitTag,
    target_dim: u32,
) -> Result<Vec<Sample>> {
    let entries: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| split.assignments.get(&e.bbox_id) == Some(&tag))
        .collect();
    entries
        .par_iter()
        .map(|e| {
            let image = load_rgb(&manifest_dir.join(&e.crop_path))?;
            if image.dimensions() != (target_dim, target_dim) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{target_dim}x{target_dim} crop for {}", e.bbox_id),
                    got: format!("{}x{}", image.width(), image.height()),
                });
            }
            Ok(Sample {
                bbox_id: e.bbox_id.clone(),
                image,
                target: e.class_index,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageHistory {
    pub stage: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Indices of backbone blocks updated in this stage.
    pub trainable_blocks: Vec<usize>,
    pub epochs: Vec<EpochStats>,
    pub backbone_checksums_before: Vec<String>,
    pub backbone_checksums_after: Vec<String>,
    pub head_checksum_before: String,
    pub head_checksum_after: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestCheckpoint {
    pub stage: String,
    pub epoch: usize,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub run_id: String,
    pub seed: u64,
    pub config_fingerprint: String,
    pub backbone: String,
    pub weights_source: WeightsSource,
    pub n_train: usize,
    pub n_val: usize,
    pub class_weights: Vec<f64>,
    pub stages: Vec<StageHistory>,
    pub best: BestCheckpoint,
    pub checkpoint_path: PathBuf,
}

/// Learning rate, batch size and epochs for one stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

/// Inverse-frequency weights `n / (g * n_k)`; zero for absent classes.
pub fn inverse_frequency_weights(targets: impl IntoIterator<Item = usize>, classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    let mut n = 0usize;
    for t in targets {
        counts[t] += 1;
        n += 1;
    }
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n as f64 / (classes * c) as f64 })
        .collect()
}

/// Mean cross-entropy and accuracy of `model` on `samples`.
pub fn evaluate_samples(model: &ClassifierModel, samples: &[Sample]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let per: Vec<(f64, bool)> = samples
        .par_iter()
        .map(|s| {
            let p = model.forward(&Tensor::from_image(&s.image));
            (-p[s.target].max(f64::MIN_POSITIVE).ln(), argmax(&p) == s.target)
        })
        .collect();
    let n = per.len() as f64;
    let loss = per.iter().map(|(l, _)| l).sum::<f64>() / n;
    let acc = per.iter().filter(|(_, c)| *c).count() as f64 / n;
    (loss, acc)
}

/// Predictions for a batch of images, in input order.
pub fn predict_all(model: &ClassifierModel, images: &[&RgbImage]) -> Result<Vec<Prediction>> {
    images.par_iter().map(|img| predict(model, img)).collect()
}

/// Mutable training state: model, momentum buffers, best checkpoint.
pub struct Trainer {
    pub model: ClassifierModel,
    pub momentum: f64,
    pub policy: AugmentationPolicy,
    pub class_weights: Vec<f64>,
    pub run_seed: u64,
    velocity: Gradients,
    epochs_done: usize,
    best: Option<(ClassifierModel, BestCheckpoint)>,
}

impl Trainer {
    pub fn new(
        model: ClassifierModel,
        momentum: f64,
        policy: AugmentationPolicy,
        class_weights: Vec<f64>,
        run_seed: u64,
    ) -> Self {
        let velocity = zero_like(&model);
        Trainer {
            model,
            momentum,
            policy,
            class_weights,
            run_seed,
            velocity,
            epochs_done: 0,
            best: None,
        }
    }

    pub fn best(&self) -> Option<&(ClassifierModel, BestCheckpoint)> {
        self.best.as_ref()
    }

    pub fn into_best(self) -> Option<(ClassifierModel, BestCheckpoint)> {
        self.best
    }

    /// Train for one stage. Blocks `first_trainable..` and the head are
    /// updated; earlier blocks are untouched.
    pub fn run_stage(
        &mut self,
        name: &str,
        first_trainable: usize,
        params: StageParams,
        train: &[Sample],
        val: &[Sample],
    ) -> Result<StageHistory> {
        if train.is_empty() {
            return Err(Error::EmptySplit("train".into()));
        }
        if val.is_empty() {
            return Err(Error::EmptySplit("val".into()));
        }
        let n_blocks = self.model.blocks.len();
        let first = first_trainable.min(n_blocks);
        self.velocity = zero_like(&self.model);
        let before = self.model.block_checksums();
        let head_before = self.model.head_checksum();
        let mut history = Vec::with_capacity(params.epochs);
        let batch_size = params.batch_size.max(1);

        for e in 0..params.epochs {
            let global_epoch = self.epochs_done;
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(
                self.run_seed,
                global_epoch,
                usize::MAX,
            )));
            let mut loss_sum = 0.0;
            for (bi, batch) in order.chunks(batch_size).enumerate() {
                let model = &self.model;
                let policy = &self.policy;
                let weights = &self.class_weights;
                let seed = self.run_seed;
                let per: Vec<(f64, Gradients)> = batch
                    .par_iter()
                    .map(|&i| {
                        let s = &train[i];
                        let img = augment(&s.image, policy, sample_seed(seed, global_epoch, i));
                        let w = weights.get(s.target).copied().unwrap_or(1.0);
                        model.loss_and_gradients(&Tensor::from_image(&img), s.target, w, first)
                    })
                    .collect();
                let mut grad = zero_like(&self.model);
                let mut batch_loss = 0.0;
                let scale = 1.0 / batch.len() as f64;
                for (l, g) in &per {
                    batch_loss += l;
                    grad.add_scaled(g, scale);
                }
                if !batch_loss.is_finite() || !grad.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        stage: name.to_string(),
                        epoch: e,
                        batch: bi,
                        lr: params.learning_rate,
                    });
                }
                loss_sum += batch_loss;
                self.step(&grad, params.learning_rate, first);
            }
            let (val_loss, val_accuracy) = evaluate_samples(&self.model, val);
            if !val_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: name.to_string(),
                    epoch: e,
                    batch: order.len().div_ceil(batch_size),
                    lr: params.learning_rate,
                });
            }
            let stats = EpochStats {
                epoch: e,
                train_loss: loss_sum / train.len() as f64,
                val_loss,
                val_accuracy,
            };
            log::info!(
                "{name} epoch {}: train loss {:.4}, val loss {:.4}, val acc {:.4}",
                e + 1,
                stats.train_loss,
                val_loss,
                val_accuracy
            );
            let improved = match &self.best {
                None => true,
                Some((_, b)) => {
                    val_accuracy > b.val_accuracy
                        || (val_accuracy == b.val_accuracy && val_loss < b.val_loss)
                }
            };
            if improved {
                self.best = Some((
                    self.model.clone(),
                    BestCheckpoint {
                        stage: name.to_string(),
                        epoch: e,
                        val_accuracy,
                        val_loss,
                    },
                ));
            }
            history.push(stats);
            self.epochs_done += 1;
        }

        Ok(StageHistory {
            stage: name.to_string(),
            learning_rate: params.learning_rate,
            batch_size,
            trainable_blocks: (first..n_blocks).collect(),
            epochs: history,
            backbone_checksums_before: before,
            backbone_checksums_after: self.model.block_checksums(),
            head_checksum_before: head_before,
            head_checksum_after: self.model.head_checksum(),
        })
    }

    /// SGD with momentum: `v = mu * v + g; p -= lr * v`.
    fn step(&mut self, grad: &Gradients, lr: f64, first: usize) {
        let mu = self.momentum;
        let update = |p: &mut [f64], v: &mut [f64], g: &[f64]| {
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        };
        update(&mut self.model.head.weight, &mut self.velocity.head_weight, &grad.head_weight);
        update(&mut self.model.head.bias, &mut self.velocity.head_bias, &grad.head_bias);
        for bi in first..self.model.blocks.len() {
            if let (Some((gw, gb)), Some((vw, vb))) = (&grad.blocks[bi], &mut self.velocity.blocks[bi]) {
                let block = &mut self.model.blocks[bi];
                update(&mut block.weight, vw, gw);
                update(&mut block.bias, vb, gb);
            }
        }
    }
}

fn zero_like(model: &ClassifierModel) -> Gradients {
    Gradients {
        blocks: model
            .blocks
            .iter()
            .map(|b| Some((vec![0.0; b.weight.len()], vec![0.0; b.bias.len()])))
            .collect(),
        head_weight: vec![0.0; model.head.weight.len()],
        head_bias: vec![0.0; model.head.bias.len()],
    }
}

/// Seed for run `index` (0-based) of an experiment.
pub fn run_seed(config: &ExperimentConfig, index: usize) -> u64 {
    config.training.seed.wrapping_add(index as u64)
}

pub fn run_id(index: usize) -> String {
    format!("run-{:03}", index + 1)
}

/// Everything `train_run` needs besides the config.
pub struct RunInputs<'a> {
    pub manifest: &'a DatasetManifest,
    pub manifest_dir: &'a Path,
    pub split: &'a SplitAssignment,
    pub run_index: usize,
    pub provider: Option<&'a dyn WeightsProvider>,
    pub checkpoint_path: &'a Path,
}

/// Build, train both stages, and write the best checkpoint.
pub fn train_run(config: &ExperimentConfig, inputs: RunInputs<'_>) -> Result<(TrainRecord, ClassifierModel)> {
    let t = &config.training;
    let dim = config.preprocessing.target_dim;
    let seed = run_seed(config, inputs.run_index);
    let classes = inputs.manifest.scheme.num_classes();
    let train = load_samples(inputs.manifest, inputs.manifest_dir, inputs.split, SplitTag::Train, dim)?;
    let val = load_samples(inputs.manifest, inputs.manifest_dir, inputs.split, SplitTag::Val, dim)?;
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("val".into()));
    }

    let (model, weights_source) = build_model(
        t.backbone,
        classes,
        &BuildOptions {
            pretrained: t.pretrained,
            allow_random_fallback: t.allow_random_fallback,
            provider: inputs.provider,
            seed,
            input_dim: dim,
        },
    )?;
    let n_blocks = model.blocks.len();
    if t.finetune_stage.unfrozen_depth > n_blocks {
        return Err(Error::InvalidValue {
            path: "training.finetune_stage.unfrozen_depth".into(),
            constraint: format!("{} has only {n_blocks} blocks", t.backbone),
        });
    }
    let class_weights = match t.class_weighting {
        ClassWeighting::None => vec![1.0; classes],
        ClassWeighting::InverseFrequency => inverse_frequency_weights(train.iter().map(|s| s.target), classes),
    };

    let mut trainer = Trainer::new(
        model,
        t.momentum,
        AugmentationPolicy::for_level(t.augmentation),
        class_weights.clone(),
        seed,
    );
    let s1 = trainer.run_stage(
        "transfer",
        n_blocks,
        StageParams {
            epochs: t.transfer_stage.epochs,
            learning_rate: t.transfer_stage.learning_rate,
            batch_size: t.transfer_stage.batch_size,
        },
        &train,
        &val,
    )?;
    let s2 = trainer.run_stage(
        "finetune",
        n_blocks - t.finetune_stage.unfrozen_depth,
        StageParams {
            epochs: t.finetune_stage.epochs,
            learning_rate: t.finetune_stage.learning_rate,
            batch_size: t.finetune_stage.batch_size,
        },
        &train,
        &val,
    )?;
    let (best_model, best) = trainer.into_best().expect("at least one epoch ran");
    best_model.save(inputs.checkpoint_path)?;

    let record = TrainRecord {
        run_id: run_id(inputs.run_index),
        seed,
        config_fingerprint: config.fingerprint(),
        backbone: t.backbone.to_string(),
        weights_source,
        n_train: train.len(),
        n_val: val.len(),
        class_weights,
        stages: vec![s1, s2],
        best,
        checkpoint_path: inputs.checkpoint_path.to_path_buf(),
    };
    Ok((record, best_model))
}

impl TrainRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_json(path, self).map_err(|e| Error::io(path, e))
    }
}
