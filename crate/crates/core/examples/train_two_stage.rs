//! Two-stage training on toy color patches: the transfer stage trains only
//! the head, fine-tuning also unfreezes the last backbone block.

use camtrap_core::config::{AugmentationLevel, Backbone};
use camtrap_core::train::model::ClassifierModel;
use camtrap_core::train::{AugmentationPolicy, Sample, StageParams, Trainer};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn samples(n: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let target = i % 2;
            let image = RgbImage::from_fn(32, 32, |_, _| {
                let jitter = rng.random_range(0..60u8);
                if target == 0 {
                    Rgb([170 + jitter / 2, 60 + jitter, 60])
                } else {
                    Rgb([60, 60 + jitter, 170 + jitter / 2])
                }
            });
            Sample {
                bbox_id: format!("toy{i}#0"),
                image,
                target,
            }
        })
        .collect()
}

fn main() -> camtrap_core::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let train = samples(48, &mut rng);
    let val = samples(16, &mut rng);

    let model = ClassifierModel::random(Backbone::Resnet50, 2, 32, 11);
    let n_blocks = model.blocks.len();
    let policy = AugmentationPolicy::for_level(AugmentationLevel::Light);
    let mut trainer = Trainer::new(model, 0.9, policy, vec![1.0, 1.0], 11);

    let params = |epochs, learning_rate| StageParams {
        epochs,
        learning_rate,
        batch_size: 8,
    };
    let transfer = trainer.run_stage("transfer", n_blocks, params(4, 0.05), &train, &val)?;
    let finetune = trainer.run_stage("finetune", n_blocks - 1, params(3, 0.01), &train, &val)?;

    for stage in [&transfer, &finetune] {
        let changed: Vec<usize> = (0..n_blocks)
            .filter(|&i| stage.backbone_checksums_before[i] != stage.backbone_checksums_after[i])
            .collect();
        println!("{} (blocks changed: {changed:?})", stage.stage);
        for e in &stage.epochs {
            println!(
                "  epoch {} train loss {:.4} val loss {:.4} val accuracy {:.3}",
                e.epoch, e.train_loss, e.val_loss, e.val_accuracy
            );
        }
    }
    let (_, best) = trainer.best().expect("epochs ran");
    println!(
        "best: {} epoch {} val accuracy {:.3}",
        best.stage, best.epoch, best.val_accuracy
    );
    Ok(())
}
