//! Cotrain one trunk with two output heads on two synthetic datasets, then
//! predict each dataset with its own head.
//!
//! cargo run --release --example cotrain

use voxseg::data::{normalize_case, synth_cohort, AugmentConfig, SynthConfig};
use voxseg::infer::predict_volume;
use voxseg::loss::{LossConfig, LossKind};
use voxseg::metrics::dice;
use voxseg::nn::{ModelConfig, UNet};
use voxseg::train::{cotrain, TrainConfig};

fn main() -> voxseg::Result<()> {
    let load = |tag, seed| -> voxseg::Result<Vec<_>> {
        let cfg = SynthConfig {
            dataset_tag: tag,
            ..SynthConfig::cube(16)
        };
        synth_cohort(3, &cfg, seed)?.iter().map(normalize_case).collect()
    };
    let (a, b) = (load(0, 20)?, load(1, 21)?);
    let mut net = UNet::<f32>::new(ModelConfig {
        num_heads: 2,
        ..ModelConfig::tiny()
    })?;
    let cfg = TrainConfig {
        lr_init: 5e-3,
        batches_per_epoch: 10,
        max_epochs: 15,
        patch_size: 16,
        augment: AugmentConfig::disabled(),
        // cross-entropy also trains the background channel, which the
        // foreground Dice alone leaves near a tie early in training
        loss: LossConfig {
            kind: LossKind::DicePlusCe,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    };
    let out = cotrain(&mut net, &a[..2], &b[..2], &a[2..], &b[2..], &cfg)?;
    println!("{} steps, final validation loss {:+.4}", out.steps, out.log.last().unwrap().val_loss);
    for (name, set) in [("dataset a", &a), ("dataset b", &b)] {
        let case = &set[2];
        let reference: Vec<bool> = case.label.as_ref().unwrap().data().iter().map(|&l| l > 0).collect();
        for head in 0..2 {
            let labels = predict_volume(&net, case, head, "cotrained", None)?.to_labels(0.5)?;
            let mask: Vec<bool> = labels.data().iter().map(|&l| l > 0).collect();
            println!("{name} via head {head}: whole-tumor Dice {:.3}", dice(&mask, &reference)?);
        }
    }
    Ok(())
}
