//! Whole-volume prediction with mirror test-time augmentation, and an
//! ensemble of two differently seeded networks.
//!
//! cargo run --release --example predict_tta_ensemble

use voxseg::data::{normalize_case, synth_cohort, AugmentConfig, SynthConfig};
use voxseg::infer::{ensemble, predict_tta, predict_volume};
use voxseg::loss::{LossConfig, LossKind};
use voxseg::metrics::dice;
use voxseg::nn::{ModelConfig, UNet};
use voxseg::train::{train, TrainConfig};

fn main() -> voxseg::Result<()> {
    let cases: Vec<_> = synth_cohort(3, &SynthConfig::cube(16), 4)?
        .iter()
        .map(normalize_case)
        .collect::<voxseg::Result<_>>()?;
    let cfg = TrainConfig {
        lr_init: 5e-3,
        batches_per_epoch: 10,
        max_epochs: 15,
        batch_size: 1,
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
    let mut members = Vec::new();
    for seed in [0, 1] {
        let mut net = UNet::<f32>::new(ModelConfig { seed, ..ModelConfig::tiny() })?;
        train(&mut net, &cases[..2], &cases[2..], &TrainConfig { seed, ..cfg.clone() })?;
        members.push(net);
    }

    let case = &cases[2];
    let reference: Vec<bool> = case.label.as_ref().unwrap().data().iter().map(|&l| l > 0).collect();
    let score = |p: &voxseg::infer::Prediction| -> voxseg::Result<f64> {
        let labels = p.to_labels(0.5)?;
        let mask: Vec<bool> = labels.data().iter().map(|&l| l > 0).collect();
        dice(&mask, &reference)
    };
    let single = predict_volume(&members[0], case, 0, "m0", None)?;
    let tta: Vec<_> = members
        .iter()
        .enumerate()
        .map(|(i, m)| predict_tta(m, case, 0, &format!("m{i}"), None))
        .collect::<voxseg::Result<_>>()?;
    let both = ensemble(&tta)?;
    println!("whole-tumor Dice, single pass      {:.3}", score(&single)?);
    println!("whole-tumor Dice, model 0 with TTA {:.3}", score(&tta[0])?);
    println!("whole-tumor Dice, 2-model ensemble {:.3}  ({})", score(&both)?, both.provenance.join(", "));
    Ok(())
}
