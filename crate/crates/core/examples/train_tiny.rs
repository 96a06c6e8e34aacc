//! Train a tiny U-Net on a synthetic cohort, watch the epoch log and save the
//! best checkpoint.
//!
//! cargo run --release --example train_tiny -- [epochs]

use voxseg::data::{normalize_case, synth_cohort, AugmentConfig, SynthConfig};
use voxseg::loss::{LossConfig, LossKind};
use voxseg::nn::{ModelConfig, UNet};
use voxseg::train::{format_log, train_observed, TrainConfig};

fn main() -> voxseg::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(20);
    let cases: Vec<_> = synth_cohort(4, &SynthConfig::cube(16), 1)?
        .iter()
        .map(normalize_case)
        .collect::<voxseg::Result<_>>()?;
    let (train_set, val_set) = cases.split_at(3);

    let cfg = TrainConfig {
        lr_init: 5e-3,
        batches_per_epoch: 10,
        max_epochs: epochs,
        batch_size: 2,
        patch_size: 16,
        loss: LossConfig {
            kind: LossKind::DicePlusCe,
            ..LossConfig::default()
        },
        augment: AugmentConfig {
            p_rotation: 0.0,
            ..AugmentConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut net = UNet::<f32>::new(ModelConfig::tiny())?;
    println!("{} parameters, channels {:?}", net.num_parameters(), net.config().channel_ladder());
    let out = train_observed(&mut net, train_set, val_set, &cfg, &mut |r| {
        println!("epoch {:3}  train {:+.4}  val {:+.4}  ema {:+.4}  lr {:.1e}", r.epoch, r.train_loss, r.val_loss, r.ema, r.lr);
    })?;
    let path = std::env::temp_dir().join("voxseg-tiny-best.ckpt");
    out.best.save(&path)?;
    println!("{} steps; best epoch {} saved to {}", out.steps, out.best.epoch, path.display());
    print!("{}", format_log(&cfg.echo()[..3], &out.log[out.log.len().saturating_sub(2)..]));
    Ok(())
}
