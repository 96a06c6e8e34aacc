//! Sample a training patch and run it through the spatial and intensity
//! augmentations, printing what changed.
//!
//! cargo run --example augmentation

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxseg::data::{augment, normalize_case, sample_patch, synth_case, AugmentConfig, SynthConfig};

fn main() -> voxseg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let case = normalize_case(&synth_case("demo", &SynthConfig::cube(32), &mut rng)?)?;
    let patch = sample_patch(&case, [24; 3], &mut rng)?;
    let cfg = AugmentConfig {
        p_rotation: 1.0,
        p_scale: 1.0,
        p_elastic: 1.0,
        p_gamma: 1.0,
        ..AugmentConfig::default()
    };
    let label = patch.label.as_ref().expect("labelled");
    println!("patch {:?}: tumor voxels {}", patch.spatial(), label.len() - label.count(0));
    for round in 0..4 {
        let out = augment(&patch, &cfg, &mut rng)?;
        let l = out.label.as_ref().expect("labels follow the image");
        let moved = out.image.data().iter().zip(patch.image.data()).filter(|(a, b)| a != b).count();
        println!(
            "round {round}: tumor voxels {:5}, labels {:?}, {moved} of {} intensities changed",
            l.len() - l.count(0),
            [0u8, 1, 2, 4].map(|k| l.count(k)),
            out.image.numel()
        );
    }
    Ok(())
}
