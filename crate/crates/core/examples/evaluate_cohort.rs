//! Score predicted label volumes against references and print the per-case
//! table with its summary rows.
//!
//! cargo run --example evaluate_cohort

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxseg::data::{synth_cohort, LabelVolume, SynthConfig};
use voxseg::metrics::{evaluate_cohort, MetricConventions};

fn main() -> voxseg::Result<()> {
    let cases = synth_cohort(4, &SynthConfig::cube(24), 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ids = Vec::new();
    let mut refs = Vec::new();
    let mut preds = Vec::new();
    for case in &cases {
        let reference = case.label.clone().expect("labelled");
        // drop a random 15% of tumor voxels to background
        let data = reference
            .data()
            .iter()
            .map(|&l| if l != 0 && rng.random_bool(0.15) { 0 } else { l })
            .collect();
        let noisy = LabelVolume::new(reference.shape(), reference.spacing(), data)?;
        ids.push(case.id.clone());
        refs.push(reference);
        preds.push(noisy);
    }
    let report = evaluate_cohort(&ids, &preds, &refs, &MetricConventions::default())?;
    print!("{}", report.to_tsv());
    Ok(())
}
