//! Region encoding and decoding, then fitting and applying the small-ET rule
//! on a cohort where some cases have no enhancing tumor.
//!
//! cargo run --example regions_postprocess

use voxseg::data::LabelVolume;
use voxseg::regions::{apply_et_rule, decode_voxel, labels_to_regions, optimize_threshold};

fn main() -> voxseg::Result<()> {
    let l = LabelVolume::new([1, 1, 4], [1.0; 3], vec![0, 1, 2, 4])?;
    let r = labels_to_regions(&l);
    println!("labels {:?} -> wt {:?} tc {:?} et {:?}", l.data(), r.wt, r.tc, r.et);
    for (wt, tc, et) in [(0.9, 0.9, 0.9), (0.9, 0.8, 0.2), (0.7, 0.3, 0.9), (0.2, 0.9, 0.9)] {
        println!("probabilities wt {wt} tc {tc} et {et} -> label {}", decode_voxel(wt, tc, et, 0.5));
    }

    // cases 0 and 2 have no enhancing tumor, but the prediction has a few ET voxels
    let shape = [8, 8, 8];
    let mut preds = Vec::new();
    let mut refs = Vec::new();
    for (k, (stray, true_et)) in [(3usize, 0usize), (0, 120), (6, 0), (0, 40)].into_iter().enumerate() {
        let mut reference = vec![2u8; 512];
        reference[..true_et].fill(4);
        let mut pred = reference.clone();
        for i in 0..stray {
            pred[500 - 7 * i] = 4;
        }
        println!("case {k}: reference ET {true_et:3}, predicted ET {:3}", true_et + stray);
        preds.push(LabelVolume::new(shape, [1.0; 3], pred)?);
        refs.push(LabelVolume::new(shape, [1.0; 3], reference)?);
    }
    let (rule, score) = optimize_threshold(&preds, &refs)?;
    println!("fitted et_min_voxels = {} with mean ET Dice {score:.3}", rule.et_min_voxels);
    for (k, p) in preds.iter().enumerate() {
        println!("case {k}: ET after rule {}", apply_et_rule(p, rule).count(4));
    }
    Ok(())
}
