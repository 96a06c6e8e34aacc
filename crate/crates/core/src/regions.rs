//! Nested tumor regions and the enhancing-tumor size rule.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::{LabelVolume, LABEL_SET};
use crate::error::{Error, Result};
use crate::metrics::dice;

/// Region channel order used by sigmoid heads.
pub const REGION_NAMES: [&str; 3] = ["wt", "tc", "et"];

/// Whole tumor, tumor core and enhancing tumor masks.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMaps {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub wt: Vec<bool>,
    pub tc: Vec<bool>,
    pub et: Vec<bool>,
}

impl RegionMaps {
    pub fn channels(&self) -> [&[bool]; 3] {
        [&self.wt, &self.tc, &self.et]
    }

    /// Masks as `[3, D, H, W]` float targets.
    pub fn to_targets<T: crate::Real>(&self) -> Vec<T> {
        self.channels()
            .iter()
            .flat_map(|m| m.iter().map(|&b| if b { T::one() } else { T::zero() }))
            .collect()
    }

    /// True when et ⊆ tc ⊆ wt voxelwise.
    pub fn is_nested(&self) -> bool {
        (0..self.wt.len()).all(|i| (!self.et[i] || self.tc[i]) && (!self.tc[i] || self.wt[i]))
    }
}

pub fn labels_to_regions(l: &LabelVolume) -> RegionMaps {
    let d = l.data();
    RegionMaps {
        shape: l.shape(),
        spacing: l.spacing(),
        wt: d.iter().map(|&v| matches!(v, 1 | 2 | 4)).collect(),
        tc: d.iter().map(|&v| matches!(v, 1 | 4)).collect(),
        et: d.iter().map(|&v| v == 4).collect(),
    }
}

/// Same as [`labels_to_regions`] for raw values, rejecting unknown labels.
pub fn raw_labels_to_regions(shape: [usize; 3], spacing: [f64; 3], raw: &[u8]) -> Result<RegionMaps> {
    if let Some(bad) = raw.iter().find(|v| !LABEL_SET.contains(v)) {
        return Err(Error::Value(format!("label {bad} is not one of {LABEL_SET:?}")));
    }
    Ok(labels_to_regions(&LabelVolume::new(shape, spacing, raw.to_vec())?))
}

/// Hierarchical decode of one voxel's (wt, tc, et) probabilities.
pub fn decode_voxel(wt: f64, tc: f64, et: f64, threshold: f64) -> u8 {
    if wt < threshold {
        0
    } else if tc < threshold {
        2
    } else if et < threshold {
        1
    } else {
        4
    }
}

/// Decodes `[3, D, H, W]` region probabilities (wt, tc, et) into labels.
pub fn decode_regions(
    probs: &[f32],
    shape: [usize; 3],
    spacing: [f64; 3],
    threshold: f64,
) -> Result<LabelVolume> {
    let n: usize = shape.iter().product();
    if probs.len() != 3 * n {
        return Err(Error::Shape(format!(
            "region probabilities hold {} values, expected 3 x {n}",
            probs.len()
        )));
    }
    let data = (0..n)
        .map(|i| {
            decode_voxel(
                probs[i] as f64,
                probs[n + i] as f64,
                probs[2 * n + i] as f64,
                threshold,
            )
        })
        .collect();
    LabelVolume::new(shape, spacing, data)
}

/// Minimum predicted enhancing-tumor size; smaller predictions become necrosis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PostprocessRule {
    pub et_min_voxels: usize,
}

impl fmt::Display for PostprocessRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "et_min_voxels={}", self.et_min_voxels)
    }
}

impl FromStr for PostprocessRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let line = s.trim();
        let value = line
            .strip_prefix("et_min_voxels=")
            .ok_or_else(|| Error::parse("rule", "et_min_voxels", format!("expected `et_min_voxels=<n>`, got `{line}`")))?;
        let et_min_voxels = value.trim().parse().map_err(|_| {
            Error::parse("rule", "et_min_voxels", format!("`{value}` is not a non-negative integer"))
        })?;
        Ok(PostprocessRule { et_min_voxels })
    }
}

impl PostprocessRule {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, format!("{self}\n")).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse().map_err(|e| match e {
            Error::Parse { field, message, .. } => Error::Parse {
                file: path.display().to_string(),
                field,
                message,
            },
            e => e,
        })
    }
}

/// Replaces every enhancing voxel with necrosis when fewer than
/// `rule.et_min_voxels` are predicted.
pub fn apply_et_rule(l: &LabelVolume, rule: PostprocessRule) -> LabelVolume {
    if l.count(4) < rule.et_min_voxels {
        l.map(|v| if v == 4 { 1 } else { v }).expect("4 -> 1 keeps labels valid")
    } else {
        l.clone()
    }
}

fn et_mask(l: &LabelVolume) -> Vec<bool> {
    l.data().iter().map(|&v| v == 4).collect()
}

/// Mean ET Dice over a cohort after applying `threshold`, computed from counts
/// without rebuilding label maps.
pub fn mean_et_dice(predictions: &[LabelVolume], references: &[LabelVolume], threshold: usize) -> Result<f64> {
    let stats = et_stats(predictions, references)?;
    Ok(mean_dice_at(&stats, threshold))
}

/// Per case: (predicted ET count, reference ET count, Dice without the rule).
fn et_stats(predictions: &[LabelVolume], references: &[LabelVolume]) -> Result<Vec<(usize, usize, f64)>> {
    if predictions.is_empty() {
        return Err(Error::Contract("threshold search needs at least one case".into()));
    }
    if predictions.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} predictions but {} references",
            predictions.len(),
            references.len()
        )));
    }
    predictions
        .iter()
        .zip(references)
        .map(|(p, r)| {
            let (pm, rm) = (et_mask(p), et_mask(r));
            let d = dice(&pm, &rm)?;
            Ok((p.count(4), r.count(4), d))
        })
        .collect()
}

fn mean_dice_at(stats: &[(usize, usize, f64)], threshold: usize) -> f64 {
    let total: f64 = stats
        .iter()
        .map(|&(pred, reference, d)| {
            if pred < threshold {
                // prediction emptied
                if reference == 0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                d
            }
        })
        .sum();
    total / stats.len() as f64
}

/// Threshold maximizing mean ET Dice, searched over {0} and every observed
/// predicted count `c` and `c + 1`; ties go to the smallest threshold.
pub fn optimize_threshold(predictions: &[LabelVolume], references: &[LabelVolume]) -> Result<(PostprocessRule, f64)> {
    let stats = et_stats(predictions, references)?;
    let mut candidates: Vec<usize> = std::iter::once(0)
        .chain(stats.iter().flat_map(|&(c, _, _)| [c, c + 1]))
        .collect();
    candidates.sort_unstable();
    candidates.dedup();
    let mut best = (0, f64::NEG_INFINITY);
    for t in candidates {
        let m = mean_dice_at(&stats, t);
        if m > best.1 {
            best = (t, m);
        }
    }
    Ok((PostprocessRule { et_min_voxels: best.0 }, best.1))
}
