use super::volume::{Case, Volume, MODALITIES};
use crate::error::{Error, Result};

/// Standardizes one modality over its brain region (nonzero voxels) and
/// zeroes everything outside it.
pub fn normalize_volume(v: &Volume, name: &str) -> Result<Volume> {
    let inside: Vec<f64> = v
        .data()
        .iter()
        .filter(|&&x| x != 0.0)
        .map(|&x| x as f64)
        .collect();
    if inside.is_empty() {
        return Err(Error::Degenerate(format!(
            "modality `{name}` has an empty brain region (all voxels are zero)"
        )));
    }
    let n = inside.len() as f64;
    let mean = inside.iter().sum::<f64>() / n;
    let var = inside.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) {
        return Err(Error::Degenerate(format!(
            "modality `{name}` has zero standard deviation inside the brain region"
        )));
    }
    let data = v
        .data()
        .iter()
        .map(|&x| {
            if x == 0.0 {
                0.0
            } else {
                ((x as f64 - mean) / std) as f32
            }
        })
        .collect();
    Volume::new(v.shape(), v.spacing(), data)
}

/// Normalizes every modality of `case` independently.
///
/// The brain mask is recomputed per modality as its nonzero voxels. A voxel
/// whose standardized value happens to be exactly zero is indistinguishable
/// from background afterwards, which matches what a later pass would do.
pub fn normalize_case(case: &Case) -> Result<Case> {
    let mut out = Vec::with_capacity(4);
    for (name, v) in MODALITIES.iter().zip(&case.modalities) {
        out.push(normalize_volume(v, name).map_err(|e| match e {
            Error::Degenerate(m) => Error::Degenerate(format!("case `{}`: {m}", case.id)),
            e => e,
        })?);
    }
    let modalities: [Volume; 4] = out.try_into().expect("four modalities");
    Case::new(
        case.id.clone(),
        modalities,
        case.label.clone(),
        case.dataset_tag,
    )
}
