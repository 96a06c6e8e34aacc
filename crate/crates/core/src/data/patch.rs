use rand::Rng;

use super::volume::{Case, LabelVolume};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A training sample: image `[C, D, H, W]` and, for labeled cases, the
/// congruent label crop.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub image: Tensor<f32>,
    pub label: Option<LabelVolume>,
}

impl Patch {
    pub fn spatial(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[1], s[2], s[3]]
    }
}

/// Inclusive range of feasible corner offsets along one axis. When the volume
/// is smaller than the patch the corner is negative and the gap is padding.
pub fn corner_range(len: usize, patch: usize) -> (isize, isize) {
    let slack = len as isize - patch as isize;
    (slack.min(0), slack.max(0))
}

/// Uniformly random feasible corner.
pub fn random_corner<R: Rng + ?Sized>(shape: [usize; 3], patch: [usize; 3], rng: &mut R) -> [isize; 3] {
    let mut c = [0isize; 3];
    for a in 0..3 {
        let (lo, hi) = corner_range(shape[a], patch[a]);
        c[a] = rng.random_range(lo as i64..=hi as i64) as isize;
    }
    c
}

/// Corner that centers the patch on the volume.
pub fn center_corner(shape: [usize; 3], patch: [usize; 3]) -> [isize; 3] {
    let mut c = [0isize; 3];
    for a in 0..3 {
        c[a] = (shape[a] as isize - patch[a] as isize).div_euclid(2);
    }
    c
}

/// Crops `patch` voxels starting at `corner`; voxels outside the volume are
/// zero in the image and background in the label.
pub fn crop(case: &Case, corner: [isize; 3], patch: [usize; 3]) -> Result<Patch> {
    if patch.contains(&0) {
        return Err(Error::Shape(format!("patch size {patch:?} must be positive")));
    }
    let shape = case.shape();
    let n: usize = patch.iter().product();
    let mut image = vec![0f32; 4 * n];
    let mut labels = case.label.as_ref().map(|_| vec![0u8; n]);
    let src_index = |z: usize, y: usize, x: usize| -> Option<usize> {
        let sz = corner[0] + z as isize;
        let sy = corner[1] + y as isize;
        let sx = corner[2] + x as isize;
        let inside = (0..shape[0] as isize).contains(&sz)
            && (0..shape[1] as isize).contains(&sy)
            && (0..shape[2] as isize).contains(&sx);
        inside.then(|| ((sz as usize * shape[1]) + sy as usize) * shape[2] + sx as usize)
    };
    for z in 0..patch[0] {
        for y in 0..patch[1] {
            for x in 0..patch[2] {
                let Some(s) = src_index(z, y, x) else { continue };
                let d = (z * patch[1] + y) * patch[2] + x;
                for (c, m) in case.modalities.iter().enumerate() {
                    image[c * n + d] = m.data()[s];
                }
                if let (Some(out), Some(l)) = (labels.as_mut(), case.label.as_ref()) {
                    out[d] = l.data()[s];
                }
            }
        }
    }
    let spacing = case.spacing();
    Ok(Patch {
        image: Tensor::new(&[4, patch[0], patch[1], patch[2]], image)?,
        label: labels
            .map(|l| LabelVolume::new(patch, spacing, l))
            .transpose()?,
    })
}

/// Random patch with a uniformly drawn corner.
pub fn sample_patch<R: Rng + ?Sized>(case: &Case, patch: [usize; 3], rng: &mut R) -> Result<Patch> {
    let corner = random_corner(case.shape(), patch, rng);
    crop(case, corner, patch)
}

/// Deterministic center crop, used for validation.
pub fn center_patch(case: &Case, patch: [usize; 3]) -> Result<Patch> {
    crop(case, center_corner(case.shape(), patch), patch)
}
