use crate::error::{Error, Result};

/// Names of the four co-registered MRI channels, in channel order.
pub const MODALITIES: [&str; 4] = ["t1", "t1ce", "t2", "flair"];

/// Raw label values: background, necrosis / non-enhancing, edema, enhancing.
pub const LABEL_SET: [u8; 4] = [0, 1, 2, 4];

/// Maps a raw label to its softmax class index (0..4).
pub fn label_to_class(label: u8) -> Option<usize> {
    LABEL_SET.iter().position(|&l| l == label)
}

pub fn class_to_label(class: usize) -> Option<u8> {
    LABEL_SET.get(class).copied()
}

fn check_geometry(shape: [usize; 3], spacing: [f64; 3], len: usize) -> Result<()> {
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Value(format!(
            "voxel spacing must be strictly positive, got {spacing:?}"
        )));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::Shape(format!(
            "shape {shape:?} holds {n} voxels but {len} values were given"
        )));
    }
    Ok(())
}

/// Scalar 3-D image. `shape` is (D, H, W) = (z, y, x), stored x-fastest;
/// `spacing` is (x, y, z) in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        check_geometry(shape, spacing, data.len())?;
        Ok(Volume {
            shape,
            spacing,
            data,
        })
    }

    pub fn zeros(shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Volume::new(shape, spacing, vec![0.0; shape.iter().product()])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }
}

/// 3-D label map restricted to [`LABEL_SET`].
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    shape: [usize; 3],
    spacing: [f64; 3],
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], data: Vec<u8>) -> Result<Self> {
        check_geometry(shape, spacing, data.len())?;
        if let Some(bad) = data.iter().find(|l| !LABEL_SET.contains(l)) {
            return Err(Error::Value(format!(
                "label {bad} is not one of {LABEL_SET:?}"
            )));
        }
        Ok(LabelVolume {
            shape,
            spacing,
            data,
        })
    }

    pub fn background(shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        LabelVolume::new(shape, spacing, vec![0; shape.iter().product()])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    /// Softmax class index per voxel.
    pub fn to_classes(&self) -> Vec<usize> {
        self.data
            .iter()
            .map(|&l| label_to_class(l).expect("validated label"))
            .collect()
    }

    /// Replaces voxel values through `f`; the result is validated again.
    pub fn map(&self, f: impl Fn(u8) -> u8) -> Result<Self> {
        LabelVolume::new(
            self.shape,
            self.spacing,
            self.data.iter().map(|&l| f(l)).collect(),
        )
    }
}

/// One patient: four co-registered modalities and an optional reference.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub modalities: [Volume; 4],
    pub label: Option<LabelVolume>,
    /// Index of the dataset (and therefore the segmentation head) this case belongs to.
    pub dataset_tag: usize,
}

impl Case {
    pub fn new(
        id: impl Into<String>,
        modalities: [Volume; 4],
        label: Option<LabelVolume>,
        dataset_tag: usize,
    ) -> Result<Self> {
        let id = id.into();
        let shape = modalities[0].shape();
        let spacing = modalities[0].spacing();
        for (name, m) in MODALITIES.iter().zip(&modalities) {
            if m.shape() != shape || m.spacing() != spacing {
                return Err(Error::Consistency {
                    case: id,
                    message: format!(
                        "{name} has shape {:?} / spacing {:?}, expected {:?} / {:?}",
                        m.shape(),
                        m.spacing(),
                        shape,
                        spacing
                    ),
                });
            }
        }
        if let Some(l) = &label {
            if l.shape() != shape || l.spacing() != spacing {
                return Err(Error::Consistency {
                    case: id,
                    message: format!(
                        "label has shape {:?} / spacing {:?}, expected {:?} / {:?}",
                        l.shape(),
                        l.spacing(),
                        shape,
                        spacing
                    ),
                });
            }
        }
        Ok(Case {
            id,
            modalities,
            label,
            dataset_tag,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.modalities[0].shape()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.modalities[0].spacing()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_volume_rejects_unknown_labels() {
        assert!(LabelVolume::new([1, 1, 2], [1.0; 3], vec![0, 3]).is_err());
        assert!(LabelVolume::new([1, 1, 2], [1.0; 3], vec![0, 4]).is_ok());
    }

    #[test]
    fn spacing_must_be_positive() {
        assert!(Volume::new([1, 1, 1], [1.0, 0.0, 1.0], vec![0.0]).is_err());
    }

    #[test]
    fn class_mapping_round_trips() {
        for l in LABEL_SET {
            assert_eq!(class_to_label(label_to_class(l).unwrap()), Some(l));
        }
        assert_eq!(label_to_class(4), Some(3));
        assert_eq!(label_to_class(3), None);
    }

    #[test]
    fn case_rejects_mismatched_modalities() {
        let v = Volume::zeros([2, 2, 2], [1.0; 3]).unwrap();
        let odd = Volume::zeros([2, 2, 3], [1.0; 3]).unwrap();
        let err = Case::new("c7", [v.clone(), v.clone(), odd, v], None, 0).unwrap_err();
        match err {
            Error::Consistency { case, message } => {
                assert_eq!(case, "c7");
                assert!(message.contains("t2"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
