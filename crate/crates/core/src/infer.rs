//! Whole-volume prediction, mirror test-time augmentation and ensembling.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::KeyValues;
use crate::data::io::{read_raw, write_raw, Payload, RawVolume};
use crate::data::{class_to_label, flip, Axis, Case, LabelVolume};
use crate::error::{Error, Result};
use crate::nn::{HeadKind, UNet};
use crate::regions::decode_regions;
use crate::tensor::{Real, Tensor};

/// Zero voxels added before and after each spatial axis (D, H, W).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Padding {
    pub before: [usize; 3],
    pub after: [usize; 3],
}

impl Padding {
    /// Smallest symmetric padding making every axis a multiple of `div`;
    /// an odd remainder goes after.
    pub fn to_multiple(shape: [usize; 3], div: usize) -> Self {
        let mut p = Padding::default();
        for a in 0..3 {
            let total = shape[a].div_ceil(div) * div - shape[a];
            p.before[a] = total / 2;
            p.after[a] = total - total / 2;
        }
        p
    }

    pub fn padded(&self, shape: [usize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| shape[a] + self.before[a] + self.after[a])
    }

    pub fn is_zero(&self) -> bool {
        self.before == [0; 3] && self.after == [0; 3]
    }
}

/// Pads `[channels, D, H, W]` data with `fill`.
pub fn pad<T: Copy>(data: &[T], channels: usize, shape: [usize; 3], p: Padding, fill: T) -> Vec<T> {
    let out_shape = p.padded(shape);
    let n_out: usize = out_shape.iter().product();
    let n_in: usize = shape.iter().product();
    let mut out = vec![fill; channels * n_out];
    for c in 0..channels {
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                let src = c * n_in + (z * shape[1] + y) * shape[2];
                let dst = c * n_out
                    + ((z + p.before[0]) * out_shape[1] + y + p.before[1]) * out_shape[2]
                    + p.before[2];
                out[dst..dst + shape[2]].copy_from_slice(&data[src..src + shape[2]]);
            }
        }
    }
    out
}

/// Inverse of [`pad`]: `shape` is the original (unpadded) shape.
pub fn unpad<T: Copy>(data: &[T], channels: usize, shape: [usize; 3], p: Padding) -> Vec<T> {
    let in_shape = p.padded(shape);
    let n_in: usize = in_shape.iter().product();
    let mut out = Vec::with_capacity(channels * shape.iter().product::<usize>());
    for c in 0..channels {
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                let src = c * n_in
                    + ((z + p.before[0]) * in_shape[1] + y + p.before[1]) * in_shape[2]
                    + p.before[2];
                out.extend_from_slice(&data[src..src + shape[2]]);
            }
        }
    }
    out
}

/// The four modalities stacked as `[4, D, H, W]`.
pub fn case_channels(case: &Case) -> Vec<f32> {
    case.modalities
        .iter()
        .flat_map(|m| m.data().iter().copied())
        .collect()
}

/// Voxelwise probabilities for one case.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[C, D, H, W]`
    pub probs: Tensor<f32>,
    pub head: HeadKind,
    pub spacing: [f64; 3],
    /// One entry per contributing model, e.g. `model0:tta8`.
    pub provenance: Vec<String>,
}

impl Prediction {
    pub fn shape(&self) -> [usize; 3] {
        let s = self.probs.shape();
        [s[1], s[2], s[3]]
    }

    pub fn channels(&self) -> usize {
        self.probs.shape()[0]
    }

    /// Argmax labels for softmax heads; hierarchical region decode at
    /// `threshold` for sigmoid heads.
    pub fn to_labels(&self, threshold: f64) -> Result<LabelVolume> {
        let shape = self.shape();
        match self.head {
            HeadKind::Softmax { num_classes } => {
                let n: usize = shape.iter().product();
                let p = self.probs.data();
                let data = (0..n)
                    .map(|i| {
                        let mut best = 0;
                        for k in 1..num_classes {
                            if p[k * n + i] > p[best * n + i] {
                                best = k;
                            }
                        }
                        class_to_label(best).ok_or_else(|| {
                            Error::Value(format!("class {best} has no label in a {num_classes}-class head"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                LabelVolume::new(shape, self.spacing, data)
            }
            HeadKind::Sigmoid { num_regions: 3 } => decode_regions(self.probs.data(), shape, self.spacing, threshold),
            HeadKind::Sigmoid { num_regions } => Err(Error::Contract(format!(
                "region decode needs 3 channels (wt, tc, et), got {num_regions}"
            ))),
        }
    }

    fn channel_path(prefix: &Path, c: usize) -> PathBuf {
        PathBuf::from(format!("{}_p{c}.vseg", prefix.display()))
    }

    fn sidecar_path(prefix: &Path) -> PathBuf {
        PathBuf::from(format!("{}.pred", prefix.display()))
    }

    /// Writes `<prefix>_p<c>.vseg` per channel and the `<prefix>.pred` sidecar.
    pub fn save(&self, prefix: impl AsRef<Path>) -> Result<()> {
        let prefix = prefix.as_ref();
        let n: usize = self.shape().iter().product();
        for c in 0..self.channels() {
            let raw = RawVolume {
                shape: self.shape(),
                spacing: self.spacing,
                payload: Payload::F32(self.probs.data()[c * n..(c + 1) * n].to_vec()),
            };
            write_raw(&raw, Prediction::channel_path(prefix, c))?;
        }
        let mut kv = KeyValues::new();
        kv.set("head", match self.head {
            HeadKind::Softmax { num_classes } => format!("softmax:{num_classes}"),
            HeadKind::Sigmoid { num_regions } => format!("sigmoid:{num_regions}"),
        });
        kv.set("channels", self.channels().to_string());
        kv.set("provenance", self.provenance.join(";"));
        let side = Prediction::sidecar_path(prefix);
        std::fs::write(&side, kv.to_text()).map_err(|e| Error::io(&side, e))
    }

    pub fn load(prefix: impl AsRef<Path>) -> Result<Self> {
        let prefix = prefix.as_ref();
        let side = Prediction::sidecar_path(prefix);
        let file = side.display().to_string();
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let kv = KeyValues::parse(&text, &file)?;
        let head_text: String = kv.field("head", &file)?;
        let head = match head_text.split_once(':') {
            Some(("softmax", n)) => n.parse().ok().map(|n| HeadKind::Softmax { num_classes: n }),
            Some(("sigmoid", n)) => n.parse().ok().map(|n| HeadKind::Sigmoid { num_regions: n }),
            _ => None,
        }
        .ok_or_else(|| Error::parse(&file, "head", format!("cannot parse `{head_text}`")))?;
        let channels: usize = kv.field("channels", &file)?;
        if channels != head.outputs() {
            return Err(Error::parse(&file, "channels", format!("{channels} channels for head `{head_text}`")));
        }
        let provenance = kv
            .get("provenance")
            .unwrap_or("")
            .split(';')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        let mut data = Vec::new();
        let mut geometry = None;
        for c in 0..channels {
            let path = Prediction::channel_path(prefix, c);
            let raw = read_raw(&path)?;
            let Payload::F32(values) = raw.payload else {
                return Err(Error::parse(path.display(), "dtype", "probabilities must be f32"));
            };
            match geometry {
                None => geometry = Some((raw.shape, raw.spacing)),
                Some(g) if g != (raw.shape, raw.spacing) => {
                    return Err(Error::parse(path.display(), "shape", "channel geometry differs from channel 0"))
                }
                _ => {}
            }
            data.extend(values);
        }
        let (shape, spacing) = geometry.ok_or_else(|| Error::parse(&file, "channels", "no channels"))?;
        Ok(Prediction {
            probs: Tensor::new(&[channels, shape[0], shape[1], shape[2]], data)?,
            head,
            spacing,
            provenance,
        })
    }
}

/// Runs the network on `[4, D, H, W]` data of a case-shaped volume, padding
/// to the network's size divisor and cropping back. Returns `[C, D, H, W]`.
fn forward_volume<T: Real>(
    net: &UNet<T>,
    channels: &[f32],
    shape: [usize; 3],
    head: usize,
    budget: Option<usize>,
) -> Result<Vec<T>> {
    let cfg = net.config();
    let pad_spec = Padding::to_multiple(shape, cfg.size_divisor());
    let padded = pad_spec.padded(shape);
    if let Some(limit) = budget {
        let need = net.activation_bytes(1, padded);
        if need > limit {
            return Err(Error::Capacity(format!(
                "whole-volume inference on {padded:?} needs about {} MiB, budget is {} MiB; crop the volume or run tiled inference",
                need >> 20,
                limit >> 20
            )));
        }
    }
    let x = pad(channels, cfg.in_channels, shape, pad_spec, 0.0f32);
    let x = Tensor::new(&[1, cfg.in_channels, padded[0], padded[1], padded[2]], x)?.cast::<T>();
    let probs = net.predict(x, head)?;
    Ok(unpad(probs.data(), cfg.head.outputs(), shape, pad_spec))
}

fn to_prediction<T: Real>(net: &UNet<T>, case: &Case, data: Vec<T>, provenance: String) -> Result<Prediction> {
    let [d, h, w] = case.shape();
    let c = net.config().head.outputs();
    Ok(Prediction {
        probs: Tensor::new(&[c, d, h, w], data)?.cast(),
        head: net.config().head,
        spacing: case.spacing(),
        provenance: vec![provenance],
    })
}

/// Single forward pass over the whole (normalized) case.
pub fn predict_volume<T: Real>(
    net: &UNet<T>,
    case: &Case,
    head: usize,
    model_id: &str,
    budget: Option<usize>,
) -> Result<Prediction> {
    let data = forward_volume(net, &case_channels(case), case.shape(), head, budget)?;
    to_prediction(net, case, data, format!("{model_id}:identity"))
}

/// A mirror variant: which of the x, y, z axes are flipped.
pub type Flips = [bool; 3];

/// All eight mirror variants in a fixed order (bit 0 = x, bit 1 = y, bit 2 = z).
pub fn all_flips() -> Vec<Flips> {
    (0..8u8)
        .map(|m| [m & 1 != 0, m & 2 != 0, m & 4 != 0])
        .collect()
}

fn apply_flips<T: Copy>(data: &[T], channels: usize, shape: [usize; 3], flips: Flips) -> Vec<T> {
    let mut out = data.to_vec();
    for (axis, on) in [Axis::X, Axis::Y, Axis::Z].into_iter().zip(flips) {
        if on {
            out = flip(&out, channels, shape, axis);
        }
    }
    out
}

/// Mean of the predictions over the given mirror variants; each variant is
/// flipped back before averaging and the sum runs in `variants` order.
pub fn predict_variants<T: Real>(
    net: &UNet<T>,
    case: &Case,
    head: usize,
    variants: &[Flips],
    model_id: &str,
    budget: Option<usize>,
) -> Result<Prediction> {
    if variants.is_empty() {
        return Err(Error::Contract("at least one mirror variant is required".into()));
    }
    let shape = case.shape();
    let image = case_channels(case);
    let k = net.config().head.outputs();
    let outs = variants
        .par_iter()
        .map(|&f| {
            let x = apply_flips(&image, 4, shape, f);
            let y = forward_volume(net, &x, shape, head, budget)?;
            Ok(apply_flips(&y, k, shape, f))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum = vec![T::zero(); outs[0].len()];
    for o in &outs {
        for (s, v) in sum.iter_mut().zip(o) {
            *s += *v;
        }
    }
    let scale = T::of(1.0 / variants.len() as f64);
    sum.iter_mut().for_each(|s| *s *= scale);
    let tag = if variants == [[false; 3]] {
        "identity".to_string()
    } else {
        format!("tta{}", variants.len())
    };
    to_prediction(net, case, sum, format!("{model_id}:{tag}"))
}

/// Mirror test-time augmentation over all eight flip combinations.
pub fn predict_tta<T: Real>(
    net: &UNet<T>,
    case: &Case,
    head: usize,
    model_id: &str,
    budget: Option<usize>,
) -> Result<Prediction> {
    predict_variants(net, case, head, &all_flips(), model_id, budget)
}

/// Voxelwise mean of predictions, summed in argument order.
pub fn ensemble(preds: &[Prediction]) -> Result<Prediction> {
    let first = preds
        .first()
        .ok_or_else(|| Error::Contract("cannot ensemble zero predictions".into()))?;
    for p in &preds[1..] {
        if p.head != first.head {
            return Err(Error::Contract(format!(
                "cannot ensemble {} and {} predictions",
                first.head.name(),
                p.head.name()
            )));
        }
        if p.probs.shape() != first.probs.shape() {
            return Err(Error::Shape(format!(
                "prediction shapes {:?} and {:?} differ",
                first.probs.shape(),
                p.probs.shape()
            )));
        }
    }
    if preds.len() == 1 {
        return Ok(first.clone());
    }
    let mut sum = vec![0f64; first.probs.numel()];
    for p in preds {
        for (s, v) in sum.iter_mut().zip(p.probs.data()) {
            *s += *v as f64;
        }
    }
    let n = preds.len() as f64;
    let data = sum.into_iter().map(|s| (s / n) as f32).collect();
    Ok(Prediction {
        probs: Tensor::new(first.probs.shape(), data)?,
        head: first.head,
        spacing: first.spacing,
        provenance: preds.iter().flat_map(|p| p.provenance.iter().cloned()).collect(),
    })
}
