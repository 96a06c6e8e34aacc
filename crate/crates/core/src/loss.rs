//! Soft Dice, cross-entropy and their unweighted sum.
//!
//! The multiclass soft Dice loss is
//!
//! ```text
//! L = -(2 / |K|) * sum_k  sum_i u_ik v_ik / (sum_i u_ik + sum_i v_ik + eps)
//! ```
//!
//! where `i` runs over every voxel of every sample in the minibatch (one pooled
//! Dice per class) and `eps` guards only the denominator, so disjoint supports
//! still give exactly zero.

use crate::error::{Error, Result};
use crate::nn::HeadKind;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Dice,
    CrossEntropy,
    DicePlusCe,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Dice => "dice",
            LossKind::CrossEntropy => "ce",
            LossKind::DicePlusCe => "dice_plus_ce",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dice" => Some(LossKind::Dice),
            "ce" => Some(LossKind::CrossEntropy),
            "dice_plus_ce" => Some(LossKind::DicePlusCe),
            _ => None,
        }
    }
}

/// Which classes of a softmax output enter the Dice average.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassSet {
    /// Every class except channel 0 (background).
    ForegroundOnly,
    AllClasses,
}

impl ClassSet {
    pub fn name(self) -> &'static str {
        match self {
            ClassSet::ForegroundOnly => "foreground",
            ClassSet::AllClasses => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "foreground" => Some(ClassSet::ForegroundOnly),
            "all" => Some(ClassSet::AllClasses),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub class_set: ClassSet,
    pub smooth_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Dice,
            class_set: ClassSet::ForegroundOnly,
            smooth_eps: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smooth_eps >= 0.0) {
            return Err(Error::Config(format!(
                "smooth_eps must be >= 0, got {}",
                self.smooth_eps
            )));
        }
        Ok(())
    }
}

/// Ground truth for one minibatch.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a, T> {
    /// One class index per (sample, voxel), row-major.
    Labels(&'a [usize]),
    /// Binary region masks laid out like the network output `[N, R, ...]`.
    Regions(&'a [T]),
}

/// One-hot encoding of class indices into `[N, K, spatial...]`.
pub fn one_hot<T: Real>(labels: &[usize], num_classes: usize, shape: &[usize]) -> Result<Tensor<T>> {
    if shape.len() < 2 || shape[1] != num_classes {
        return Err(Error::Shape(format!(
            "one_hot target shape {shape:?} does not have {num_classes} channels"
        )));
    }
    let n = shape[0];
    let inner: usize = shape[2..].iter().product();
    if labels.len() != n * inner {
        return Err(Error::Shape(format!(
            "{} labels for {} voxels",
            labels.len(),
            n * inner
        )));
    }
    let mut out = Tensor::zeros(shape);
    let data = out.data_mut();
    for s in 0..n {
        for i in 0..inner {
            let c = labels[s * inner + i];
            if c >= num_classes {
                return Err(Error::Value(format!(
                    "label {c} out of range for {num_classes} classes"
                )));
            }
            data[(s * num_classes + c) * inner + i] = T::one();
        }
    }
    Ok(out)
}

fn pooled_dice<T: Real>(g: &mut Graph<T>, u: Var, v: Var, eps: f64) -> Result<Var> {
    let rank = g.shape(u).len();
    let k = g.shape(u)[1];
    let axes: Vec<usize> = (0..rank).filter(|&a| a != 1).collect();
    let uv = g.mul(u, v)?;
    let intersection = g.sum(uv, &axes)?;
    let su = g.sum(u, &axes)?;
    let sv = g.sum(v, &axes)?;
    let denom = g.add(su, sv)?;
    let denom = g.add_scalar(denom, T::of(eps));
    let ratio = g.div(intersection, denom)?;
    let total = g.sum_all(ratio);
    Ok(g.mul_scalar(total, T::of(-2.0 / k as f64)))
}

fn check_pair<T: Real>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::Shape(format!(
            "{what}: prediction {sa:?} and target {sb:?} differ"
        )));
    }
    if sa.len() < 3 {
        return Err(Error::Shape(format!(
            "{what} expects [N, K, spatial...], got {sa:?}"
        )));
    }
    Ok(())
}

/// Multiclass soft Dice loss of probabilities `u` against one-hot `v`.
pub fn dice_loss<T: Real>(g: &mut Graph<T>, u: Var, v: Var, cfg: &LossConfig) -> Result<Var> {
    check_pair(g, u, v, "dice_loss")?;
    let k = g.shape(u)[1];
    let (u, v) = match cfg.class_set {
        ClassSet::AllClasses => (u, v),
        ClassSet::ForegroundOnly => {
            if k < 2 {
                return Err(Error::Contract(
                    "foreground-only Dice needs a background channel plus at least one class"
                        .into(),
                ));
            }
            (g.narrow(u, 1, 1, k - 1)?, g.narrow(v, 1, 1, k - 1)?)
        }
    };
    pooled_dice(g, u, v, cfg.smooth_eps)
}

/// Soft Dice over independent region channels (sigmoid outputs) against
/// possibly overlapping binary masks. The class-set option does not apply.
pub fn region_dice_loss<T: Real>(
    g: &mut Graph<T>,
    p: Var,
    masks: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    check_pair(g, p, masks, "region_dice_loss")?;
    if let Some(bad) = g
        .value(masks)
        .data()
        .iter()
        .find(|&&m| m != T::zero() && m != T::one())
    {
        return Err(Error::Value(format!(
            "region masks must be binary, found {:?}",
            bad
        )));
    }
    pooled_dice(g, p, masks, cfg.smooth_eps)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)` (class axis 1).
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

/// Loss of `logits` against `target` as selected by `cfg.kind` and the head
/// activation.
///
/// Softmax heads use the multiclass Dice and categorical cross-entropy.
/// Sigmoid heads use the region Dice and the per-region binary cross-entropy.
/// The combined kind is the unweighted sum of both terms.
pub fn segmentation_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    target: Target<'_, T>,
    head: HeadKind,
    cfg: &LossConfig,
) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    match (head, target) {
        (HeadKind::Softmax { num_classes }, Target::Labels(labels)) => {
            let dice = |g: &mut Graph<T>| -> Result<Var> {
                let u = g.softmax(logits, 1)?;
                let v = g.constant(one_hot(labels, num_classes, &shape)?);
                dice_loss(g, u, v, cfg)
            };
            match cfg.kind {
                LossKind::Dice => dice(g),
                LossKind::CrossEntropy => cross_entropy(g, logits, labels),
                LossKind::DicePlusCe => {
                    let d = dice(g)?;
                    let c = cross_entropy(g, logits, labels)?;
                    g.add(d, c)
                }
            }
        }
        (HeadKind::Sigmoid { .. }, Target::Regions(masks)) => {
            let dice = |g: &mut Graph<T>| -> Result<Var> {
                let p = g.sigmoid(logits);
                let m = g.constant(Tensor::new(&shape, masks.to_vec())?);
                region_dice_loss(g, p, m, cfg)
            };
            match cfg.kind {
                LossKind::Dice => dice(g),
                LossKind::CrossEntropy => g.bce_with_logits(logits, masks),
                LossKind::DicePlusCe => {
                    let d = dice(g)?;
                    let c = g.bce_with_logits(logits, masks)?;
                    g.add(d, c)
                }
            }
        }
        (head, _) => Err(Error::Contract(format!(
            "{} head needs {} targets",
            head.name(),
            match head {
                HeadKind::Softmax { .. } => "class-label",
                HeadKind::Sigmoid { .. } => "region-mask",
            }
        ))),
    }
}

/// Dice plus cross-entropy, unweighted. `cfg.kind` must be `DicePlusCe`.
pub fn combined_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    target: Target<'_, T>,
    head: HeadKind,
    cfg: &LossConfig,
) -> Result<Var> {
    if cfg.kind != LossKind::DicePlusCe {
        return Err(Error::Contract(format!(
            "combined_loss called with loss kind `{}`",
            cfg.kind.name()
        )));
    }
    segmentation_loss(g, logits, target, head, cfg)
}
