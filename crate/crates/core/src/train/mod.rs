//! Adam training with a plateau schedule, early stopping and multi-head
//! cotraining.

mod adam;
mod checkpoint;
mod schedule;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{model_from_pairs, model_to_pairs, Checkpoint, CHECKPOINT_MAGIC};
pub use schedule::{EpochOutcome, Schedule, ScheduleConfig, IMPROVEMENT_TOL};

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::data::{center_patch, for_each_batch, AugmentConfig, Batch, BatchPlan, Case, LabelVolume};
use crate::error::{Error, Result};
use crate::infer::{case_channels, pad, Padding};
use crate::loss::{segmentation_loss, LossConfig, Target};
use crate::nn::{HeadKind, UNet};
use crate::regions::labels_to_regions;
use crate::tensor::{Graph, Tensor, Var};

/// How the per-epoch validation loss is computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ValidationMode {
    /// Center crop of the training patch size.
    #[default]
    CenterPatch,
    /// The whole case, zero-padded to the network's size divisor.
    FullVolume,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub stop_patience: usize,
    pub ema_alpha: f64,
    pub weight_decay: f64,
    pub batches_per_epoch: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub validation: ValidationMode,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Batch producer threads; 0 builds batches on the training thread.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 1e-4,
            lr_factor: 5.0,
            lr_patience: 30,
            stop_patience: 60,
            ema_alpha: 0.95,
            weight_decay: 1e-5,
            batches_per_epoch: 250,
            max_epochs: 500,
            batch_size: 2,
            patch_size: 128,
            validation: ValidationMode::CenterPatch,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.ema_alpha > 0.0 && self.ema_alpha < 1.0) {
            return fail(format!("ema_alpha must lie in (0, 1), got {}", self.ema_alpha));
        }
        if self.lr_patience == 0 || self.stop_patience == 0 {
            return fail("patience values must be positive".into());
        }
        if !(self.lr_factor > 1.0) {
            return fail(format!("lr_factor must exceed 1, got {}", self.lr_factor));
        }
        if !(self.lr_init > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("lr_init must be positive and weight_decay non-negative".into());
        }
        if self.batches_per_epoch == 0 || self.max_epochs == 0 || self.batch_size == 0 || self.patch_size == 0 {
            return fail("batch, epoch and patch counts must be positive".into());
        }
        self.loss.validate()?;
        self.augment.validate()
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            lr_init: self.lr_init,
            lr_factor: self.lr_factor,
            lr_patience: self.lr_patience,
            stop_patience: self.stop_patience,
            ema_alpha: self.ema_alpha,
            max_epochs: self.max_epochs,
        }
    }

    /// Hyperparameters as `key=value` pairs for logs and checkpoints.
    pub fn echo(&self) -> Vec<(String, String)> {
        [
            ("lr_init", format!("{:e}", self.lr_init)),
            ("lr_factor", format!("{}", self.lr_factor)),
            ("lr_patience_epochs", self.lr_patience.to_string()),
            ("stop_patience_epochs", self.stop_patience.to_string()),
            ("ema_alpha", format!("{}", self.ema_alpha)),
            ("weight_decay", format!("{:e}", self.weight_decay)),
            ("batches_per_epoch", self.batches_per_epoch.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("loss.kind", self.loss.kind.name().to_string()),
            ("loss.class_set", self.loss.class_set.name().to_string()),
            ("loss.smooth_eps", format!("{:e}", self.loss.smooth_eps)),
            ("seed", self.seed.to_string()),
            ("workers", self.workers.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub ema: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub seconds: f64,
}

pub const LOG_COLUMNS: [&str; 6] = ["epoch", "train_loss", "val_loss", "ema", "lr", "seconds"];

/// Tab-separated log with `# key=value` header lines.
pub fn format_log(header: &[(String, String)], rows: &[EpochRecord]) -> String {
    let mut s = String::new();
    for (k, v) in header {
        let _ = writeln!(s, "# {k}={v}");
    }
    s.push_str(&LOG_COLUMNS.join("\t"));
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{:?}\t{:?}\t{:?}\t{:e}\t{:.3}",
            r.epoch, r.train_loss, r.val_loss, r.ema, r.lr, r.seconds
        );
    }
    s
}

pub fn save_log(path: impl AsRef<Path>, header: &[(String, String)], rows: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_log(header, rows)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights at the epoch with the lowest validation-loss average.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<EpochRecord>,
    /// Optimizer steps taken.
    pub steps: usize,
}

/// Owned loss targets for a group of samples.
enum OwnedTarget {
    Labels(Vec<usize>),
    Regions(Vec<f32>),
}

impl OwnedTarget {
    fn build(head: HeadKind, labels: &[LabelVolume]) -> Result<Self> {
        match head {
            HeadKind::Softmax { num_classes } => {
                if num_classes != 4 {
                    return Err(Error::Contract(format!(
                        "label targets need a 4-class head, got {num_classes}"
                    )));
                }
                Ok(OwnedTarget::Labels(labels.iter().flat_map(|l| l.to_classes()).collect()))
            }
            HeadKind::Sigmoid { num_regions } => {
                if num_regions != 3 {
                    return Err(Error::Contract(format!(
                        "region targets need a 3-region head, got {num_regions}"
                    )));
                }
                Ok(OwnedTarget::Regions(
                    labels.iter().flat_map(|l| labels_to_regions(l).to_targets::<f32>()).collect(),
                ))
            }
        }
    }

    fn as_target(&self) -> Target<'_, f32> {
        match self {
            OwnedTarget::Labels(l) => Target::Labels(l),
            OwnedTarget::Regions(r) => Target::Regions(r),
        }
    }
}

/// Loss graph of one minibatch.
#[derive(Clone, Debug)]
pub struct MinibatchLoss {
    /// Mean of `terms`.
    pub total: Var,
    /// One loss per head, in head order of first appearance.
    pub terms: Vec<Var>,
    pub heads: Vec<usize>,
}

/// Shared trunk over the whole batch, then each contiguous run of samples
/// goes through the head named by `heads[i]`; the total is the mean of the
/// per-head losses. A head sees gradient only from its own samples.
pub fn minibatch_loss(
    net: &UNet<f32>,
    g: &mut Graph<f32>,
    p: &crate::nn::BoundParams,
    image: Var,
    labels: &[LabelVolume],
    heads: &[usize],
    loss: &LossConfig,
) -> Result<MinibatchLoss> {
    let n = g.shape(image)[0];
    if labels.len() != n || heads.len() != n {
        return Err(Error::Shape(format!(
            "{n} samples but {} labels and {} head assignments",
            labels.len(),
            heads.len()
        )));
    }
    let features = net.features(g, p, image)?;
    let mut runs: Vec<(usize, usize, usize)> = Vec::new();
    for (i, &h) in heads.iter().enumerate() {
        match runs.last_mut() {
            Some((head, _, len)) if *head == h => *len += 1,
            _ => runs.push((h, i, 1)),
        }
    }
    let head_kind = net.config().head;
    let mut terms = Vec::with_capacity(runs.len());
    for &(head, start, len) in &runs {
        let f = if runs.len() == 1 {
            features
        } else {
            g.narrow(features, 0, start, len)?
        };
        let logits = net.head_logits(g, p, f, head)?;
        let target = OwnedTarget::build(head_kind, &labels[start..start + len])?;
        terms.push(segmentation_loss(g, logits, target.as_target(), head_kind, loss)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    if terms.len() > 1 {
        total = g.mul_scalar(total, 1.0 / terms.len() as f32);
    }
    Ok(MinibatchLoss {
        total,
        terms,
        heads: runs.iter().map(|r| r.0).collect(),
    })
}

/// Forward, backward and one Adam update on `batch`; returns the loss.
pub fn train_step(
    net: &mut UNet<f32>,
    adam: &mut AdamState,
    batch: &Batch,
    heads: &[usize],
    loss: &LossConfig,
    lr: f64,
    weight_decay: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = net.bind(&mut g, true);
    let x = g.constant(batch.image.clone());
    let ml = minibatch_loss(net, &mut g, &p, x, &batch.labels, heads, loss)?;
    let value = g.value(ml.total).item()? as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("minibatch loss is {value}")));
    }
    g.backward(ml.total)?;
    let grads = p.grads(&g);
    adam_step(net.params_mut(), &grads, adam, lr, weight_decay)?;
    Ok(value)
}

/// Loss of one case without gradients.
pub fn case_loss(net: &UNet<f32>, case: &Case, head: usize, cfg: &TrainConfig) -> Result<f64> {
    let label = case
        .label
        .as_ref()
        .ok_or_else(|| Error::Value(format!("validation case `{}` has no reference label", case.id)))?;
    let (image, label) = match cfg.validation {
        ValidationMode::CenterPatch => {
            let p = center_patch(case, [cfg.patch_size; 3])?;
            (p.image, p.label.expect("labeled case"))
        }
        ValidationMode::FullVolume => {
            let shape = case.shape();
            let pd = Padding::to_multiple(shape, net.config().size_divisor());
            let s = pd.padded(shape);
            let image = Tensor::new(&[4, s[0], s[1], s[2]], pad(&case_channels(case), 4, shape, pd, 0.0))?;
            let label = LabelVolume::new(s, case.spacing(), pad(label.data(), 1, shape, pd, 0))?;
            (image, label)
        }
    };
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let image = image.reshape(&shape)?;
    let mut g = Graph::new();
    let p = net.bind(&mut g, false);
    let x = g.constant(image);
    let ml = minibatch_loss(net, &mut g, &p, x, &[label], &[head], &cfg.loss)?;
    Ok(g.value(ml.total).item()? as f64)
}

/// Mean validation loss over `(case, head)` pairs.
pub fn validation_loss(net: &UNet<f32>, val: &[(&Case, usize)], cfg: &TrainConfig) -> Result<f64> {
    let mut sum = 0.0;
    for &(case, head) in val {
        sum += case_loss(net, case, head, cfg)?;
    }
    Ok(sum / val.len() as f64)
}

/// General loop: each minibatch holds `per_source` samples from every
/// source, and source `s` trains head `s`.
pub fn fit(
    net: &mut UNet<f32>,
    sources: Vec<&[Case]>,
    per_source: usize,
    val: &[(&Case, usize)],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(Error::Contract("training needs at least one validation case".into()));
    }
    if sources.len() > net.config().num_heads {
        return Err(Error::Contract(format!(
            "{} training sources but the network has {} heads",
            sources.len(),
            net.config().num_heads
        )));
    }
    let plan = BatchPlan {
        sources,
        per_source,
        patch: [cfg.patch_size; 3],
        augment: cfg.augment.clone(),
    };
    let heads: Vec<usize> = (0..plan.sources.len())
        .flat_map(|s| std::iter::repeat_n(s, per_source))
        .collect();
    let mut adam = AdamState::new(net.params());
    let mut schedule = Schedule::new(cfg.schedule());
    let echo = cfg.echo();
    let mut best = Checkpoint::from_model(net, 0, cfg.lr_init, f64::INFINITY, echo.clone());
    let mut log = Vec::new();
    let mut steps = 0;
    loop {
        let epoch = schedule.epoch;
        let started = Instant::now();
        let lr = schedule.lr();
        let mut train_sum = 0.0;
        for_each_batch(&plan, cfg.batches_per_epoch, cfg.workers, cfg.seed, epoch, |_, batch| {
            let l = train_step(net, &mut adam, &batch, &heads, &cfg.loss, lr, cfg.weight_decay)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {}: {m}", epoch + 1)),
                    e => e,
                })?;
            train_sum += l;
            steps += 1;
            Ok(())
        })?;
        let val_loss = validation_loss(net, val, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("epoch {}: validation loss is {val_loss}", epoch + 1)));
        }
        let outcome = schedule.update(val_loss);
        let record = EpochRecord {
            epoch: schedule.epoch,
            train_loss: train_sum / cfg.batches_per_epoch as f64,
            val_loss,
            ema: schedule.ema.expect("set by update"),
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        observer(&record);
        log.push(record);
        if outcome.improved {
            best = Checkpoint::from_model(net, schedule.epoch, lr, record.ema, echo.clone());
        }
        if outcome.stop {
            break;
        }
    }
    let last = Checkpoint::from_model(
        net,
        schedule.epoch,
        schedule.lr(),
        schedule.ema.unwrap_or(f64::NAN),
        echo,
    );
    Ok(TrainOutcome { best, last, log, steps })
}

/// Single-dataset training with `cfg.batch_size` samples per minibatch.
pub fn train(net: &mut UNet<f32>, train_cases: &[Case], val_cases: &[Case], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(net, train_cases, val_cases, cfg, &mut |_| {})
}

pub fn train_observed(
    net: &mut UNet<f32>,
    train_cases: &[Case],
    val_cases: &[Case],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train_cases.is_empty() {
        return Err(Error::Contract("training needs at least one case".into()));
    }
    let val: Vec<(&Case, usize)> = val_cases.iter().map(|c| (c, 0)).collect();
    fit(net, vec![train_cases], cfg.batch_size, &val, cfg, observer)
}

/// Two-dataset cotraining: every minibatch holds one sample of each dataset,
/// routed to heads 0 and 1, and the loss is the mean of the two head losses.
pub fn cotrain(
    net: &mut UNet<f32>,
    cases_a: &[Case],
    cases_b: &[Case],
    val_a: &[Case],
    val_b: &[Case],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cotrain_observed(net, cases_a, cases_b, val_a, val_b, cfg, &mut |_| {})
}

pub fn cotrain_observed(
    net: &mut UNet<f32>,
    cases_a: &[Case],
    cases_b: &[Case],
    val_a: &[Case],
    val_b: &[Case],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if net.config().num_heads != 2 {
        return Err(Error::Contract(format!(
            "cotraining needs a 2-head network, got {} heads",
            net.config().num_heads
        )));
    }
    if cases_a.is_empty() || cases_b.is_empty() {
        return Err(Error::Contract("both cotraining datasets need cases".into()));
    }
    let val: Vec<(&Case, usize)> = val_a
        .iter()
        .map(|c| (c, 0))
        .chain(val_b.iter().map(|c| (c, 1)))
        .collect();
    fit(net, vec![cases_a, cases_b], 1, &val, cfg, observer)
}
