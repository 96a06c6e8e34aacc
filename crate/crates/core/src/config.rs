//! Flat `key=value` run configuration.
//!
//! Every tunable of the pipeline is a named key with a default; unknown keys
//! are rejected so typos cannot silently fall back to defaults.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::{AugmentConfig, Axis, SynthConfig};
use crate::error::{Error, Result};
use crate::loss::{ClassSet, LossConfig, LossKind};
use crate::metrics::{EmptySentinel, MetricConventions};
use crate::nn::{HeadKind, ModelConfig};
use crate::train::{TrainConfig, ValidationMode};

/// Ordered `key=value` pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses lines of `key=value`; blank lines and `#` comments are skipped
    /// and a repeated key overrides the earlier value.
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::parse(file, format!("line {}", n + 1), format!("expected key=value, got `{line}`"))
            })?;
            kv.set(k.trim(), v.trim());
        }
        Ok(kv)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let (key, value) = (key.into(), value.into());
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Typed value of a required key.
    pub fn field<T: FromStr>(&self, key: &str, file: &str) -> Result<T> {
        let v = self
            .get(key)
            .ok_or_else(|| Error::parse(file, key, "missing key"))?;
        v.parse()
            .map_err(|_| Error::parse(file, key, format!("cannot parse `{v}`")))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

/// Keys and defaults. Trainer keys are unprefixed.
const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("workers", "1"),
    ("model.in_channels", "4"),
    ("model.base_features", "30"),
    ("model.depth", "5"),
    ("model.head", "softmax"),
    ("model.leakiness", "1e-2"),
    ("model.norm_eps", "1e-5"),
    ("model.num_heads", "1"),
    ("loss.kind", "dice"),
    ("loss.class_set", "foreground"),
    ("loss.smooth_eps", "1e-5"),
    ("lr_init", "1e-4"),
    ("lr_factor", "5"),
    ("lr_patience_epochs", "30"),
    ("stop_patience_epochs", "60"),
    ("ema_alpha", "0.95"),
    ("weight_decay", "1e-5"),
    ("batches_per_epoch", "250"),
    ("max_epochs", "500"),
    ("batch_size", "2"),
    ("patch_size", "128"),
    ("validation", "center_patch"),
    ("augment.rotation_max_deg", "15"),
    ("augment.scale_min", "0.85"),
    ("augment.scale_max", "1.25"),
    ("augment.elastic_grid", "8"),
    ("augment.elastic_sigma", "2"),
    ("augment.gamma_min", "0.7"),
    ("augment.gamma_max", "1.5"),
    ("augment.mirror_axes", "x,y,z"),
    ("augment.p_rotation", "0.2"),
    ("augment.p_scale", "0.2"),
    ("augment.p_elastic", "0.2"),
    ("augment.p_gamma", "0.2"),
    ("augment.p_mirror", "0.5"),
    ("synth.size", "32"),
    ("synth.et_free_fraction", "0.25"),
    ("synth.noise", "0.1"),
    ("predict.threshold", "0.5"),
    ("predict.memory_budget_mb", "4096"),
    ("metrics.hd95_sentinel", "volume_diagonal"),
];

/// The fully resolved configuration of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: KeyValues,
    source: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut values = KeyValues::new();
        for (k, v) in DEFAULTS {
            values.set(*k, *v);
        }
        RunConfig {
            values,
            source: "run_config".into(),
        }
    }
}

fn parse_list<T: FromStr>(s: &str) -> Option<Vec<T>> {
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

impl RunConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        DEFAULTS.iter().map(|(k, _)| *k)
    }

    /// Defaults overridden by the keys of a config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file = path.display().to_string();
        let kv = KeyValues::parse(&text, &file)?;
        let mut cfg = RunConfig {
            source: file,
            ..RunConfig::default()
        };
        for (k, v) in kv.entries() {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.values.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !DEFAULTS.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        self.values.set(key, value);
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).expect("every known key has a value")
    }

    pub fn values(&self) -> &KeyValues {
        &self.values
    }

    pub fn to_text(&self) -> String {
        self.values.to_text()
    }

    fn value<T: FromStr>(&self, key: &str) -> Result<T> {
        self.values.field(key, &self.source)
    }

    fn bad(&self, key: &str, msg: impl Into<String>) -> Error {
        Error::parse(&self.source, key, msg)
    }

    pub fn seed(&self) -> Result<u64> {
        self.value("seed")
    }

    pub fn workers(&self) -> Result<usize> {
        self.value("workers")
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let head = match self.get("model.head") {
            "softmax" => HeadKind::Softmax { num_classes: 4 },
            "sigmoid" => HeadKind::Sigmoid { num_regions: 3 },
            other => {
                return Err(self.bad("model.head", format!("expected softmax or sigmoid, got `{other}`")))
            }
        };
        let cfg = ModelConfig {
            in_channels: self.value("model.in_channels")?,
            base_features: self.value("model.base_features")?,
            depth: self.value("model.depth")?,
            head,
            leakiness: self.value("model.leakiness")?,
            num_heads: self.value("model.num_heads")?,
            norm_eps: self.value("model.norm_eps")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn loss(&self) -> Result<LossConfig> {
        let kind = LossKind::parse(self.get("loss.kind"))
            .ok_or_else(|| self.bad("loss.kind", "expected dice, ce or dice_plus_ce"))?;
        let class_set = ClassSet::parse(self.get("loss.class_set"))
            .ok_or_else(|| self.bad("loss.class_set", "expected foreground or all"))?;
        let cfg = LossConfig {
            kind,
            class_set,
            smooth_eps: self.value("loss.smooth_eps")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn augment(&self) -> Result<AugmentConfig> {
        let rot = self.get("augment.rotation_max_deg");
        let rotation_max_deg = match parse_list::<f64>(rot).as_deref() {
            Some([r]) => [*r; 3],
            Some([x, y, z]) => [*x, *y, *z],
            _ => return Err(self.bad("augment.rotation_max_deg", "expected one or three angles")),
        };
        let axes = self.get("augment.mirror_axes");
        let mut mirror_axes = Vec::new();
        for a in axes.split(',').map(str::trim).filter(|a| !a.is_empty() && *a != "none") {
            let axis = Axis::ALL
                .into_iter()
                .find(|x| x.name() == a)
                .ok_or_else(|| self.bad("augment.mirror_axes", format!("unknown axis `{a}`")))?;
            mirror_axes.push(axis);
        }
        let cfg = AugmentConfig {
            rotation_max_deg,
            scale_range: (self.value("augment.scale_min")?, self.value("augment.scale_max")?),
            elastic_grid: self.value("augment.elastic_grid")?,
            elastic_sigma: self.value("augment.elastic_sigma")?,
            gamma_range: (self.value("augment.gamma_min")?, self.value("augment.gamma_max")?),
            mirror_axes,
            p_rotation: self.value("augment.p_rotation")?,
            p_scale: self.value("augment.p_scale")?,
            p_elastic: self.value("augment.p_elastic")?,
            p_gamma: self.value("augment.p_gamma")?,
            p_mirror: self.value("augment.p_mirror")?,
            rng_seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let validation = match self.get("validation") {
            "center_patch" => ValidationMode::CenterPatch,
            "full_volume" => ValidationMode::FullVolume,
            other => {
                return Err(self.bad("validation", format!("expected center_patch or full_volume, got `{other}`")))
            }
        };
        let cfg = TrainConfig {
            lr_init: self.value("lr_init")?,
            lr_factor: self.value("lr_factor")?,
            lr_patience: self.value("lr_patience_epochs")?,
            stop_patience: self.value("stop_patience_epochs")?,
            ema_alpha: self.value("ema_alpha")?,
            weight_decay: self.value("weight_decay")?,
            batches_per_epoch: self.value("batches_per_epoch")?,
            max_epochs: self.value("max_epochs")?,
            batch_size: self.value("batch_size")?,
            patch_size: self.value("patch_size")?,
            validation,
            loss: self.loss()?,
            augment: self.augment()?,
            seed: self.seed()?,
            workers: self.workers()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        let cfg = SynthConfig {
            et_free_fraction: self.value("synth.et_free_fraction")?,
            noise: self.value("synth.noise")?,
            ..SynthConfig::cube(self.value("synth.size")?)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn threshold(&self) -> Result<f64> {
        self.value("predict.threshold")
    }

    pub fn memory_budget_bytes(&self) -> Result<usize> {
        Ok(self.value::<usize>("predict.memory_budget_mb")? << 20)
    }

    pub fn metric_conventions(&self) -> Result<MetricConventions> {
        let sentinel = match self.get("metrics.hd95_sentinel") {
            "volume_diagonal" => EmptySentinel::VolumeDiagonal,
            v => EmptySentinel::Fixed(v.parse().map_err(|_| {
                self.bad("metrics.hd95_sentinel", format!("expected volume_diagonal or a number, got `{v}`"))
            })?),
        };
        Ok(MetricConventions { sentinel })
    }
}
