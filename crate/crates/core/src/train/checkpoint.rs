//! Checkpoint file: a `key=value` text header followed by named tensors.
//!
//! ```text
//! VSEGCKPT1
//! epoch=12
//! lr=2e-5
//! ...
//! tensors=<n>
//! end
//! tensor <name> <dtype> <rank> <dims...>\n<little-endian payload>
//! ...
//! ```

use std::path::Path;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::nn::{HeadKind, ModelConfig, Param, UNet};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &str = "VSEGCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Number of completed epochs when the weights were taken.
    pub epoch: usize,
    pub lr: f64,
    pub ema: f64,
    /// Free-form configuration echo, stored with a `config.` prefix.
    pub config: Vec<(String, String)>,
    pub params: Vec<Param<f32>>,
}

pub fn model_to_pairs(cfg: &ModelConfig) -> Vec<(String, String)> {
    let head = match cfg.head {
        HeadKind::Softmax { num_classes } => format!("softmax:{num_classes}"),
        HeadKind::Sigmoid { num_regions } => format!("sigmoid:{num_regions}"),
    };
    [
        ("model.in_channels", cfg.in_channels.to_string()),
        ("model.base_features", cfg.base_features.to_string()),
        ("model.depth", cfg.depth.to_string()),
        ("model.head", head),
        ("model.leakiness", format!("{:?}", cfg.leakiness)),
        ("model.num_heads", cfg.num_heads.to_string()),
        ("model.norm_eps", format!("{:?}", cfg.norm_eps)),
        ("model.seed", cfg.seed.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

pub fn model_from_pairs(kv: &KeyValues, file: &str) -> Result<ModelConfig> {
    let head_text: String = kv.field("model.head", file)?;
    let (kind, n) = head_text
        .split_once(':')
        .ok_or_else(|| Error::parse(file, "model.head", format!("expected kind:outputs, got `{head_text}`")))?;
    let n: usize = n
        .parse()
        .map_err(|_| Error::parse(file, "model.head", format!("bad output count `{n}`")))?;
    let head = match kind {
        "softmax" => HeadKind::Softmax { num_classes: n },
        "sigmoid" => HeadKind::Sigmoid { num_regions: n },
        _ => return Err(Error::parse(file, "model.head", format!("unknown head kind `{kind}`"))),
    };
    let cfg = ModelConfig {
        in_channels: kv.field("model.in_channels", file)?,
        base_features: kv.field("model.base_features", file)?,
        depth: kv.field("model.depth", file)?,
        head,
        leakiness: kv.field("model.leakiness", file)?,
        num_heads: kv.field("model.num_heads", file)?,
        norm_eps: kv.field("model.norm_eps", file)?,
        seed: kv.field("model.seed", file)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn next_line<'a>(bytes: &'a [u8], pos: &mut usize, file: &str, field: &str) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(file, field, "unexpected end of file"))?;
    *pos += nl + 1;
    std::str::from_utf8(&rest[..nl]).map_err(|_| Error::parse(file, field, "header is not UTF-8"))
}

impl Checkpoint {
    pub fn from_model(net: &UNet<f32>, epoch: usize, lr: f64, ema: f64, config: Vec<(String, String)>) -> Self {
        Checkpoint {
            model: net.config().clone(),
            epoch,
            lr,
            ema,
            config,
            params: net.params().to_vec(),
        }
    }

    pub fn to_model<T: Real>(&self) -> Result<UNet<T>> {
        let mut net = UNet::<T>::new(self.model.clone())?;
        net.load_params(
            self.params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        )?;
        Ok(net)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut kv = KeyValues::new();
        kv.set("epoch", self.epoch.to_string());
        kv.set("lr", format!("{:?}", self.lr));
        kv.set("ema", format!("{:?}", self.ema));
        for (k, v) in model_to_pairs(&self.model) {
            kv.set(k, v);
        }
        for (k, v) in &self.config {
            kv.set(format!("config.{k}"), v.clone());
        }
        kv.set("tensors", self.params.len().to_string());
        let mut out = format!("{CHECKPOINT_MAGIC}\n{}end\n", kv.to_text()).into_bytes();
        for p in &self.params {
            let shape = p.value.shape();
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            out.extend(
                format!("tensor {} {} {} {}\n", p.name, f32::DTYPE, shape.len(), dims.join(" ")).into_bytes(),
            );
            out.extend(f32::to_le_bytes_vec(p.value.data()));
        }
        out
    }

    pub fn decode(bytes: &[u8], file: &str) -> Result<Self> {
        let mut pos = 0;
        if next_line(bytes, &mut pos, file, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::parse(file, "magic", format!("expected `{CHECKPOINT_MAGIC}`")));
        }
        let mut header = String::new();
        loop {
            let line = next_line(bytes, &mut pos, file, "header")?;
            if line == "end" {
                break;
            }
            header.push_str(line);
            header.push('\n');
        }
        let kv = KeyValues::parse(&header, file)?;
        let count: usize = kv.field("tensors", file)?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next_line(bytes, &mut pos, file, "tensor")?.to_string();
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() < 4 || f[0] != "tensor" {
                return Err(Error::parse(file, "tensor", format!("malformed tensor line `{line}`")));
            }
            let name = f[1].to_string();
            if f[2] != f32::DTYPE {
                return Err(Error::parse(file, "dtype", format!("tensor `{name}` has dtype `{}`", f[2])));
            }
            let rank: usize = f[3]
                .parse()
                .map_err(|_| Error::parse(file, "rank", format!("tensor `{name}`: bad rank")))?;
            if f.len() != 4 + rank {
                return Err(Error::parse(file, "shape", format!("tensor `{name}` lists {} dims, rank {rank}", f.len() - 4)));
            }
            let shape = f[4..]
                .iter()
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::parse(file, "shape", format!("tensor `{name}`: bad dimension")))?;
            let nbytes = shape.iter().product::<usize>() * 4;
            let payload = bytes
                .get(pos..pos + nbytes)
                .ok_or_else(|| Error::parse(file, "payload", format!("tensor `{name}` is truncated")))?;
            pos += nbytes;
            let data = payload.chunks_exact(4).map(f32::from_le_chunk).collect();
            params.push(Param {
                name,
                value: Tensor::new(&shape, data)?,
            });
        }
        if pos != bytes.len() {
            return Err(Error::parse(file, "payload", format!("{} trailing bytes", bytes.len() - pos)));
        }
        let config = kv
            .entries()
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(Checkpoint {
            model: model_from_pairs(&kv, file)?,
            epoch: kv.field("epoch", file)?,
            lr: kv.field("lr", file)?,
            ema: kv.field("ema", file)?,
            config,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes, &path.display().to_string())
    }
}
