//! The `VSEG1` volume container and tab-separated case manifests.
//!
//! A volume file is one ASCII header line
//!
//! ```text
//! VSEG1 <dtype> <D> <H> <W> <spacing_x> <spacing_y> <spacing_z>\n
//! ```
//!
//! followed by the raw little-endian payload in x-fastest order. `dtype` is
//! `f32` or `u8`; `f64` is also accepted for double-precision checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::volume::{Case, LabelVolume, Volume};
use crate::error::{Error, Result};

pub const MAGIC: &str = "VSEG1";

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn dtype(&self) -> &'static str {
        match self {
            Payload::F32(_) => "f32",
            Payload::F64(_) => "f64",
            Payload::U8(_) => "u8",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn to_bytes(&self) -> Vec<u8> {
        match self {
            Payload::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Payload::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Payload::U8(v) => v.clone(),
        }
    }

    pub(crate) fn width(dtype: &str) -> Option<usize> {
        match dtype {
            "f32" => Some(4),
            "f64" => Some(8),
            "u8" => Some(1),
            _ => None,
        }
    }

    /// Decodes exactly `count` values; `bytes` must hold them all.
    pub(crate) fn from_bytes(dtype: &str, bytes: &[u8]) -> Payload {
        match dtype {
            "f32" => Payload::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            "f64" => Payload::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ => Payload::U8(bytes.to_vec()),
        }
    }
}

/// Header plus payload of a `VSEG1` file, before interpretation.
#[derive(Clone, Debug, PartialEq)]
pub struct RawVolume {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub payload: Payload,
}

pub fn encode(raw: &RawVolume) -> Vec<u8> {
    let [d, h, w] = raw.shape;
    let [sx, sy, sz] = raw.spacing;
    let mut out = format!(
        "{MAGIC} {} {d} {h} {w} {sx:?} {sy:?} {sz:?}\n",
        raw.payload.dtype()
    )
    .into_bytes();
    out.extend(raw.payload.to_bytes());
    out
}

/// Parses a `VSEG1` image; `name` is used in error messages.
pub fn decode(bytes: &[u8], name: &str) -> Result<RawVolume> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(name, "header", "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::parse(name, "header", "header is not ASCII"))?;
    let fields: Vec<&str> = header.split_ascii_whitespace().collect();
    const NAMES: [&str; 8] = [
        "magic",
        "dtype",
        "D",
        "H",
        "W",
        "spacing_x",
        "spacing_y",
        "spacing_z",
    ];
    if fields.len() != NAMES.len() {
        let missing = NAMES.get(fields.len()).unwrap_or(&"header");
        return Err(Error::parse(
            name,
            *missing,
            format!("expected {} header fields, found {}", NAMES.len(), fields.len()),
        ));
    }
    if fields[0] != MAGIC {
        return Err(Error::parse(
            name,
            "magic",
            format!("expected {MAGIC}, found {:?}", fields[0]),
        ));
    }
    let dtype = fields[1];
    let width = Payload::width(dtype)
        .ok_or_else(|| Error::parse(name, "dtype", format!("unknown dtype {dtype:?}")))?;
    let mut shape = [0usize; 3];
    for a in 0..3 {
        shape[a] = fields[2 + a]
            .parse()
            .map_err(|_| Error::parse(name, NAMES[2 + a], format!("not a count: {:?}", fields[2 + a])))?;
    }
    let mut spacing = [0f64; 3];
    for a in 0..3 {
        let v: f64 = fields[5 + a].parse().map_err(|_| {
            Error::parse(name, NAMES[5 + a], format!("not a number: {:?}", fields[5 + a]))
        })?;
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::parse(name, NAMES[5 + a], "spacing must be positive"));
        }
        spacing[a] = v;
    }
    let count: usize = shape.iter().product();
    let body = &bytes[nl + 1..];
    let expected = count * width;
    if body.len() < expected {
        return Err(Error::parse(
            name,
            "payload",
            format!(
                "truncated: header declares {count} voxels ({expected} bytes), found {} bytes",
                body.len()
            ),
        ));
    }
    if body.len() > expected {
        return Err(Error::parse(
            name,
            "payload",
            format!(
                "{} trailing bytes after {count} voxels",
                body.len() - expected
            ),
        ));
    }
    Ok(RawVolume {
        shape,
        spacing,
        payload: Payload::from_bytes(dtype, body),
    })
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<RawVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

pub fn write_raw(raw: &RawVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(raw)).map_err(|e| Error::io(path, e))
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_raw(
        &RawVolume {
            shape: v.shape(),
            spacing: v.spacing(),
            payload: Payload::F32(v.data().to_vec()),
        },
        path,
    )
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    match raw.payload {
        Payload::F32(data) => Volume::new(raw.shape, raw.spacing, data),
        other => Err(Error::parse(
            path.display(),
            "dtype",
            format!("expected f32 image, found {}", other.dtype()),
        )),
    }
}

pub fn write_labels(l: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    write_raw(
        &RawVolume {
            shape: l.shape(),
            spacing: l.spacing(),
            payload: Payload::U8(l.data().to_vec()),
        },
        path,
    )
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    match raw.payload {
        Payload::U8(data) => LabelVolume::new(raw.shape, raw.spacing, data).map_err(|e| {
            Error::parse(path.display(), "payload", e.to_string())
        }),
        other => Err(Error::parse(
            path.display(),
            "dtype",
            format!("expected u8 labels, found {}", other.dtype()),
        )),
    }
}

/// One manifest row: where a case's files live.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseDescriptor {
    pub id: String,
    pub dataset_tag: usize,
    pub modalities: [PathBuf; 4],
    pub label: Option<PathBuf>,
}

impl CaseDescriptor {
    pub fn load(&self) -> Result<Case> {
        let m = |i: usize| read_volume(&self.modalities[i]);
        let modalities = [m(0)?, m(1)?, m(2)?, m(3)?];
        let label = self.label.as_ref().map(read_labels).transpose()?;
        Case::new(self.id.clone(), modalities, label, self.dataset_tag)
    }
}

/// Reads a manifest: `id, dataset_tag, t1, t1ce, t2, flair[, label]`,
/// tab-separated, `#` starts a comment. Relative paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<CaseDescriptor>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim_end();
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        let at = |field: &str| format!("line {}: {field}", lineno + 1);
        if cols.len() != 6 && cols.len() != 7 {
            return Err(Error::parse(
                &name,
                at("columns"),
                format!("expected 6 or 7 tab-separated columns, found {}", cols.len()),
            ));
        }
        let dataset_tag = cols[1].parse().map_err(|_| {
            Error::parse(&name, at("dataset_tag"), format!("not a count: {:?}", cols[1]))
        })?;
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        out.push(CaseDescriptor {
            id: cols[0].to_string(),
            dataset_tag,
            modalities: [
                resolve(cols[2]),
                resolve(cols[3]),
                resolve(cols[4]),
                resolve(cols[5]),
            ],
            label: cols.get(6).map(|p| resolve(p)),
        });
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, cases: &[CaseDescriptor]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("# id\tdataset_tag\tt1\tt1ce\tt2\tflair\tlabel\n");
    for c in cases {
        text.push_str(&c.id);
        text.push('\t');
        text.push_str(&c.dataset_tag.to_string());
        for p in c.modalities.iter().chain(c.label.as_ref()) {
            text.push('\t');
            text.push_str(&p.display().to_string());
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a manifest and loads every case it lists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<Case>> {
    read_manifest(path)?.iter().map(CaseDescriptor::load).collect()
}

/// Writes each volume of `case` into `dir` as `<id>_<modality>.vseg` and
/// returns the matching manifest row (paths relative to `dir`).
pub fn save_case(case: &Case, dir: impl AsRef<Path>) -> Result<CaseDescriptor> {
    let dir = dir.as_ref();
    let mut modalities: [PathBuf; 4] = Default::default();
    for (i, (name, v)) in super::MODALITIES.iter().zip(&case.modalities).enumerate() {
        let file = format!("{}_{name}.vseg", case.id);
        write_volume(v, dir.join(&file))?;
        modalities[i] = PathBuf::from(file);
    }
    let label = match &case.label {
        Some(l) => {
            let file = format!("{}_seg.vseg", case.id);
            write_labels(l, dir.join(&file))?;
            Some(PathBuf::from(file))
        }
        None => None,
    };
    Ok(CaseDescriptor {
        id: case.id.clone(),
        dataset_tag: case.dataset_tag,
        modalities,
        label,
    })
}
