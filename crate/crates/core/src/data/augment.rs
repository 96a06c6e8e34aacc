//! On-the-fly spatial and intensity augmentation.
//!
//! Rotation, scaling and elastic deformation are composed into one sampling
//! map; the image is resampled trilinearly and the label by nearest neighbour.
//! Coordinates falling outside the patch are clamped to its border, so a
//! transformed label never contains a value the input did not.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::patch::Patch;
use super::volume::LabelVolume;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial axis of a `[.., D, H, W]` volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    /// Position among (D, H, W).
    pub fn dim(self) -> usize {
        match self {
            Axis::Z => 0,
            Axis::Y => 1,
            Axis::X => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Maximum absolute rotation about the x, y and z axes, in degrees.
    pub rotation_max_deg: [f64; 3],
    pub scale_range: (f64, f64),
    /// Spacing of the elastic control grid, in voxels.
    pub elastic_grid: f64,
    /// Standard deviation of control-point displacements, in voxels.
    pub elastic_sigma: f64,
    pub gamma_range: (f64, f64),
    pub mirror_axes: Vec<Axis>,
    pub p_rotation: f64,
    pub p_scale: f64,
    pub p_elastic: f64,
    pub p_gamma: f64,
    /// Probability of flipping along each axis in `mirror_axes`.
    pub p_mirror: f64,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_max_deg: [15.0; 3],
            scale_range: (0.85, 1.25),
            elastic_grid: 8.0,
            elastic_sigma: 2.0,
            gamma_range: (0.7, 1.5),
            mirror_axes: Axis::ALL.to_vec(),
            p_rotation: 0.2,
            p_scale: 0.2,
            p_elastic: 0.2,
            p_gamma: 0.2,
            p_mirror: 0.5,
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Every transform switched off.
    pub fn disabled() -> Self {
        AugmentConfig {
            p_rotation: 0.0,
            p_scale: 0.0,
            p_elastic: 0.0,
            p_gamma: 0.0,
            p_mirror: 0.0,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_rotation", self.p_rotation),
            ("p_scale", self.p_scale),
            ("p_elastic", self.p_elastic),
            ("p_gamma", self.p_gamma),
            ("p_mirror", self.p_mirror),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!(
                "scale_range must be positive and ordered, got ({lo}, {hi})"
            )));
        }
        let (lo, hi) = self.gamma_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!(
                "gamma_range must be positive and ordered, got ({lo}, {hi})"
            )));
        }
        if !(self.elastic_grid > 0.0) || !(self.elastic_sigma >= 0.0) {
            return Err(Error::Config(
                "elastic grid must be positive and sigma non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Reverses `data` (laid out `[channels, D, H, W]`) along one spatial axis.
pub fn flip<T: Copy>(data: &[T], channels: usize, shape: [usize; 3], axis: Axis) -> Vec<T> {
    let [d, h, w] = shape;
    let mut out = Vec::with_capacity(data.len());
    for c in 0..channels {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let (sz, sy, sx) = match axis {
                        Axis::Z => (d - 1 - z, y, x),
                        Axis::Y => (z, h - 1 - y, x),
                        Axis::X => (z, y, w - 1 - x),
                    };
                    out.push(data[((c * d + sz) * h + sy) * w + sx]);
                }
            }
        }
    }
    out
}

pub fn flip_patch(p: &Patch, axis: Axis) -> Result<Patch> {
    let shape = p.spatial();
    let c = p.image.shape()[0];
    Ok(Patch {
        image: Tensor::new(p.image.shape(), flip(p.image.data(), c, shape, axis))?,
        label: p
            .label
            .as_ref()
            .map(|l| LabelVolume::new(shape, l.spacing(), flip(l.data(), 1, shape, axis)))
            .transpose()?,
    })
}

/// Dense displacement field from a coarse grid of Gaussian control-point offsets.
struct Elastic {
    grid: f64,
    dims: [usize; 3],
    /// `[3][gz][gy][gx]` displacement components in (z, y, x) order.
    offsets: Vec<f64>,
}

impl Elastic {
    fn sample<R: Rng + ?Sized>(shape: [usize; 3], grid: f64, sigma: f64, rng: &mut R) -> Self {
        let dims = shape.map(|s| ((s.max(1) - 1) as f64 / grid).ceil() as usize + 2);
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        let n = 3 * dims.iter().product::<usize>();
        let offsets = (0..n).map(|_| normal.sample(rng)).collect();
        Elastic {
            grid,
            dims,
            offsets,
        }
    }

    fn displacement(&self, p: [f64; 3]) -> [f64; 3] {
        let mut i0 = [0usize; 3];
        let mut f = [0f64; 3];
        for a in 0..3 {
            let g = (p[a] / self.grid).clamp(0.0, (self.dims[a] - 1) as f64);
            i0[a] = (g.floor() as usize).min(self.dims[a] - 2);
            f[a] = g - i0[a] as f64;
        }
        let [gz, gy, gx] = self.dims;
        let plane = gz * gy * gx;
        let mut out = [0f64; 3];
        for corner in 0..8 {
            let dz = corner >> 2 & 1;
            let dy = corner >> 1 & 1;
            let dx = corner & 1;
            let wgt = (if dz == 1 { f[0] } else { 1.0 - f[0] })
                * (if dy == 1 { f[1] } else { 1.0 - f[1] })
                * (if dx == 1 { f[2] } else { 1.0 - f[2] });
            let idx = ((i0[0] + dz) * gy + i0[1] + dy) * gx + i0[2] + dx;
            for (c, o) in out.iter_mut().enumerate() {
                *o += wgt * self.offsets[c * plane + idx];
            }
        }
        out
    }
}

fn rotation_zyx(angles_xyz: [f64; 3]) -> [[f64; 3]; 3] {
    let [ax, ay, az] = angles_xyz;
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    // R = Rz * Ry * Rx acting on (x, y, z)
    [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]
}

struct SpatialMap {
    rotation: Option<[[f64; 3]; 3]>,
    scale: f64,
    elastic: Option<Elastic>,
}

impl SpatialMap {
    /// Source coordinate (z, y, x) sampled for output voxel `p`.
    fn source(&self, p: [f64; 3], center: [f64; 3]) -> [f64; 3] {
        let rel = [
            (p[0] - center[0]) / self.scale,
            (p[1] - center[1]) / self.scale,
            (p[2] - center[2]) / self.scale,
        ];
        let mut q = rel;
        if let Some(r) = &self.rotation {
            let v = [rel[2], rel[1], rel[0]];
            let rv = [
                r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
                r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
                r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
            ];
            q = [rv[2], rv[1], rv[0]];
        }
        let mut s = [q[0] + center[0], q[1] + center[1], q[2] + center[2]];
        if let Some(e) = &self.elastic {
            let d = e.displacement(p);
            for a in 0..3 {
                s[a] += d[a];
            }
        }
        s
    }
}

fn resample(p: &Patch, map: &SpatialMap) -> Result<Patch> {
    let shape = p.spatial();
    let [d, h, w] = shape;
    let n = d * h * w;
    let channels = p.image.shape()[0];
    let center = shape.map(|s| (s as f64 - 1.0) / 2.0);
    let src = p.image.data();
    let mut image = vec![0f32; channels * n];
    let mut label = p.label.as_ref().map(|_| vec![0u8; n]);
    let clamp = |v: f64, len: usize| v.clamp(0.0, (len - 1) as f64);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let o = (z * h + y) * w + x;
                let s = map.source([z as f64, y as f64, x as f64], center);
                let s = [clamp(s[0], d), clamp(s[1], h), clamp(s[2], w)];
                let i0 = [s[0].floor() as usize, s[1].floor() as usize, s[2].floor() as usize];
                let i1 = [(i0[0] + 1).min(d - 1), (i0[1] + 1).min(h - 1), (i0[2] + 1).min(w - 1)];
                let f = [s[0] - i0[0] as f64, s[1] - i0[1] as f64, s[2] - i0[2] as f64];
                for c in 0..channels {
                    let base = c * n;
                    let at = |zz: usize, yy: usize, xx: usize| src[base + (zz * h + yy) * w + xx] as f64;
                    let c00 = at(i0[0], i0[1], i0[2]) * (1.0 - f[2]) + at(i0[0], i0[1], i1[2]) * f[2];
                    let c01 = at(i0[0], i1[1], i0[2]) * (1.0 - f[2]) + at(i0[0], i1[1], i1[2]) * f[2];
                    let c10 = at(i1[0], i0[1], i0[2]) * (1.0 - f[2]) + at(i1[0], i0[1], i1[2]) * f[2];
                    let c11 = at(i1[0], i1[1], i0[2]) * (1.0 - f[2]) + at(i1[0], i1[1], i1[2]) * f[2];
                    let c0 = c00 * (1.0 - f[1]) + c01 * f[1];
                    let c1 = c10 * (1.0 - f[1]) + c11 * f[1];
                    image[base + o] = (c0 * (1.0 - f[0]) + c1 * f[0]) as f32;
                }
                if let (Some(out), Some(l)) = (label.as_mut(), p.label.as_ref()) {
                    let r = [
                        s[0].round() as usize,
                        s[1].round() as usize,
                        s[2].round() as usize,
                    ];
                    out[o] = l.data()[(r[0] * h + r[1]) * w + r[2]];
                }
            }
        }
    }
    Ok(Patch {
        image: Tensor::new(p.image.shape(), image)?,
        label: match (label, &p.label) {
            (Some(data), Some(l)) => Some(LabelVolume::new(shape, l.spacing(), data)?),
            _ => None,
        },
    })
}

/// Min-max rescale to [0, 1], raise to `gamma`, map back to the original range.
pub fn gamma_correct(values: &mut [f32], gamma: f64) {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in values.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = (hi - lo) as f64;
    if !(range > 0.0) {
        return;
    }
    for v in values.iter_mut() {
        let t = ((*v - lo) as f64 / range).clamp(0.0, 1.0);
        *v = (t.powf(gamma) * range + lo as f64) as f32;
    }
}

/// Applies the configured random transforms to a patch.
pub fn augment<R: Rng + ?Sized>(p: &Patch, cfg: &AugmentConfig, rng: &mut R) -> Result<Patch> {
    let shape = p.spatial();
    let mut map = SpatialMap {
        rotation: None,
        scale: 1.0,
        elastic: None,
    };
    if rng.random_bool(cfg.p_rotation) {
        let angles = cfg.rotation_max_deg.map(|m| {
            let m = m.abs().to_radians();
            if m > 0.0 {
                rng.random_range(-m..=m)
            } else {
                0.0
            }
        });
        map.rotation = Some(rotation_zyx(angles));
    }
    if rng.random_bool(cfg.p_scale) {
        let (lo, hi) = cfg.scale_range;
        map.scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    }
    if rng.random_bool(cfg.p_elastic) && cfg.elastic_sigma > 0.0 {
        map.elastic = Some(Elastic::sample(shape, cfg.elastic_grid, cfg.elastic_sigma, rng));
    }
    let mut out = if map.rotation.is_some() || map.scale != 1.0 || map.elastic.is_some() {
        resample(p, &map)?
    } else {
        p.clone()
    };

    let channels = out.image.shape()[0];
    let n: usize = shape.iter().product();
    for c in 0..channels {
        if rng.random_bool(cfg.p_gamma) {
            let (lo, hi) = cfg.gamma_range;
            let gamma = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            gamma_correct(&mut out.image.data_mut()[c * n..(c + 1) * n], gamma);
        }
    }

    for &axis in &cfg.mirror_axes {
        if rng.random_bool(cfg.p_mirror) {
            out = flip_patch(&out, axis)?;
        }
    }
    Ok(out)
}
