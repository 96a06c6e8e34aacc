//! Synthetic multi-modal tumor cases for desk-scale experiments.
//!
//! Each case is an ellipsoidal "brain" (exactly zero outside) carrying a
//! slowly varying tissue background, and a tumor made of nested ellipsoids:
//! edema around a core whose outer shell enhances and whose interior is
//! necrotic. A configurable fraction of cases has no enhancing tissue at all.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::volume::{Case, LabelVolume, Volume};
use crate::error::{Error, Result};

pub const MIN_SYNTH_SIZE: usize = 16;

/// Normalized core radius beyond which core voxels enhance.
pub const RIM_START: f64 = 0.65;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Volume shape (D, H, W).
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Probability that a case has no enhancing voxels.
    pub et_free_fraction: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Amplitude of the smooth background variation.
    pub background_amplitude: f64,
    pub dataset_tag: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            shape: [32; 3],
            spacing: [1.0; 3],
            et_free_fraction: 0.25,
            noise: 0.1,
            background_amplitude: 0.1,
            dataset_tag: 0,
        }
    }
}

impl SynthConfig {
    pub fn cube(size: usize) -> Self {
        SynthConfig {
            shape: [size; 3],
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&s| s < MIN_SYNTH_SIZE) {
            return Err(Error::Value(format!(
                "synthetic volumes need at least {MIN_SYNTH_SIZE} voxels per axis, got {:?}",
                self.shape
            )));
        }
        if !(0.0..=1.0).contains(&self.et_free_fraction) {
            return Err(Error::Value(format!(
                "et_free_fraction must lie in [0, 1], got {}",
                self.et_free_fraction
            )));
        }
        if !(self.noise >= 0.0) || !(self.background_amplitude >= 0.0) {
            return Err(Error::Value("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

/// Mean intensity per tissue, indexed [modality][tissue] with tissue order
/// brain, necrosis, edema, enhancing.
const CONTRAST: [[f64; 4]; 4] = [
    [1.0, 0.5, 0.8, 0.9],
    [1.0, 0.5, 0.85, 2.0],
    [1.0, 1.6, 1.8, 1.4],
    [1.0, 1.3, 2.0, 1.5],
];

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Normalized radius: < 1 inside, 1 on the surface.
    fn rho(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Sum of a few random low-frequency cosines.
struct SmoothField {
    waves: Vec<([f64; 3], f64, f64)>,
}

impl SmoothField {
    fn sample<R: Rng + ?Sized>(shape: [usize; 3], amplitude: f64, rng: &mut R) -> Self {
        let waves = (0..3)
            .map(|_| {
                let k = shape.map(|s| rng.random_range(0.5..1.5) * std::f64::consts::PI / s as f64);
                (k, rng.random_range(0.0..std::f64::consts::TAU), amplitude / 3.0)
            })
            .collect();
        SmoothField { waves }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        self.waves
            .iter()
            .map(|(k, phase, amp)| amp * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).cos())
            .sum()
    }
}

/// One synthetic case drawn from `rng`.
pub fn synth_case<R: Rng + ?Sized>(id: &str, cfg: &SynthConfig, rng: &mut R) -> Result<Case> {
    cfg.validate()?;
    let shape = cfg.shape;
    let dims = shape.map(|s| s as f64);
    let brain = Ellipsoid {
        center: dims.map(|d| (d - 1.0) / 2.0 + rng.random_range(-0.5..0.5)),
        radii: dims.map(|d| d * rng.random_range(0.4..0.46)),
    };
    let min_dim = dims.iter().cloned().fold(f64::INFINITY, f64::min);
    let edema_radii = [0; 3].map(|_| min_dim * rng.random_range(0.2..0.3));
    let offset = [0; 3].map(|_| rng.random_range(-1.0..1.0));
    let tumor_center = [0, 1, 2].map(|a| {
        let room = (brain.radii[a] - edema_radii[a]).max(0.0) * 0.5;
        brain.center[a] + offset[a] * room
    });
    let edema = Ellipsoid {
        center: tumor_center,
        radii: edema_radii,
    };
    let core_scale = rng.random_range(0.5..0.7);
    let core = Ellipsoid {
        center: tumor_center,
        radii: edema_radii.map(|r| r * core_scale),
    };
    let et_free = rng.random_bool(cfg.et_free_fraction);

    let fields: Vec<SmoothField> = (0..4)
        .map(|_| SmoothField::sample(shape, cfg.background_amplitude, rng))
        .collect();
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Value(e.to_string()))?;

    let n: usize = shape.iter().product();
    let mut labels = vec![0u8; n];
    let mut channels = vec![vec![0f32; n]; 4];
    let mut i = 0;
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let p = [z as f64, y as f64, x as f64];
                if brain.rho(p) <= 1.0 {
                    let rc = core.rho(p);
                    let (label, tissue) = if rc <= 1.0 {
                        if !et_free && rc >= RIM_START {
                            (4, 3)
                        } else {
                            (1, 1)
                        }
                    } else if edema.rho(p) <= 1.0 {
                        (2, 2)
                    } else {
                        (0, 0)
                    };
                    labels[i] = label;
                    for (m, ch) in channels.iter_mut().enumerate() {
                        let v = CONTRAST[m][tissue] + fields[m].at(p) + noise.sample(rng);
                        // inside the brain values must stay nonzero
                        ch[i] = v.max(1e-3) as f32;
                    }
                }
                i += 1;
            }
        }
    }
    let mut vols = channels
        .into_iter()
        .map(|d| Volume::new(shape, cfg.spacing, d));
    let modalities = [
        vols.next().unwrap()?,
        vols.next().unwrap()?,
        vols.next().unwrap()?,
        vols.next().unwrap()?,
    ];
    let label = LabelVolume::new(shape, cfg.spacing, labels)?;
    Case::new(id, modalities, Some(label), cfg.dataset_tag)
}

/// `n` cases; case `i` uses its own ChaCha stream of `seed`, so any case can
/// be regenerated alone and cohorts of different sizes share a prefix.
pub fn synth_cohort(n: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<Case>> {
    cfg.validate()?;
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            synth_case(&format!("synth{i:04}"), cfg, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn too_small_is_rejected() {
        assert!(synth_cohort(1, &SynthConfig::cube(15), 0).is_err());
    }

    #[test]
    fn outside_brain_is_zero_and_inside_is_not() {
        let c = &synth_cohort(1, &SynthConfig::cube(16), 3).unwrap()[0];
        let t1 = c.modalities[0].data();
        let nonzero = t1.iter().filter(|&&v| v != 0.0).count();
        assert!(nonzero > 0 && nonzero < t1.len());
        for m in &c.modalities {
            for (a, b) in m.data().iter().zip(t1) {
                assert_eq!(*a == 0.0, *b == 0.0);
            }
        }
        // tumor lives inside the brain
        for (l, v) in c.label.as_ref().unwrap().data().iter().zip(t1) {
            if *l != 0 {
                assert!(*v != 0.0);
            }
        }
    }

    #[test]
    fn prefix_property() {
        let cfg = SynthConfig::cube(16);
        let a = synth_cohort(2, &cfg, 11).unwrap();
        let b = synth_cohort(3, &cfg, 11).unwrap();
        assert_eq!(a[..], b[..2]);
    }

    #[test]
    fn et_free_fraction_extremes() {
        let mut cfg = SynthConfig::cube(16);
        cfg.et_free_fraction = 1.0;
        for c in synth_cohort(3, &cfg, 1).unwrap() {
            assert_eq!(c.label.unwrap().count(4), 0);
        }
        cfg.et_free_fraction = 0.0;
        for c in synth_cohort(3, &cfg, 1).unwrap() {
            assert!(c.label.unwrap().count(4) > 0);
        }
    }
}
