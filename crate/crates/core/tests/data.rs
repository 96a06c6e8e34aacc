//! Volume IO, normalization, patch sampling, augmentation and synthetic cohorts.

mod common;

use common::rng;
use proptest::prelude::*;
use rand::Rng;
use voxseg::data::io::{decode, encode, Payload, RawVolume};
use voxseg::data::{
    augment, flip_patch, load_manifest, normalize_case, normalize_volume, read_labels, read_volume, sample_patch,
    save_case, synth_cohort, write_labels, write_manifest, write_volume, AugmentConfig, Axis, Case,
    Patch, SynthConfig, Volume,
};
use voxseg::Error;

fn volume_from(shape: [usize; 3], data: Vec<f32>) -> Volume {
    Volume::new(shape, [1.0; 3], data).unwrap()
}

#[test]
fn normalization_of_three_brain_voxels() {
    let mut data = vec![0f32; 8];
    data[1] = 2.0;
    data[4] = 4.0;
    data[6] = 6.0;
    let v = normalize_volume(&volume_from([2, 2, 2], data), "t1").unwrap();
    let expect = [(1, -1.2247), (4, 0.0), (6, 1.2247)];
    for (i, e) in expect {
        assert!((v.data()[i] as f64 - e).abs() < 1e-4, "voxel {i}: {}", v.data()[i]);
    }
    for i in [0, 2, 3, 5, 7] {
        assert_eq!(v.data()[i], 0.0);
    }
}

#[test]
fn normalization_statistics_and_idempotence() {
    let cases = synth_cohort(3, &SynthConfig::cube(16), 7).unwrap();
    for c in &cases {
        let once = normalize_case(c).unwrap();
        for (raw, m) in c.modalities.iter().zip(&once.modalities) {
            let brain: Vec<f64> = raw
                .data()
                .iter()
                .zip(m.data())
                .filter(|(r, _)| **r != 0.0)
                .map(|(_, &v)| v as f64)
                .collect();
            let mean = brain.iter().sum::<f64>() / brain.len() as f64;
            let std = (brain.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / brain.len() as f64).sqrt();
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((std - 1.0).abs() < 1e-4, "std {std}");
            for (r, v) in raw.data().iter().zip(m.data()) {
                if *r == 0.0 {
                    assert_eq!(*v, 0.0);
                }
            }
        }
        let twice = normalize_case(&once).unwrap();
        for (a, b) in once.modalities.iter().zip(&twice.modalities) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn all_background_modality_is_degenerate() {
    let e = normalize_volume(&volume_from([2, 2, 2], vec![0.0; 8]), "flair").unwrap_err();
    assert!(matches!(e, Error::Degenerate(ref m) if m.contains("flair")), "{e}");
}

fn labelled_case(shape: [usize; 3], seed: u64) -> Case {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let vols = [0; 4].map(|_| volume_from(shape, (0..n).map(|_| r.random_range(0.1f32..1.0)).collect()));
    let label = common::random_labels(&mut r, shape);
    Case::new("c", vols, Some(label), 0).unwrap()
}

#[test]
fn full_size_patch_is_the_whole_volume() {
    let case = labelled_case([4, 5, 6], 1);
    let p = sample_patch(&case, [4, 5, 6], &mut rng(9)).unwrap();
    for (c, m) in case.modalities.iter().enumerate() {
        assert_eq!(&p.image.data()[c * 120..(c + 1) * 120], m.data());
    }
    assert_eq!(p.label.as_ref(), case.label.as_ref());
}

#[test]
fn patch_sequence_is_reproducible() {
    let case = labelled_case([8, 8, 8], 2);
    let draw = |seed| {
        let mut r = rng(seed);
        (0..5).map(|_| sample_patch(&case, [3, 3, 3], &mut r).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(draw(4), draw(4));
}

#[test]
fn patch_corners_are_uniform() {
    // Encode each voxel's own coordinates so a patch reveals its corner.
    let shape = [4, 4, 4];
    let coord = volume_from(shape, (0..64).map(|i| i as f32 + 1.0).collect());
    let case = Case::new("u", [coord.clone(), coord.clone(), coord.clone(), coord], None, 0).unwrap();
    let mut counts = [0usize; 27];
    let mut r = rng(11);
    let samples = 10_000;
    for _ in 0..samples {
        let p = sample_patch(&case, [2, 2, 2], &mut r).unwrap();
        let first = p.image.data()[0] as usize - 1;
        let (z, y, x) = (first / 16, first / 4 % 4, first % 4);
        assert!(z <= 2 && y <= 2 && x <= 2, "corner outside the feasible range");
        counts[(z * 3 + y) * 3 + x] += 1;
    }
    let p = 1.0 / 27.0;
    let mean = samples as f64 * p;
    let sigma = (samples as f64 * p * (1.0 - p)).sqrt();
    for (k, &c) in counts.iter().enumerate() {
        assert!((c as f64 - mean).abs() < 3.0 * sigma, "corner {k}: {c} hits, expected {mean:.0}");
    }
}

#[test]
fn patches_larger_than_the_volume_are_padded() {
    let case = labelled_case([3, 3, 3], 3);
    let mut r = rng(5);
    for _ in 0..50 {
        let p = sample_patch(&case, [5, 5, 5], &mut r).unwrap();
        let nonzero = p.image.data()[..125].iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, 27, "every source voxel appears once and only once");
    }
}

fn random_patch(seed: u64, size: usize) -> Patch {
    let mut r = rng(seed);
    let image = voxseg::Tensor::from_fn(&[4, size, size, size], |_| r.random_range(-2.0f32..2.0));
    let label = common::random_labels(&mut r, [size; 3]);
    Patch {
        image,
        label: Some(label),
    }
}

#[test]
fn disabled_augmentation_is_identity() {
    let p = random_patch(1, 6);
    let out = augment(&p, &AugmentConfig::disabled(), &mut rng(2)).unwrap();
    assert_eq!(out, p);
}

#[test]
fn mirroring_twice_is_identity() {
    let p = random_patch(2, 5);
    for axis in Axis::ALL {
        let twice = flip_patch(&flip_patch(&p, axis).unwrap(), axis).unwrap();
        assert_eq!(twice, p);
    }
}

#[test]
fn unit_gamma_leaves_intensities_unchanged() {
    let p = random_patch(3, 5);
    let cfg = AugmentConfig {
        p_gamma: 1.0,
        gamma_range: (1.0, 1.0),
        ..AugmentConfig::disabled()
    };
    let out = augment(&p, &cfg, &mut rng(4)).unwrap();
    for (a, b) in out.image.data().iter().zip(p.image.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn augmentation_is_deterministic_and_never_invents_labels() {
    let always = AugmentConfig {
        p_rotation: 1.0,
        p_scale: 1.0,
        p_elastic: 1.0,
        p_gamma: 1.0,
        p_mirror: 1.0,
        ..AugmentConfig::default()
    };
    for seed in 0..10 {
        let mut p = random_patch(seed, 8);
        // restrict the input to labels {0, 2} so invented values are visible
        let l = p.label.take().unwrap().map(|v| if v == 4 || v == 1 { 2 } else { v }).unwrap();
        p.label = Some(l);
        let a = augment(&p, &always, &mut rng(seed + 50)).unwrap();
        let b = augment(&p, &always, &mut rng(seed + 50)).unwrap();
        assert_eq!(a, b);
        assert!(a.label.unwrap().data().iter().all(|&v| v == 0 || v == 2));
        assert!(a.image.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn synthetic_tumours_are_nested() {
    let cases = synth_cohort(30, &SynthConfig::cube(16), 3).unwrap();
    for c in &cases {
        let l = c.label.as_ref().unwrap();
        let [d, h, w] = l.shape();
        let at = |z: usize, y: usize, x: usize| l.data()[(z * h + y) * w + x];
        for z in 1..d - 1 {
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    if matches!(at(z, y, x), 1 | 4) {
                        let nb = [at(z - 1, y, x), at(z + 1, y, x), at(z, y - 1, x), at(z, y + 1, x), at(z, y, x - 1), at(z, y, x + 1)];
                        assert!(nb.iter().all(|&v| v != 0), "{}: core touches background", c.id);
                    }
                }
            }
        }
        assert!(l.count(2) > 0, "{}: no edema", c.id);
    }
}

#[test]
fn synthetic_cohort_is_deterministic() {
    let cfg = SynthConfig::cube(16);
    assert_eq!(synth_cohort(3, &cfg, 42).unwrap(), synth_cohort(3, &cfg, 42).unwrap());
    assert_ne!(synth_cohort(1, &cfg, 42).unwrap(), synth_cohort(1, &cfg, 43).unwrap());
}

#[test]
fn enhancing_free_fraction_matches_the_configured_rate() {
    let cfg = SynthConfig::cube(16);
    let n = 200;
    let free = synth_cohort(n, &cfg, 8)
        .unwrap()
        .iter()
        .filter(|c| c.label.as_ref().unwrap().count(4) == 0)
        .count();
    let p = cfg.et_free_fraction;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    assert!((free as f64 - n as f64 * p).abs() < 3.0 * sigma, "{free} of {n} cases without ET");
}

#[test]
fn undersized_synthetic_volume_is_rejected() {
    assert!(synth_cohort(1, &SynthConfig::cube(8), 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn volume_round_trip_is_bit_exact(
        d in 1usize..5, h in 1usize..5, w in 1usize..5,
        sx in 0.1f64..3.0, sy in 0.1f64..3.0, sz in 0.1f64..3.0,
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let n = d * h * w;
        let data: Vec<f32> = (0..n).map(|_| f32::from_bits(r.random::<u32>() & 0x7f7f_ffff)).collect();
        let v = Volume::new([d, h, w], [sx, sy, sz], data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vseg");
        write_volume(&v, &path).unwrap();
        let back = read_volume(&path).unwrap();
        prop_assert_eq!(back.shape(), v.shape());
        prop_assert_eq!(back.spacing(), v.spacing());
        let bits = |v: &Volume| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&v));

        let labels = common::random_labels(&mut r, [d, h, w]);
        write_labels(&labels, dir.path().join("l.vseg")).unwrap();
        let back_labels = read_labels(dir.path().join("l.vseg")).unwrap();
        prop_assert_eq!(back_labels.data(), labels.data());
    }
}

#[test]
fn truncated_payload_is_reported() {
    let raw = RawVolume {
        shape: [10, 10, 10],
        spacing: [1.0; 3],
        payload: Payload::F32(vec![0.5; 1000]),
    };
    let bytes = encode(&raw);
    let e = decode(&bytes[..bytes.len() - 4], "short.vseg").unwrap_err();
    assert!(matches!(e, Error::Parse { ref file, .. } if file == "short.vseg"), "{e}");
}

#[test]
fn manifest_with_mismatched_modality_names_the_case() {
    let dir = tempfile::tempdir().unwrap();
    let case = labelled_case([3, 3, 3], 4);
    let mut row = save_case(&Case { id: "patient7".into(), ..case }, dir.path()).unwrap();
    write_volume(&volume_from([3, 3, 2], vec![1.0; 18]), dir.path().join("odd_t2.vseg")).unwrap();
    row.modalities[2] = "odd_t2.vseg".into();
    let manifest = dir.path().join("m.tsv");
    write_manifest(&manifest, &[row]).unwrap();
    let e = load_manifest(&manifest).unwrap_err();
    assert!(matches!(e, Error::Consistency { ref case, .. } if case == "patient7"), "{e}");
}

#[test]
fn manifest_round_trip_loads_identical_cases() {
    let dir = tempfile::tempdir().unwrap();
    let cases = synth_cohort(2, &SynthConfig::cube(16), 1).unwrap();
    let rows: Vec<_> = cases.iter().map(|c| save_case(c, dir.path()).unwrap()).collect();
    write_manifest(dir.path().join("manifest.tsv"), &rows).unwrap();
    assert_eq!(load_manifest(dir.path().join("manifest.tsv")).unwrap(), cases);
}
