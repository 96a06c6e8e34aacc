//! Forward-value properties of the tensor ops.

mod common;

use common::{rng, uniform};
use proptest::prelude::*;
use voxseg::tensor::Conv3dSpec;
use voxseg::{Graph, Tensor};

#[test]
fn identity_kernel_reproduces_input() {
    let mut r = rng(1);
    let x = uniform(&mut r, &[1, 1, 4, 5, 3], -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.constant(Tensor::full(&[1, 1, 1, 1, 1], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv3d(xv, w, Some(b), Conv3dSpec::valid()).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn ones_kernel_sums_neighbourhood() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 5, 5, 5], 1.0f64));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3, 3], 1.0));
    let y = g.conv3d(x, w, None, Conv3dSpec::same(3)).unwrap();
    let out = g.value(y);
    assert_eq!(out.get(&[0, 0, 2, 2, 2]), 27.0);
    // corner sees a 2x2x2 neighbourhood
    assert_eq!(out.get(&[0, 0, 0, 0, 0]), 8.0);
}

#[test]
fn conv_channel_mismatch_is_shape_error() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 3, 3, 3]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3, 3]));
    assert!(matches!(
        g.conv3d(x, w, None, Conv3dSpec::same(3)),
        Err(voxseg::Error::Shape(_))
    ));
}

#[test]
fn upsample_constant_and_shape() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 2, 2, 2], 3.5f64));
    let y = g.upsample_trilinear(x, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 4, 4, 4]);
    assert!(g.value(y).data().iter().all(|&v| (v - 3.5).abs() < 1e-12));
}

#[test]
fn maxpool_picks_max_and_first_on_ties() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_fn(&[1, 1, 2, 2, 2], |i| i as f64));
    let y = g.maxpool3d(x, 2, 2).unwrap();
    assert_eq!(g.value(y).data(), &[7.0]);

    let c = g.param(Tensor::full(&[1, 1, 4, 4, 4], 2.0f64));
    let p = g.maxpool3d(c, 2, 2).unwrap();
    assert!(g.value(p).data().iter().all(|&v| v == 2.0));
    let l = g.sum_all(p);
    g.backward(l).unwrap();
    let grad = g.grad(c).unwrap();
    let t = Tensor::new(&[1, 1, 4, 4, 4], grad.to_vec()).unwrap();
    for z in 0..4 {
        for y in 0..4 {
            for x in 0..4 {
                let first = z % 2 == 0 && y % 2 == 0 && x % 2 == 0;
                assert_eq!(t.get(&[0, 0, z, y, x]), if first { 1.0 } else { 0.0 });
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_normalized_and_shift_invariant(
        logits in proptest::collection::vec(-30.0f64..30.0, 12),
        shift in -50.0f64..50.0,
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 4], logits.clone()).unwrap());
        let p = g.softmax(x, 1).unwrap();
        let shifted = g.add_scalar(x, shift);
        let q = g.softmax(shifted, 1).unwrap();
        let (pv, qv) = (g.value(p).data(), g.value(q).data());
        for row in 0..3 {
            let s: f64 = pv[row * 4..row * 4 + 4].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
        for (a, b) in pv.iter().zip(qv) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn same_padding_preserves_spatial_shape(
        k in prop::sample::select(vec![1usize, 3, 5]),
        d in 1usize..7, h in 1usize..7, w in 1usize..7,
    ) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, d, h, w]));
        let wt = g.constant(Tensor::zeros(&[3, 2, k, k, k]));
        let y = g.conv3d(x, wt, None, Conv3dSpec::same(k)).unwrap();
        prop_assert_eq!(g.shape(y), &[1, 3, d, h, w]);
    }
}
