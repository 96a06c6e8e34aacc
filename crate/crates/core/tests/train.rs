//! Optimizer, schedule, training loop, cotraining routing and checkpoints.

mod common;

use common::{rng, synth_normalized, uniform};
use voxseg::data::{AugmentConfig, Case};
use voxseg::nn::{ModelConfig, Param, UNet};
use voxseg::train::{
    adam_step, cotrain, minibatch_loss, train, AdamState, Checkpoint, Schedule, ScheduleConfig, TrainConfig,
};
use voxseg::{Graph, Tensor};

#[test]
fn adam_descends_a_quadratic_bowl() {
    let mut p = vec![Param {
        name: "w".into(),
        value: Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 3.0]).unwrap(),
    }];
    let mut s = AdamState::new(&p);
    for _ in 0..200 {
        // f(w) = |w|² / 2, so the gradient is w itself
        let g = p[0].value.data().to_vec();
        adam_step(&mut p, &[g], &mut s, 0.1, 0.0).unwrap();
    }
    let norm = p[0].value.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1e-3, "|w| = {norm}");
}

fn default_schedule() -> Schedule {
    Schedule::new(TrainConfig::default().schedule())
}

#[test]
fn constant_loss_reduces_twice_then_stops() {
    let mut s = default_schedule();
    let mut events = Vec::new();
    for epoch in 1..=200 {
        let lr_before = s.lr();
        let o = s.update(0.7);
        if o.lr_reduced {
            events.push(epoch);
            assert!((s.lr() - lr_before / 5.0).abs() < 1e-12 * lr_before);
        }
        if o.stop {
            assert_eq!(epoch, 61);
            break;
        }
    }
    assert_eq!(events, [31, 61]);
    assert!((s.lr() - 1e-4 * 5f64.powi(-2)).abs() < 1e-18);
}

#[test]
fn strictly_decreasing_loss_never_reduces() {
    let mut s = default_schedule();
    for epoch in 1..=500 {
        let o = s.update(10.0 - epoch as f64 * 0.01);
        assert!(o.improved && !o.lr_reduced);
        assert_eq!(o.stop, epoch == 500);
    }
    assert_eq!(s.lr(), 1e-4);
}

#[test]
fn moving_average_step() {
    let mut s = default_schedule();
    s.update(1.0);
    s.update(0.0);
    assert!((s.ema.unwrap() - 0.95).abs() < 1e-15);
}

#[test]
fn plateau_counter_restarts_after_a_reduction() {
    let cfg = ScheduleConfig {
        lr_patience: 3,
        stop_patience: 100,
        ..TrainConfig::default().schedule()
    };
    let mut s = Schedule::new(cfg);
    let reduced: Vec<usize> = (1..=13).filter(|_| s.update(1.0).lr_reduced).collect();
    assert_eq!(reduced, [4, 7, 10, 13]);
}

fn desk_cfg() -> TrainConfig {
    TrainConfig {
        batches_per_epoch: 2,
        max_epochs: 1,
        batch_size: 1,
        patch_size: 16,
        lr_init: 5e-3,
        augment: AugmentConfig::disabled(),
        workers: 1,
        ..TrainConfig::default()
    }
}

fn cases() -> Vec<Case> {
    synth_normalized(2, 16, 11)
}

#[test]
fn one_epoch_of_two_batches_takes_two_steps() {
    let c = cases();
    let mut net = UNet::<f32>::new(ModelConfig::tiny()).unwrap();
    let out = train(&mut net, &c[..1], &c[1..], &desk_cfg()).unwrap();
    assert_eq!((out.steps, out.log.len()), (2, 1));
    assert_eq!(out.last.params, net.params());
}

#[test]
fn same_seed_gives_the_same_loss_curve() {
    let c = cases();
    let cfg = TrainConfig {
        max_epochs: 3,
        augment: AugmentConfig::default(),
        ..desk_cfg()
    };
    let run = |workers| {
        let mut net = UNet::<f32>::new(ModelConfig::tiny()).unwrap();
        let out = train(&mut net, &c[..1], &c[1..], &TrainConfig { workers, ..cfg.clone() }).unwrap();
        let curve: Vec<(f64, f64)> = out.log.iter().map(|r| (r.train_loss, r.val_loss)).collect();
        (curve, net.params().to_vec())
    };
    let a = run(1);
    assert_eq!(a, run(1));
    assert_eq!(a, run(0));
    let mut net = UNet::<f32>::new(ModelConfig::tiny()).unwrap();
    let other = train(&mut net, &c[..1], &c[1..], &TrainConfig { seed: 9, ..cfg }).unwrap();
    assert_ne!(a.1, net.params(), "{:?}", other.log);
}

fn two_head_net() -> UNet<f32> {
    UNet::new(ModelConfig {
        num_heads: 2,
        ..ModelConfig::tiny()
    })
    .unwrap()
}

#[test]
fn cotraining_routes_each_sample_to_its_head() {
    let c = cases();
    let net = two_head_net();
    let mut r = rng(3);
    let image = uniform(&mut r, &[2, 4, 8, 8, 8], -1.0, 1.0).cast::<f32>();
    let labels: Vec<_> = c.iter().map(|k| voxseg::data::crop(k, [0; 3], [8; 3]).unwrap().label.unwrap()).collect();

    let mut g = Graph::new();
    let p = net.bind(&mut g, true);
    let x = g.constant(image);
    let ml = minibatch_loss(&net, &mut g, &p, x, &labels, &[0, 1], &desk_cfg().loss).unwrap();
    assert_eq!(ml.heads, [0, 1]);
    let (t0, t1) = (g.value(ml.terms[0]).item().unwrap(), g.value(ml.terms[1]).item().unwrap());
    let total = g.value(ml.total).item().unwrap();
    assert!((total - (t0 + t1) / 2.0).abs() < 1e-6);

    g.backward(ml.terms[0]).unwrap();
    let grads = p.grads(&g);
    for i in net.head_param_indices(1).unwrap() {
        assert!(grads[i].iter().all(|&v| v == 0.0));
    }
    for i in net.head_param_indices(0).unwrap() {
        assert!(grads[i].iter().any(|&v| v != 0.0));
    }
}

#[test]
fn identical_datasets_with_copied_heads_stay_symmetric() {
    let c = cases();
    let mut net = two_head_net();
    net.copy_head(0, 1).unwrap();
    let label = voxseg::data::crop(&c[0], [0; 3], [8; 3]).unwrap().label.unwrap();
    let one = uniform(&mut rng(4), &[1, 4, 8, 8, 8], -1.0, 1.0).cast::<f32>();
    let both = Tensor::new(&[2, 4, 8, 8, 8], [one.data(), one.data()].concat()).unwrap();

    let mut g = Graph::new();
    let p = net.bind(&mut g, true);
    let x = g.constant(both);
    let ml = minibatch_loss(&net, &mut g, &p, x, &[label.clone(), label], &[0, 1], &desk_cfg().loss).unwrap();
    assert_eq!(g.value(ml.terms[0]).data(), g.value(ml.terms[1]).data());
    g.backward(ml.total).unwrap();
    let grads = p.grads(&g);
    let [h0, h1] = [0, 1].map(|h| net.head_param_indices(h).unwrap());
    for (a, b) in h0.into_iter().zip(h1) {
        assert_eq!(grads[a], grads[b]);
    }

    // a full cotraining epoch on the same data keeps the heads identical
    let cfg = desk_cfg();
    cotrain(&mut net, &c[..1], &c[..1], &c[1..], &c[1..], &cfg).unwrap();
    for (a, b) in h0.into_iter().zip(h1) {
        assert_eq!(net.params()[a].value, net.params()[b].value);
    }
}

#[test]
fn checkpoint_round_trip_keeps_the_forward_pass() {
    let c = cases();
    let mut net = UNet::<f32>::new(ModelConfig::tiny()).unwrap();
    let out = train(&mut net, &c[..1], &c[1..], &desk_cfg()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("last.ckpt");
    out.last.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.params, out.last.params);
    assert_eq!(back.config, out.last.config);
    let restored: UNet<f32> = back.to_model().unwrap();
    let x = uniform(&mut rng(5), &[1, 4, 16, 16, 16], -2.0, 2.0).cast::<f32>();
    let (a, b) = (net.predict(x.clone(), 0).unwrap(), restored.predict(x, 0).unwrap());
    assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
}

#[test]
fn default_hyperparameters_are_echoed() {
    let echo = TrainConfig::default().echo();
    let get = |k: &str| echo.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str()).unwrap();
    assert_eq!(get("lr_init"), "1e-4");
    assert_eq!(get("batches_per_epoch"), "250");
    assert_eq!(get("max_epochs"), "500");
    assert_eq!(get("lr_factor"), "5");
    assert_eq!(get("lr_patience_epochs"), "30");
    assert_eq!(get("stop_patience_epochs"), "60");
    assert_eq!(get("ema_alpha"), "0.95");
}
