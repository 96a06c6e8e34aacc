//! Registry of finite-difference checks, one entry per differentiable op.
//! Each entry maps an instance seed to the worst relative error seen.

use rand::Rng;
use voxseg::loss::{segmentation_loss, ClassSet, LossConfig, LossKind, Target};
use voxseg::nn::{HeadKind, ModelConfig, UNet};
use voxseg::tensor::{BinaryOp, Conv3dSpec};
use voxseg::{Graph, Result, Tensor, Var};

use super::{grad_check, rng, uniform};

pub const INSTANCES: u64 = 20;
pub const TOL: f64 = 1e-4;
pub const UNET_TOL: f64 = 1e-3;

pub struct Check {
    pub name: String,
    pub run: Box<dyn Fn(u64) -> f64 + Send + Sync>,
}

fn check(name: impl Into<String>, run: impl Fn(u64) -> f64 + Send + Sync + 'static) -> Check {
    Check {
        name: name.into(),
        run: Box::new(run),
    }
}

/// Contracts an arbitrary-shaped output with a fixed random tensor so every
/// output element contributes to the scalar being differentiated.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let mut r = rng(seed ^ 0x5eed);
    let w = g.constant(uniform(&mut r, &shape, -1.0, 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

/// Values at least 0.05 from zero with random sign, for ops with a kink there.
fn away_from_zero(r: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = r.random_range(0.05..2.0);
        if r.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn loss_cfg(kind: LossKind, class_set: ClassSet) -> LossConfig {
    LossConfig {
        kind,
        class_set,
        smooth_eps: 1e-5,
    }
}

/// Every op check, in a stable order.
pub fn op_checks() -> Vec<Check> {
    let mut out = Vec::new();
    for (name, op) in [
        ("add", BinaryOp::Add),
        ("sub", BinaryOp::Sub),
        ("mul", BinaryOp::Mul),
        ("div", BinaryOp::Div),
    ] {
        out.push(check(name, move |seed| {
            let mut r = rng(seed);
            let a = uniform(&mut r, &[2, 3, 4], -2.0, 2.0);
            let b = uniform(&mut r, &[2, 3, 4], 0.5, 2.0);
            grad_check(
                |g, v| {
                    let y = g.binary(op, v[0], v[1])?;
                    weighted_sum(g, y, seed)
                },
                &[a, b],
            )
        }));
    }
    out.push(check("scalar", |seed| {
        let mut r = rng(seed);
        let a = uniform(&mut r, &[3, 4], -2.0, 2.0);
        let s: f64 = r.random_range(0.5..2.0);
        grad_check(
            |g, v| {
                let y = g.mul_scalar(v[0], s);
                let y = g.add_scalar(y, s);
                let y = g.binary_scalar(BinaryOp::Div, y, s);
                let y = g.binary_scalar(BinaryOp::Sub, y, 1.0);
                weighted_sum(g, y, seed)
            },
            &[a],
        )
    }));
    out.push(check("exp/log", |seed| {
        let mut r = rng(seed);
        let a = uniform(&mut r, &[2, 5], 0.2, 3.0);
        grad_check(
            |g, v| {
                let e = g.exp(v[0]);
                let l = g.log(v[0]);
                let y = g.add(e, l)?;
                weighted_sum(g, y, seed)
            },
            &[a],
        )
    }));
    out.push(check("clamp_min", |seed| {
        let a = away_from_zero(&mut rng(seed), &[12]);
        grad_check(
            |g, v| {
                let y = g.clamp_min(v[0], 0.0);
                weighted_sum(g, y, seed)
            },
            &[a],
        )
    }));
    out.push(check("sum/mean", |seed| {
        let mut r = rng(seed);
        let a = uniform(&mut r, &[2, 3, 4, 2], -1.0, 1.0);
        grad_check(
            |g, v| {
                let s = g.sum(v[0], &[1, 3])?;
                let m = g.mean(v[0], &[0, 2])?;
                let ls = weighted_sum(g, s, seed)?;
                let lm = weighted_sum(g, m, seed + 1)?;
                g.add(ls, lm)
            },
            &[a],
        )
    }));
    out.push(check("conv3d", |seed| {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[1, 2, 5, 5, 5], -1.0, 1.0);
        let w = uniform(&mut r, &[3, 2, 3, 3, 3], -1.0, 1.0);
        let b = uniform(&mut r, &[3], -1.0, 1.0);
        grad_check(
            |g, v| {
                let y = g.conv3d(v[0], v[1], Some(v[2]), Conv3dSpec::same(3))?;
                weighted_sum(g, y, seed)
            },
            &[x, w, b],
        )
    }));
    out.push(check("conv3d stride 2", |seed| {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[2, 2, 5, 4, 6], -1.0, 1.0);
        let w = uniform(&mut r, &[2, 2, 3, 1, 3], -1.0, 1.0);
        grad_check(
            |g, v| {
                let spec = Conv3dSpec { stride: 2, padding: 1 };
                let y = g.conv3d(v[0], v[1], None, spec)?;
                weighted_sum(g, y, seed)
            },
            &[x, w],
        )
    }));
    out.push(check("maxpool3d", |seed| {
        let mut r = rng(seed);
        // distinct values spaced far beyond the finite-difference step
        let mut vals: Vec<f64> = (0..64).map(|i| i as f64 * 0.01).collect();
        for i in (1..vals.len()).rev() {
            let j = r.random_range(0..=i);
            vals.swap(i, j);
        }
        let x = Tensor::new(&[1, 1, 4, 4, 4], vals).unwrap();
        grad_check(
            |g, v| {
                let y = g.maxpool3d(v[0], 2, 2)?;
                weighted_sum(g, y, seed)
            },
            &[x],
        )
    }));
    out.push(check("upsample", |seed| {
        let x = uniform(&mut rng(seed), &[1, 2, 2, 3, 2], -1.0, 1.0);
        grad_check(
            |g, v| {
                let y = g.upsample_trilinear(v[0], 2)?;
                weighted_sum(g, y, seed)
            },
            &[x],
        )
    }));
    out.push(check("leaky_relu", |seed| {
        let a = away_from_zero(&mut rng(seed), &[3, 4]);
        grad_check(
            |g, v| {
                let y = g.leaky_relu(v[0], 1e-2);
                weighted_sum(g, y, seed)
            },
            &[a],
        )
    }));
    out.push(check("sigmoid", |seed| {
        let a = uniform(&mut rng(seed), &[3, 4], -3.0, 3.0);
        grad_check(
            |g, v| {
                let y = g.sigmoid(v[0]);
                weighted_sum(g, y, seed)
            },
            &[a],
        )
    }));
    out.push(check("softmax", |seed| {
        let a = uniform(&mut rng(seed), &[2, 4, 3], -3.0, 3.0);
        grad_check(
            |g, v| {
                let y = g.softmax(v[0], 1)?;
                weighted_sum(g, y, seed)
            },
            &[a],
        )
    }));
    out.push(check("concat/narrow", |seed| {
        let mut r = rng(seed);
        let a = uniform(&mut r, &[2, 2, 3], -1.0, 1.0);
        let b = uniform(&mut r, &[2, 3, 3], -1.0, 1.0);
        grad_check(
            |g, v| {
                let c = g.concat(&[v[0], v[1]], 1)?;
                let n = g.narrow(c, 1, 1, 3)?;
                weighted_sum(g, n, seed)
            },
            &[a, b],
        )
    }));
    out.push(check("fan-out", |seed| {
        let x = uniform(&mut rng(seed), &[6], 0.2, 2.0);
        grad_check(
            |g, v| {
                let a = g.exp(v[0]);
                let b = g.mul(v[0], v[0])?;
                let c = g.mul(a, b)?;
                let d = g.log(v[0]);
                let y = g.add(c, d)?;
                weighted_sum(g, y, seed)
            },
            &[x],
        )
    }));
    out.push(check("instance_norm", |seed| {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[2, 3, 2, 3, 2], -2.0, 2.0);
        let gamma = uniform(&mut r, &[3], 0.5, 1.5);
        let beta = uniform(&mut r, &[3], -0.5, 0.5);
        grad_check(
            |g, v| {
                let y = g.instance_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(g, y, seed)
            },
            &[x, gamma, beta],
        )
    }));
    out.push(check("cross_entropy", |seed| {
        let mut r = rng(seed);
        let z = uniform(&mut r, &[2, 3, 2, 2], -2.0, 2.0);
        let labels: Vec<usize> = (0..8).map(|_| r.random_range(0..3)).collect();
        grad_check(|g, v| g.cross_entropy(v[0], &labels), &[z])
    }));
    out.push(check("bce_with_logits", |seed| {
        let mut r = rng(seed);
        let z = uniform(&mut r, &[2, 3, 4], -3.0, 3.0);
        let t: Vec<f64> = (0..24).map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
        grad_check(|g, v| g.bce_with_logits(v[0], &t), &[z])
    }));
    for kind in [LossKind::Dice, LossKind::CrossEntropy, LossKind::DicePlusCe] {
        for class_set in [ClassSet::ForegroundOnly, ClassSet::AllClasses] {
            let cfg = loss_cfg(kind, class_set);
            let head = HeadKind::Softmax { num_classes: 4 };
            out.push(check(format!("softmax {} {}", kind.name(), class_set.name()), move |seed| {
                let mut r = rng(seed);
                let z = uniform(&mut r, &[2, 4, 2, 2, 2], -2.0, 2.0);
                let labels: Vec<usize> = (0..16).map(|_| r.random_range(0..4)).collect();
                grad_check(|g, v| segmentation_loss(g, v[0], Target::Labels(&labels), head, &cfg), &[z])
            }));
        }
        let cfg = loss_cfg(kind, ClassSet::AllClasses);
        let head = HeadKind::Sigmoid { num_regions: 3 };
        out.push(check(format!("sigmoid {}", kind.name()), move |seed| {
            let mut r = rng(seed);
            let z = uniform(&mut r, &[2, 3, 2, 2, 2], -2.0, 2.0);
            let masks: Vec<f64> = (0..48).map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
            grad_check(|g, v| segmentation_loss(g, v[0], Target::Regions(&masks), head, &cfg), &[z])
        }));
    }
    out
}

/// Runs every instance of a check; returns the worst error and its seed.
pub fn worst(c: &Check) -> (f64, u64) {
    (0..INSTANCES)
        .map(|s| ((c.run)(s), s))
        .fold((0.0, 0), |a, b| if b.0 > a.0 { b } else { a })
}

/// Smaller than the shared step: with thousands of leaky-ReLU and max-pool
/// decisions in the trunk, a ±1e-5 nudge occasionally crosses a kink.
pub const UNET_FD_STEP: f64 = 1e-6;

/// Loss of a frozen copy of `net` on a fixed input and label map.
fn unet_loss(net: &UNet<f64>, x: &Tensor<f64>, labels: &[usize], cfg: &LossConfig) -> f64 {
    let mut g = Graph::new();
    let p = net.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let z = net.forward(&mut g, &p, xv, 0).unwrap();
    let l = segmentation_loss(&mut g, z, Target::Labels(labels), net.config().head, cfg).unwrap();
    g.value(l).item().unwrap()
}

/// End-to-end check through a 2-level U-Net with Dice+CE; probes a random
/// subset of entries per parameter tensor to keep the numeric side cheap.
pub fn tiny_unet(seed: u64) -> f64 {
    let cfg = loss_cfg(LossKind::DicePlusCe, ClassSet::ForegroundOnly);
    let mut net = UNet::<f64>::new(ModelConfig {
        base_features: 2,
        depth: 2,
        seed,
        ..ModelConfig::tiny()
    })
    .unwrap();
    let mut r = rng(seed + 100);
    let x = uniform(&mut r, &[1, 4, 8, 8, 8], -1.0, 1.0);
    let labels: Vec<usize> = (0..512).map(|_| r.random_range(0..4)).collect();

    let mut g = Graph::new();
    let p = net.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let z = net.forward(&mut g, &p, xv, 0).unwrap();
    let l = segmentation_loss(&mut g, z, Target::Labels(&labels), net.config().head, &cfg).unwrap();
    g.backward(l).unwrap();
    let analytic = p.grads(&g);

    let mut worst = 0.0f64;
    for (k, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        for _ in 0..n.min(6) {
            let i = r.random_range(0..n);
            let orig = net.params()[k].value.data()[i];
            net.params_mut()[k].value.data_mut()[i] = orig + UNET_FD_STEP;
            let plus = unet_loss(&net, &x, &labels, &cfg);
            net.params_mut()[k].value.data_mut()[i] = orig - UNET_FD_STEP;
            let minus = unet_loss(&net, &x, &labels, &cfg);
            net.params_mut()[k].value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * UNET_FD_STEP);
            let err = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}
