//! Shared test oracles. Numeric gradients come only from forward
//! evaluations; brute-force metrics never touch the library's EDT.
#![allow(dead_code)]

pub mod gradient_suite;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxseg::{Graph, Result, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Forward-only evaluation of `build` on constant inputs.
pub fn eval<F>(build: &F, inputs: &[Tensor<f64>]) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    g.value(out).item().expect("scalar output")
}

/// Central finite differences of `build` with respect to every input.
pub fn numeric_grads<F>(build: &F, inputs: &[Tensor<f64>], h: f64) -> Vec<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut out = Vec::new();
    for k in 0..inputs.len() {
        let mut grad = Vec::with_capacity(inputs[k].numel());
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            grad.push((eval(build, &plus) - eval(build, &minus)) / (2.0 * h));
        }
        out.push(grad);
    }
    out
}

pub fn analytic_grads<F>(build: &F, inputs: &[Tensor<f64>]) -> Vec<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    g.backward(out).expect("backward");
    vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect()
}

/// Elementwise relative error `|a - n| / max(|a|, |n|, floor)`, maximized.
pub fn max_rel_err(analytic: &[Vec<f64>], numeric: &[Vec<f64>], floor: f64) -> f64 {
    analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Largest relative error between autodiff and finite differences.
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>]) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let a = analytic_grads(&build, inputs);
    let n = numeric_grads(&build, inputs, FD_STEP);
    max_rel_err(&a, &n, 1e-6)
}

// ---- segmentation oracles ----

use voxseg::data::{normalize_case, synth_cohort, Case, LabelVolume, SynthConfig, LABEL_SET};
use voxseg::infer::predict_volume;
use voxseg::nn::UNet;

pub fn random_labels(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> LabelVolume {
    let n = shape.iter().product();
    let data = (0..n).map(|_| LABEL_SET[rng.random_range(0..4)]).collect();
    LabelVolume::new(shape, [1.0; 3], data).unwrap()
}

/// Random binary mask with density `p`.
pub fn random_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(p)).collect()
}

/// Normalized synthetic cases of edge `size`.
pub fn synth_normalized(n: usize, size: usize, seed: u64) -> Vec<Case> {
    synth_cohort(n, &SynthConfig::cube(size), seed)
        .unwrap()
        .iter()
        .map(|c| normalize_case(c).unwrap())
        .collect()
}

/// Dice of `label > 0` between the network's prediction and the reference.
pub fn foreground_dice(net: &UNet<f32>, case: &Case) -> f64 {
    let pred = predict_volume(net, case, 0, "probe", None)
        .unwrap()
        .to_labels(0.5)
        .unwrap();
    let reference = case.label.as_ref().unwrap();
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &r) in pred.data().iter().zip(reference.data()) {
        inter += (p > 0 && r > 0) as usize;
        total += (p > 0) as usize + (r > 0) as usize;
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Surface voxels by explicit neighbour inspection (outside the grid counts
/// as outside the mask).
pub fn brute_surface(mask: &[bool], shape: [usize; 3]) -> Vec<[usize; 3]> {
    let [d, h, w] = shape;
    let at = |z: isize, y: isize, x: isize| -> bool {
        if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= h as isize || x >= w as isize {
            return false;
        }
        mask[(z as usize * h + y as usize) * w + x as usize]
    };
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                if !at(zi, yi, xi) {
                    continue;
                }
                let steps = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if steps.iter().any(|&(a, b, c)| !at(zi + a, yi + b, xi + c)) {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

fn dist(a: [usize; 3], b: [usize; 3], spacing: [f64; 3]) -> f64 {
    // spacing is (x, y, z); points are (z, y, x)
    let dz = (a[0] as f64 - b[0] as f64) * spacing[2];
    let dy = (a[1] as f64 - b[1] as f64) * spacing[1];
    let dx = (a[2] as f64 - b[2] as f64) * spacing[0];
    (dz * dz + dy * dy + dx * dx).sqrt()
}

/// Linear-interpolation percentile, rank q·(n−1).
pub fn brute_percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let rank = q * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (rank - lo as f64) * (v[hi] - v[lo])
}

fn directed(a: &[[usize; 3]], b: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    a.iter()
        .map(|&p| b.iter().map(|&q| dist(p, q, spacing)).fold(f64::INFINITY, f64::min))
        .collect()
}

/// All-pairs hd95 for two nonempty masks.
pub fn brute_hd95(pred: &[bool], reference: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> f64 {
    let (sp, sr) = (brute_surface(pred, shape), brute_surface(reference, shape));
    let a = brute_percentile(directed(&sp, &sr, spacing), 0.95);
    let b = brute_percentile(directed(&sr, &sp, spacing), 0.95);
    a.max(b)
}

/// All-pairs Hausdorff distance between the surfaces.
pub fn brute_hausdorff(pred: &[bool], reference: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> f64 {
    let (sp, sr) = (brute_surface(pred, shape), brute_surface(reference, shape));
    let m = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
    m(directed(&sp, &sr, spacing)).max(m(directed(&sr, &sp, spacing)))
}

/// Mean ET Dice at `threshold`, computed without the library's rule code.
pub fn brute_mean_et_dice(preds: &[LabelVolume], refs: &[LabelVolume], threshold: usize) -> f64 {
    let mut sum = 0.0;
    for (p, r) in preds.iter().zip(refs) {
        let count = p.data().iter().filter(|&&v| v == 4).count();
        let keep = count >= threshold;
        let (mut inter, mut np, mut nr) = (0, 0, 0);
        for (&a, &b) in p.data().iter().zip(r.data()) {
            let pa = keep && a == 4;
            let rb = b == 4;
            inter += (pa && rb) as usize;
            np += pa as usize;
            nr += rb as usize;
        }
        sum += if np + nr == 0 { 1.0 } else { 2.0 * inter as f64 / (np + nr) as f64 };
    }
    sum / preds.len() as f64
}

/// A small cohort where some references lack ET and their predictions carry
/// a few false-positive ET voxels.
pub fn random_cohort(r: &mut ChaCha8Rng) -> (Vec<LabelVolume>, Vec<LabelVolume>) {
    let n = r.random_range(1..=5);
    let shape = [4, 4, 4];
    let (mut preds, mut refs) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let mut reference: Vec<u8> = (0..64).map(|_| [0, 1, 2][r.random_range(0..3)]).collect();
        let et_free = r.random_bool(0.4);
        if !et_free {
            for v in reference.iter_mut() {
                if r.random_bool(0.3) {
                    *v = 4;
                }
            }
        }
        let mut pred = reference.clone();
        for v in pred.iter_mut() {
            if r.random_bool(0.1) {
                *v = [0, 1, 2, 4][r.random_range(0..4)];
            }
        }
        refs.push(LabelVolume::new(shape, [1.0; 3], reference).unwrap());
        preds.push(LabelVolume::new(shape, [1.0; 3], pred).unwrap());
    }
    (preds, refs)
}

/// Desk-sized settings for running the binary end to end.
pub const TINY_CFG: &str = "model.base_features=4
model.depth=3
synth.size=16
patch_size=16
batches_per_epoch=4
max_epochs=2
lr_init=5e-3
batch_size=1
";

/// Runs the `voxseg` binary and returns (success, stdout, stderr).
pub fn voxseg(args: &[&str]) -> (bool, String, String) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_voxseg"))
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.success(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// Like [`voxseg`] but panics with stderr on failure; returns stdout.
pub fn voxseg_ok(args: &[&str]) -> String {
    let (ok, stdout, stderr) = voxseg(args);
    assert!(ok, "voxseg {args:?} failed:\n{stderr}");
    stdout
}

/// synth-data, preprocess, train, predict --tta and evaluate on five cases
/// under `root`; returns the printed report.
pub fn cli_pipeline(root: &std::path::Path) -> String {
    let p = |s: &str| root.join(s).display().to_string();
    std::fs::write(root.join("tiny.cfg"), TINY_CFG).unwrap();
    let cfg = p("tiny.cfg");
    voxseg_ok(&["--config", &cfg, "synth-data", "--out", &p("raw"), "--cases", "5"]);
    voxseg_ok(&["--config", &cfg, "preprocess", "--manifest", &p("raw/manifest.tsv"), "--out", &p("prep")]);
    voxseg_ok(&["--config", &cfg, "train", "--train", &p("prep/manifest.tsv"), "--out", &p("run")]);
    voxseg_ok(&[
        "--config", &cfg, "predict", "--manifest", &p("prep/manifest.tsv"),
        "--checkpoint", &p("run/best.ckpt"), "--tta", "--out", &p("pred"),
    ]);
    voxseg_ok(&[
        "--config", &cfg, "evaluate", "--predictions", &p("pred/predictions.tsv"),
        "--reference", &p("prep/manifest.tsv"), "--out", &p("eval/report.tsv"),
    ])
}
