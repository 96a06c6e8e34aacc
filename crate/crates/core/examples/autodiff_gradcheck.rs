//! Build a small graph by hand, differentiate it and compare the gradient with
//! central finite differences.
//!
//! cargo run --example autodiff_gradcheck

use voxseg::tensor::Conv3dSpec;
use voxseg::{Graph, Result, Tensor, Var};

/// mean(leaky_relu(conv3d(x, w)))²
fn build(g: &mut Graph<f64>, x: Var, w: Var) -> Result<Var> {
    let y = g.conv3d(x, w, None, Conv3dSpec::same(3))?;
    let y = g.leaky_relu(y, 1e-2);
    let m = g.mean(y, &[0, 1, 2, 3, 4])?;
    g.mul(m, m)
}

fn value(x: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let out = build(&mut g, xv, wv).unwrap();
    g.value(out).item().unwrap()
}

fn main() -> Result<()> {
    // irrational-looking values keep conv outputs off the leaky-ReLU kink
    let x = Tensor::from_fn(&[1, 2, 4, 4, 4], |i| (i as f64 * 1.7).sin());
    let w = Tensor::from_fn(&[2, 2, 3, 3, 3], |i| (i as f64 * 0.61 + 0.3).cos() / 4.0);

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.param(w.clone());
    let out = build(&mut g, xv, wv)?;
    g.backward(out)?;
    let analytic = g.grad(wv).expect("parameter gradient").to_vec();

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let (mut plus, mut minus) = (w.clone(), w.clone());
        plus.data_mut()[i] += h;
        minus.data_mut()[i] -= h;
        let numeric = (value(&x, &plus) - value(&x, &minus)) / (2.0 * h);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    println!("loss {:.6}", g.value(out).item()?);
    println!("{} weight gradients, worst relative error vs finite differences {worst:.2e}", w.numel());
    Ok(())
}
