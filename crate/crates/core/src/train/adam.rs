use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment buffers plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Real>(params: &[Param<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update with `weight_decay * param` added to each gradient.
///
/// Moments are kept in f64. A non-finite gradient aborts before any
/// parameter is touched and names the offending parameter.
pub fn adam_step<T: Real>(
    params: &mut [Param<T>],
    grads: &[Vec<T>],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.len() != p.value.numel() {
            return Err(Error::Shape(format!(
                "gradient of `{}` has {} values, parameter has {}",
                p.name,
                g.len(),
                p.value.numel()
            )));
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of `{}` is {:?} at element {i}",
                p.name, g[i]
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            let wf = w.as_f64();
            let gi = g[i].as_f64() + weight_decay * wf;
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *w = T::of(wf - lr * mhat / (vhat.sqrt() + EPSILON));
        }
    }
    Ok(())
}
