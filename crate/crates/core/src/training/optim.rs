use crate::autodiff::{Grads, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

/// Adaptive-moment hyperparameters (decoupled weight decay).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip threshold.
    pub grad_clip: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.0, grad_clip: 1.0 }
    }
}

/// First/second moment accumulators plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }
}

/// One bias-corrected AdamW update at learning rate `lr`. Returns the
/// global gradient norm measured before clipping.
pub fn optimizer_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &Grads<T>,
    state: &mut OptimizerState<T>,
    hp: &AdamW,
    lr: f64,
) -> Result<f64> {
    if grads.tensors.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape("optimizer state does not match parameters"));
    }
    let norm = grads.global_norm().as_f64();
    if !norm.is_finite() {
        return Err(Error::NonFiniteGradient(state.step as usize + 1));
    }
    let clip = if norm > hp.grad_clip { hp.grad_clip / norm } else { 1.0 };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(hp.beta1), T::lit(hp.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - hp.beta1), T::lit(1.0 - hp.beta2));
    let corr1 = T::lit(1.0 - hp.beta1.powi(t));
    let corr2 = T::lit(1.0 - hp.beta2.powi(t));
    let (lr, eps, wd, clip) = (T::lit(lr), T::lit(hp.eps), T::lit(hp.weight_decay), T::lit(clip));

    for (((p, g), m), v) in
        params.tensors_mut().iter_mut().zip(&grads.tensors).zip(state.m.iter_mut()).zip(state.v.iter_mut())
    {
        for i in 0..p.data.len() {
            let gi = g.data[i] * clip;
            m.data[i] = b1 * m.data[i] + one_b1 * gi;
            v.data[i] = b2 * v.data[i] + one_b2 * gi * gi;
            let m_hat = m.data[i] / corr1;
            let v_hat = v.data[i] / corr2;
            p.data[i] = p.data[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * p.data[i]);
        }
    }
    Ok(norm)
}
