use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Scalar> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One AdamW update. Any non-finite gradient aborts the step before a
    /// single parameter changes.
    pub fn step(&mut self, hp: &AdamW, lr: f64, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            let id = ParamId(i);
            if g.shape() != params.get(id).shape() {
                return Err(Error::shape("adamw", params.get(id).shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::Numerical {
                    layer: None,
                    message: format!("non-finite gradient for parameter {}", params.name(id)),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - hp.beta1.powi(t);
        let c2 = 1.0 - hp.beta2.powi(t);
        let decay = 1.0 - lr * hp.weight_decay;
        for (i, g) in grads.iter().enumerate() {
            let id = ParamId(i);
            let p = params.get(id);
            let mut m = self.m[i].to_vec();
            let mut v = self.v[i].to_vec();
            let mut out = p.to_vec();
            for k in 0..out.len() {
                let gk = g.data()[k].as_f64();
                let mk = hp.beta1 * m[k].as_f64() + (1.0 - hp.beta1) * gk;
                let vk = hp.beta2 * v[k].as_f64() + (1.0 - hp.beta2) * gk * gk;
                m[k] = T::lit(mk);
                v[k] = T::lit(vk);
                let update = lr * (mk / c1) / ((vk / c2).sqrt() + hp.eps);
                out[k] = T::lit(out[k].as_f64() * decay - update);
            }
            self.m[i] = Tensor::from_parts(p.shape().to_vec(), m);
            self.v[i] = Tensor::from_parts(p.shape().to_vec(), v);
            params.set(id, Tensor::from_parts(p.shape().to_vec(), out))?;
        }
        Ok(())
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.map(|v| T::lit(v.as_f64() * s));
        }
    }
    norm
}

/// Cosine decay from `base` at step 0 to `base / 10` at `total`, no warmup.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let floor = base / 10.0;
    let progress = if total == 0 { 1.0 } else { (step as f64 / total as f64).min(1.0) };
    floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
