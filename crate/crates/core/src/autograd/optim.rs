use crate::error::Result;
use crate::scalar::Scalar;

use super::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One decoupled-weight-decay Adam update of `param` in place.
///
/// `t` is the 1-based step count used for bias correction.
pub fn adamw_update<T: Scalar>(param: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], t: u64, cfg: &AdamWConfig) {
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    let wd = T::lit(cfg.weight_decay);
    let bc1 = T::one() - b1.powi(t as i32);
    let bc2 = T::one() - b2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * param[i]);
    }
}

/// AdamW with per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar = f64> {
    pub cfg: AdamWConfig,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = |_| store.iter().map(|(_, p)| vec![T::zero(); p.value.numel()]).collect();
        Self {
            cfg,
            t: 0,
            m: zeros(0),
            v: zeros(1),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update using the gradients accumulated on the store's
    /// leaves (missing gradients count as zero), then clears them.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.t += 1;
        let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for id in ids {
            let value = store.get(id);
            let grad = value.grad().unwrap_or_else(|| vec![T::zero(); value.numel()]);
            let mut data = value.to_vec();
            let i = id.index();
            adamw_update(&mut data, &grad, &mut self.m[i], &mut self.v[i], self.t, &self.cfg);
            store.set_data(id, data)?;
        }
        Ok(())
    }
}

/// Scales all accumulated gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for (_, p) in store.iter() {
        if let Some(g) = p.value.grad() {
            sq += g.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let t = store.get(id);
            if let Some(g) = t.grad() {
                t.set_grad(g.into_iter().map(|x| x * s).collect());
            }
        }
    }
    Ok(norm)
}
