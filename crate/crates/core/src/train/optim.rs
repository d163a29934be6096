//! AdamW with decoupled weight decay, and parameter EMA.

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One AdamW update of `param` in place. `step` is 1-based.
///
/// ```text
/// p ← p − lr·wd·p
/// m ← β₁m + (1−β₁)g,  v ← β₂v + (1−β₂)g²
/// p ← p − lr · (m / (1−β₁ᵗ)) / (√(v / (1−β₂ᵗ)) + ε)
/// ```
pub fn adamw_step(
    param: &mut [f32],
    grad: &[f32],
    state: &mut Moments,
    step: u64,
    lr: f64,
    weight_decay: f64,
    config: &AdamWConfig,
) -> Result<()> {
    if grad.len() != param.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::shape(
            "adamw_step",
            format!(
                "param {}, grad {}, moments {}/{}",
                param.len(),
                grad.len(),
                state.m.len(),
                state.v.len()
            ),
        ));
    }
    if step == 0 {
        return Err(Error::InvalidArgument("adamw step counter starts at 1".into()));
    }
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let shrink = 1.0 - lr * weight_decay;
    for i in 0..param.len() {
        let g = grad[i] as f64;
        let m = b1 * state.m[i] as f64 + (1.0 - b1) * g;
        let v = b2 * state.v[i] as f64 + (1.0 - b2) * g * g;
        state.m[i] = m as f32;
        state.v[i] = v as f32;
        let p = param[i] as f64 * shrink;
        param[i] = (p - lr * (m / c1) / ((v / c2).sqrt() + config.eps)) as f32;
    }
    Ok(())
}

/// AdamW over every trainable tensor of a [`ParamStore`]. Decay applies to
/// weights only; biases and norm parameters are not decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    state: Vec<Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        AdamW {
            config,
            step: 0,
            state: store
                .entries()
                .iter()
                .map(|e| Moments::zeros(e.tensor.numel()))
                .collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// `grads` is indexed like the store; `None` entries are skipped.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f32>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape(
                "adamw",
                format!("{} gradients for {} tensors", grads.len(), store.len()),
            ));
        }
        self.step += 1;
        for id in store.ids().collect::<Vec<_>>() {
            let (trainable, decays) = {
                let e = store.entry(id);
                (e.trainable, e.role.decays())
            };
            let Some(g) = grads[id.index()].as_deref().filter(|_| trainable) else {
                continue;
            };
            let wd = if decays { self.config.weight_decay } else { 0.0 };
            adamw_step(
                store.tensor_mut(id).data_mut(),
                g,
                &mut self.state[id.index()],
                self.step,
                lr,
                wd,
                &self.config,
            )?;
        }
        Ok(())
    }
}

/// `shadow ← decay·shadow + (1−decay)·params`.
pub fn ema_update(shadow: &mut [f32], params: &[f32], decay: f64) -> Result<()> {
    if shadow.len() != params.len() {
        return Err(Error::shape(
            "ema_update",
            format!("shadow {} vs params {}", shadow.len(), params.len()),
        ));
    }
    for (s, &p) in shadow.iter_mut().zip(params) {
        *s = (decay * *s as f64 + (1.0 - decay) * p as f64) as f32;
    }
    Ok(())
}

/// Exponential moving average of every stored tensor, running statistics
/// included.
#[derive(Debug, Clone)]
pub struct Ema {
    pub decay: f64,
    shadow: ParamStore,
}

impl Ema {
    pub fn new(store: &ParamStore, decay: f64) -> Self {
        Ema {
            decay,
            shadow: store.clone(),
        }
    }

    pub fn update(&mut self, store: &ParamStore) -> Result<()> {
        for id in store.ids() {
            ema_update(
                self.shadow.tensor_mut(id).data_mut(),
                store.tensor(id).data(),
                self.decay,
            )?;
        }
        Ok(())
    }

    pub fn shadow(&self) -> &ParamStore {
        &self.shadow
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = vec![0.5f32, -1.25];
        let mut s = Moments::zeros(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut s, 1, 1e-3, 0.0, &AdamWConfig::default()).unwrap();
        assert_eq!(p, vec![0.5, -1.25]);
    }

    #[test]
    fn zero_grad_decay_scales() {
        let mut p = vec![2.0f32];
        let mut s = Moments::zeros(1);
        adamw_step(&mut p, &[0.0], &mut s, 1, 0.1, 0.5, &AdamWConfig::default()).unwrap();
        assert!((p[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-7);
    }

    #[test]
    fn ema_cases() {
        let mut s = vec![0.0f32];
        ema_update(&mut s, &[2.0], 0.5).unwrap();
        ema_update(&mut s, &[2.0], 0.5).unwrap();
        assert_eq!(s, vec![1.5]);
        let mut s = vec![3.0f32];
        ema_update(&mut s, &[7.0], 0.0).unwrap();
        assert_eq!(s, vec![7.0]);
        ema_update(&mut s, &[1.0], 1.0).unwrap();
        assert_eq!(s, vec![7.0]);
        assert!(ema_update(&mut s, &[1.0, 2.0], 0.5).is_err());
    }
}
