//! Adam with the inverse-square-root warmup schedule.

use crate::error::{Error, Result};
use crate::model::{Bound, ParamStore};
use crate::tensor::Gradients;

/// `scale · d^−½ · min(step^−½, step · W^−³ᐟ²)`.
pub fn lr_at(step: u64, d_model: usize, warmup: u64, scale: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::invalid("learning-rate steps count from 1"));
    }
    if warmup == 0 || d_model == 0 {
        return Err(Error::invalid("warmup and d_model must be positive"));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok(scale * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: u64,
    /// Peak-scale factor of the schedule.
    pub lr_scale: f64,
    /// Global gradient-norm clipping threshold (off when `None`).
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup: 400,
            lr_scale: 1.0,
            clip_norm: None,
        }
    }
}

/// First and second moments for every tensor of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamMoments {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamMoments {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![0.0f32; t.numel()]).collect();
        AdamMoments { m: zeros(), v: zeros() }
    }

    /// Whether these moments fit `store` tensor for tensor.
    pub fn matches(&self, store: &ParamStore) -> bool {
        self.m.len() == store.len() && store.iter().zip(&self.m).all(|((_, t), m)| t.numel() == m.len())
    }
}

/// Step counter and hyper-parameters shared by the moments of every model
/// updated together.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    d_model: usize,
}

impl Adam {
    pub fn new(config: AdamConfig, d_model: usize) -> Self {
        Adam {
            config,
            step: 0,
            d_model,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Starts update `step + 1` and returns its learning rate.
    pub fn begin(&mut self) -> Result<f64> {
        self.step += 1;
        lr_at(self.step, self.d_model, self.config.warmup, self.config.lr_scale)
    }

    /// Global gradient norm over all `(store, bound)` pairs.
    pub fn grad_norm(grads: &Gradients<f32>, bounds: &[&Bound]) -> f64 {
        bounds.iter().map(|b| grads.norm_sq(b.vars())).sum::<f64>().sqrt()
    }

    /// Clip factor for this update (1 when clipping is off).
    pub fn clip_factor(&self, norm: f64) -> f64 {
        match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        }
    }

    /// Applies one Adam update to the parameters that received a gradient;
    /// parameters off the loss path (and their moments) stay untouched.
    pub fn apply(
        &self,
        lr: f64,
        clip: f64,
        store: &mut ParamStore,
        moments: &mut AdamMoments,
        bound: &Bound,
        grads: &Gradients<f32>,
    ) -> Result<()> {
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.slice(bound.var(id)) else { continue };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence(format!("non-finite gradient for {}", store.name(id))));
            }
            let (m, v) = (&mut moments.m[id.0], &mut moments.v[id.0]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = f64::from(g[i]) * clip;
                let mi = c.beta1 * f64::from(m[i]) + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * f64::from(v[i]) + (1.0 - c.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                p[i] = (f64::from(p[i]) - update) as f32;
            }
        }
        Ok(())
    }
}
