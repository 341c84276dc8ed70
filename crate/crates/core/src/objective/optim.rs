use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Step decay: `initial / factor^(step / every)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_every: usize,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 1e-2,
            decay_every: 2000,
            factor: 3.0,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial >= 0.0 && self.initial.is_finite())
            || self.decay_every == 0
            || self.factor.is_nan()
            || self.factor < 1.0
        {
            return Err(Error::Config(
                "learning rate must be >= 0, decay_every > 0 and factor >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn rate(&self, step: usize) -> f64 {
        self.initial / self.factor.powi((step / self.decay_every) as i32)
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm.is_finite() {
        grads.scale(T::from_f64(max_norm / norm));
    }
    norm
}

/// SGD with heavy-ball momentum: `v <- mu v + g`, `theta <- theta - lr v`.
///
/// Parameters without a gradient in a step are left untouched, velocity included.
#[derive(Clone, Debug)]
pub struct SgdMomentum<T> {
    pub momentum: f64,
    velocity: ParamStore<T>,
}

impl<T: Real> SgdMomentum<T> {
    pub fn new(params: &ParamStore<T>, momentum: f64) -> Self {
        let mut velocity = ParamStore::new();
        for (_, name, t) in params.iter() {
            velocity.add(name, Tensor::zeros(t.shape()));
        }
        Self { momentum, velocity }
    }

    pub fn velocity(&self) -> &ParamStore<T> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, v: &ParamStore<T>) -> Result<()> {
        self.velocity.load_values(v)
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        let mu = T::from_f64(self.momentum);
        let lr = T::from_f64(lr);
        let mut ids: Vec<_> = grads.by_param.keys().copied().collect();
        ids.sort_unstable();
        for id in ids {
            let g = &grads.by_param[&id];
            let v = self.velocity.get_mut(id);
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = mu * *vi + gi;
            }
            let v = self.velocity.get(id).data().to_vec();
            for (p, vi) in params.get_mut(id).data_mut().iter_mut().zip(v) {
                *p -= lr * vi;
            }
        }
    }
}
