use crate::error::{NumericsError, Result};
use crate::params::{Gradients, ParamStore};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(NumericsError::Contract(format!("invalid optimizer hyperparameters {self:?}")))
        }
    }
}

/// Moment buffers for every parameter plus the step counter.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step_count: u64,
    pub hyper: AdamHyper,
}

/// Bias-corrected Adam with decoupled weight decay.
pub struct AdamW;

impl AdamW {
    pub fn init<T: Real>(params: &ParamStore<T>, hyper: AdamHyper) -> Result<OptimState<T>> {
        hyper.validate()?;
        let zeros = || params.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect();
        Ok(OptimState { first_moment: zeros(), second_moment: zeros(), step_count: 0, hyper })
    }

    /// One update at `state.hyper.lr`.
    pub fn step<T: Real>(params: &mut ParamStore<T>, grads: &Gradients<T>, state: &mut OptimState<T>) -> Result<()> {
        let lr = state.hyper.lr;
        Self::step_with_lr(params, grads, state, lr)
    }

    /// One update at an explicit (scheduled) learning rate.
    pub fn step_with_lr<T: Real>(
        params: &mut ParamStore<T>,
        grads: &Gradients<T>,
        state: &mut OptimState<T>,
        lr: f64,
    ) -> Result<()> {
        if grads.len() != params.len() || state.first_moment.len() != params.len() {
            return Err(NumericsError::Shape("optimizer state does not match parameters".into()));
        }
        for id in params.ids() {
            if grads.get(id).iter().any(|g| !g.is_finite()) {
                return Err(NumericsError::Numeric(format!("non-finite gradient for {}", params.name(id))));
            }
        }
        let h = state.hyper;
        state.step_count += 1;
        let t = state.step_count as f64;
        let bc1 = 1.0 - h.beta1.powf(t);
        let bc2 = 1.0 - h.beta2.powf(t);
        let (b1, b2) = (T::c(h.beta1), T::c(h.beta2));
        let (one_b1, one_b2) = (T::c(1.0 - h.beta1), T::c(1.0 - h.beta2));
        let step = T::c(lr / bc1);
        let inv_bc2 = T::c(1.0 / bc2);
        let eps = T::c(h.eps);
        let decay = T::c(1.0 - lr * h.weight_decay);
        for id in params.ids() {
            let g = grads.get(id);
            let m = &mut state.first_moment[id.0];
            let v = &mut state.second_moment[id.0];
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                p[i] = p[i] * decay - step * m[i] / denom;
            }
        }
        Ok(())
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm<T: Real>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.norm().to_f64().unwrap_or(f64::INFINITY);
    if norm > max_norm && norm.is_finite() {
        let s = T::c(max_norm / norm);
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
