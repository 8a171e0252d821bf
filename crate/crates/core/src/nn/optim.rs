use std::collections::HashMap;

use super::graph::Gradients;
use super::params::{ParamId, ParamStore};
use super::real::Real;

/// Adam over a fixed group of parameters.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    group: Vec<ParamId>,
    step: u64,
    moments: HashMap<ParamId, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(group: Vec<ParamId>, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, group, step: 0, moments: HashMap::new() }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn group(&self) -> &[ParamId] {
        &self.group
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; parameters without a gradient are left unchanged.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step_size = T::lit(self.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(self.eps);
        for &id in &self.group {
            let Some(g) = grads.get(id) else { continue };
            let n = g.len();
            let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let w = store.get_mut(id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                w[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
    }
}
