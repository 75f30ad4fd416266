use std::collections::HashMap;

use super::param::Param;
use super::tape::Gradients;
use super::tensor::{Real, Tensor};

/// Adam with decoupled weight decay.
pub struct AdamW<T: Real = f32> {
    params: Vec<Param<T>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale the joint gradient to at most this L2 norm.
    pub max_grad_norm: Option<f64>,
    step: u64,
    state: HashMap<usize, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: Vec<Param<T>>, lr: f64) -> Self {
        Self {
            params,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: None,
            step: 0,
            state: HashMap::new(),
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Joint L2 norm of the gradients of this optimizer's parameters.
    pub fn grad_norm(&self, grads: &Gradients<T>) -> f64 {
        self.params
            .iter()
            .filter_map(|p| grads.param(p))
            .flat_map(|g| g.data().iter().map(|v| v.f64() * v.f64()))
            .sum::<f64>()
            .sqrt()
    }

    /// One update. Parameters without a gradient (unreached) are left alone.
    pub fn step(&mut self, grads: &Gradients<T>) {
        self.step += 1;
        let clip = match self.max_grad_norm {
            Some(max) => {
                let n = self.grad_norm(grads);
                if n > max { T::of(max / n) } else { T::one() }
            }
            None => T::one(),
        };
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let step_size = T::of(self.lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.eps);
        let decay = T::of(1.0 - self.lr * self.weight_decay);
        for p in &self.params {
            let Some(g) = grads.param(p) else { continue };
            let (m, v) = self
                .state
                .entry(p.uid())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            for ((mi, vi), &gi) in m.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                let gi = gi * clip;
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            }
            p.update(|w| {
                for ((wi, &mi), &vi) in w.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                    *wi = *wi * decay - step_size * mi / ((vi * inv_bc2).sqrt() + eps);
                }
            });
        }
    }
}
