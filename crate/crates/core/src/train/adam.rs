//! Adam with coupled L2 weight decay (the decay term joins the gradient).

use super::TrainError;
use crate::graph::{LayerGraph, ParamId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Per-parameter first/second moments plus the step counter.
pub struct AdamState {
    cfg: AdamConfig,
    ids: Vec<ParamId>,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    step: u64,
}

impl AdamState {
    /// Moment slots for every learnable parameter of `graph`.
    pub fn new(graph: &LayerGraph<f32>, cfg: AdamConfig) -> Self {
        let ids = graph.registry().learnable_ids();
        let m = ids.iter().map(|&id| Tensor::zeros(graph.registry().get(id).tensor.shape())).collect();
        let v = ids.iter().map(|&id| Tensor::zeros(graph.registry().get(id).tensor.shape())).collect();
        AdamState { cfg, ids, m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update over all learnable parameters. `grads` must
    /// hold one gradient per learnable parameter, in registry order (zeros
    /// for parameters the loss did not reach).
    pub fn step(
        &mut self,
        graph: &mut LayerGraph<f32>,
        grads: &[Tensor<f32>],
        lr: f64,
    ) -> Result<(), TrainError> {
        assert_eq!(grads.len(), self.ids.len(), "one gradient per learnable parameter");
        self.step += 1;
        let t = self.step;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        let lr = lr as f32;

        for (i, &id) in self.ids.iter().enumerate() {
            let grad = &grads[i];
            if let Some(bad) = grad.data().iter().find(|g| !g.is_finite()) {
                let _ = bad;
                return Err(TrainError::NonFiniteGradient {
                    param: graph.registry().get(id).name.clone(),
                    step: t,
                });
            }
            let entry = graph.registry_mut().get_mut(id);
            let p = entry.tensor.data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let g = grad.data()[j] + c.weight_decay * p[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
