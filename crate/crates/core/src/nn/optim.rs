use serde::{Deserialize, Serialize};

use super::layers::Module;
use super::tensor::Tensor;

/// Adaptive-moment gradient descent.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    steps: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self::with_betas(lr, 0.9, 0.999)
    }

    pub fn with_betas(lr: f32, beta1: f32, beta2: f32) -> Self {
        Adam { lr, beta1, beta2, eps: 1e-8, steps: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. `grads` follows the module's visiting order.
    pub fn step<M: Module>(&mut self, model: &mut M, grads: &[Tensor]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(grads.len(), self.m.len(), "gradient count changed between steps");
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut("", &mut |_, p| {
            let g = grads[idx].data();
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            idx += 1;
            if lr == 0.0 {
                return;
            }
            let mut data = p.to_vec();
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= lr * mh / (vh.sqrt() + eps);
            }
            *p = Tensor::param(p.shape(), data);
        });
    }
}

/// `target <- mu * target + (1 - mu) * source`, parameter by parameter.
pub fn ema_update<M: Module>(target: &mut M, source: &M, mu: f32) {
    let src = source.params();
    let mut idx = 0;
    target.visit_mut("", &mut |_, p| {
        let s = src[idx].data();
        idx += 1;
        if mu == 1.0 {
            return;
        }
        let data: Vec<f32> = p.data().iter().zip(s).map(|(&t, &s)| mu * t + (1.0 - mu) * s).collect();
        *p = Tensor::new(p.shape(), data);
    });
}

/// Global L2 norm of a gradient list.
pub fn grad_norm(grads: &[Tensor]) -> f32 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| (*v as f64) * (*v as f64))
        .sum::<f64>()
        .sqrt() as f32
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: Vec<Tensor>, max_norm: f32) -> Vec<Tensor> {
    let n = grad_norm(&grads);
    if n <= max_norm || n == 0.0 {
        return grads;
    }
    let s = max_norm / n;
    grads.iter().map(|g| Tensor::new(g.shape(), g.data().iter().map(|v| v * s).collect())).collect()
}
