use serde::{Deserialize, Serialize};

use crate::model::ModelParams;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer over parameters in visit order.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParams<Tensor>, grads: &[Vec<f64>]) {
        self.step += 1;
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        let (kind, lr, t) = (self.kind, self.lr, self.step);
        let mut slot = 0;
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |_, p| {
            let g = &grads[slot];
            match kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in p.values_mut().iter_mut().zip(g) {
                        *w -= lr * gi;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (m, v) = (&mut m_all[slot], &mut v_all[slot]);
                    for (i, w) in p.values_mut().iter_mut().enumerate() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
            slot += 1;
        });
        assert_eq!(slot, grads.len(), "gradient list does not match parameters");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Mechanism;
    use crate::model::{Model, ModelConfig};
    use crate::numerics::Tensor;

    fn tiny() -> Model {
        let mut cfg = ModelConfig::toy_default(Mechanism::Svda);
        cfg.image_h = 8;
        cfg.image_w = 8;
        cfg.patch_size = 4;
        cfg.d_model = 4;
        cfg.attention = crate::attention::AttentionConfig::new(4, 1, Mechanism::Svda).unwrap();
        cfg.num_layers = 1;
        cfg.mlp_hidden = 4;
        Model::init(cfg, 3).unwrap()
    }

    fn grads_like(model: &Model, value: f64) -> Vec<Vec<f64>> {
        model.params.named().iter().map(|(_, t)| vec![value; t.len()]).collect()
    }

    #[test]
    fn sgd_step() {
        let mut model = tiny();
        let before = model.params.head_b.values().to_vec();
        let grads = grads_like(&model, 2.0);
        Optimizer::new(OptimizerKind::Sgd, 0.1).step(&mut model.params, &grads);
        for (a, b) in model.params.head_b.values().iter().zip(&before) {
            assert!((b - a - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        // after one step the bias-corrected ratio is g/|g|, so each weight moves by ~lr
        let mut model = tiny();
        let before = model.params.head_b.values().to_vec();
        let grads = grads_like(&model, -3.0);
        Optimizer::new(OptimizerKind::default(), 1e-3).step(&mut model.params, &grads);
        for (a, b) in model.params.head_b.values().iter().zip(&before) {
            assert!((a - b - 1e-3).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_learning_rate_is_frozen() {
        let mut model = tiny();
        let before = model.clone();
        let mut opt = Optimizer::new(OptimizerKind::default(), 0.0);
        for k in 0..3 {
            let grads = grads_like(&model, 1.0 + k as f64);
            opt.step(&mut model.params, &grads);
        }
        assert_eq!(model, before);
        assert_eq!(opt.steps_taken(), 3);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        // single scalar "model": drive head_b toward zero under loss 0.5*w^2
        let mut model = tiny();
        model.params.head_b = Tensor::filled(&[model.params.head_b.len()], 1.0);
        let mut opt = Optimizer::new(OptimizerKind::default(), 0.05);
        for _ in 0..400 {
            let mut grads = grads_like(&model, 0.0);
            let last = grads.len() - 1;
            grads[last] = model.params.head_b.values().to_vec();
            opt.step(&mut model.params, &grads);
        }
        assert!(model.params.head_b.values().iter().all(|w| w.abs() < 1e-2));
    }
}
