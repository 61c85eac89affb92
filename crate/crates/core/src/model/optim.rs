use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimiserConfig {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimiserConfig {
    fn default() -> Self {
        OptimiserConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimiser state for an ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Optimiser {
    config: OptimiserConfig,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimiser {
    pub fn new(config: OptimiserConfig, lr: f64) -> Self {
        Self {
            config,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update. `params` and `grads` must be given in the same
    /// order and with the same lengths on every call.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        self.step += 1;
        match self.config {
            OptimiserConfig::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.iter_mut().zip(g.iter()) {
                        *pv = (f64::from(*pv) - self.lr * f64::from(*gv)) as f32;
                    }
                }
            }
            OptimiserConfig::Adam { beta1, beta2, eps } => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    assert_eq!(p.len(), self.m[i].len(), "parameter {i} changed size");
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..p.len() {
                        let gj = f64::from(g[j]);
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                        let update = self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                        p[j] = (f64::from(p[j]) - update) as f32;
                    }
                }
            }
        }
    }
}
