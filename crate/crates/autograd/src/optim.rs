//! AdamW with decoupled weight decay: the decay term scales the weight
//! directly instead of being folded into the gradient's moment estimates.

use std::collections::BTreeMap;

use crate::param::Module;
use crate::{Error, Result};

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Optimizer state. Moment buffers are keyed by parameter name so the same
/// state survives model reconstruction, as long as names are stable.
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter of the module. Every parameter must
    /// carry a gradient; the caller zeroes grads afterwards.
    pub fn step(&mut self, module: &mut dyn Module) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - (self.beta1 as f64).powi(t);
        let bc2 = 1.0 - (self.beta2 as f64).powi(t);
        let (beta1, beta2, eps, lr, wd) = (self.beta1, self.beta2, self.eps, self.lr, self.weight_decay);

        let mut missing: Option<String> = None;
        let moments = &mut self.moments;
        module.visit_params_mut(&mut |p| {
            if missing.is_some() {
                return;
            }
            let grad = match &p.tensor.grad {
                Some(g) => g,
                None => {
                    missing = Some(p.name.clone());
                    return;
                }
            };
            let entry = moments.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; p.tensor.numel()],
                v: vec![0.0; p.tensor.numel()],
            });
            for i in 0..p.tensor.data.len() {
                let g = grad[i];
                entry.m[i] = beta1 * entry.m[i] + (1.0 - beta1) * g;
                entry.v[i] = beta2 * entry.v[i] + (1.0 - beta2) * g * g;
                let m_hat = entry.m[i] as f64 / bc1;
                let v_hat = entry.v[i] as f64 / bc2;
                let update = m_hat / (v_hat.sqrt() + eps as f64);
                let w = p.tensor.data[i] as f64;
                p.tensor.data[i] = (w - lr as f64 * (update + wd as f64 * w)) as f32;
            }
        });
        match missing {
            Some(name) => Err(Error::MissingGrad { name }),
            None => Ok(()),
        }
    }
}
