//! Small parameter bundles (affine maps, layer norms) and initialization.

use autograd::{Module, Parameter, Tape, Tensor, TensorId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::Result;

/// Truncated-normal initializer (std 0.02, clipped at two standard
/// deviations) for weights; zeros for biases; ones/zeros for norms.
pub struct Init {
    rng: ChaCha8Rng,
    std: f32,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed), std: 0.02 }
    }

    pub fn trunc_normal(&mut self, n: usize) -> Vec<f32> {
        let dist = Normal::new(0.0f32, self.std).expect("valid normal");
        (0..n)
            .map(|_| loop {
                let v = dist.sample(&mut self.rng);
                if v.abs() <= 2.0 * self.std {
                    break v;
                }
            })
            .collect()
    }
}

/// Affine map parameters, weight stored `[out, in]`.
pub struct LinearP {
    pub w: Parameter,
    pub b: Option<Parameter>,
}

impl LinearP {
    pub fn new(name: &str, out_dim: usize, in_dim: usize, bias: bool, init: &mut Init) -> Self {
        let w = Parameter::new(
            format!("{name}.w"),
            Tensor::new(vec![out_dim, in_dim], init.trunc_normal(out_dim * in_dim))
                .expect("shape/data consistent")
                .with_grad(),
        );
        let b = bias.then(|| {
            Parameter::new(format!("{name}.b"), Tensor::zeros(vec![out_dim]).with_grad())
        });
        LinearP { w, b }
    }

    pub fn out_dim(&self) -> usize {
        self.w.tensor.shape[0]
    }

    pub fn forward(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let w = tape.param(&self.w);
        let b = self.b.as_ref().map(|b| tape.param(b));
        Ok(tape.linear(x, w, b)?)
    }
}

impl Module for LinearP {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.w);
        if let Some(b) = &self.b {
            f(b);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.w);
        if let Some(b) = &mut self.b {
            f(b);
        }
    }
}

pub struct LayerNormP {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub eps: f32,
}

impl LayerNormP {
    pub fn new(name: &str, dim: usize, eps: f32) -> Self {
        LayerNormP {
            gamma: Parameter::new(
                format!("{name}.gamma"),
                Tensor::new(vec![dim], vec![1.0; dim]).expect("shape/data consistent").with_grad(),
            ),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(vec![dim]).with_grad()),
            eps,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        Ok(tape.layer_norm(x, g, b, self.eps)?)
    }
}

impl Module for LayerNormP {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}
