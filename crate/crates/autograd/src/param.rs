//! Named parameters and the visitor trait that flattens a model into them.
//!
//! Names are hierarchical paths ("enc0.block1.moe.expert2.w_h"); they must be
//! unique within a model. The path encodes block position and role, which is
//! what lets checkpoint loaders address subsets of a model (expert slots,
//! shared trunk weights) without knowing its struct layout.

use crate::Tensor;

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter { name: name.into(), tensor }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}

/// Anything that owns parameters. Visitation order is struct-definition
/// order and therefore deterministic.
pub trait Module {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter));
}

impl Module for Parameter {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(self)
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(self)
    }
}

impl<M: Module> Module for Vec<M> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        for m in self {
            m.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for m in self {
            m.visit_params_mut(f);
        }
    }
}

pub fn collect_params(m: &dyn Module) -> Vec<&Parameter> {
    let mut out = Vec::new();
    m.visit_params(&mut |p| out.push(p));
    out
}

/// Total scalar count across all parameters.
pub fn param_count(m: &dyn Module) -> usize {
    let mut n = 0;
    m.visit_params(&mut |p| n += p.numel());
    n
}

pub fn find_param<'a>(m: &'a dyn Module, name: &str) -> Option<&'a Parameter> {
    let mut found = None;
    m.visit_params(&mut |p| {
        if p.name == name {
            found = Some(p);
        }
    });
    found
}

pub fn zero_grads(m: &mut dyn Module) {
    m.visit_params_mut(&mut |p| p.tensor.zero_grad());
}

/// Asserts the uniqueness invariant on parameter names; returns the offender.
pub fn duplicate_name(m: &dyn Module) -> Option<String> {
    let mut seen = std::collections::HashSet::new();
    let mut dup = None;
    m.visit_params(&mut |p| {
        if !seen.insert(p.name.clone()) && dup.is_none() {
            dup = Some(p.name.clone());
        }
    });
    dup
}
