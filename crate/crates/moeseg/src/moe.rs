//! Dense softmax-gated mixture of experts.
//!
//! Every block position that hosts a mixture evaluates all experts for all
//! tokens; a single-layer gate produces a per-token (or per-sample) convex
//! combination of the expert outputs. There is no top-k sparsity, no
//! capacity limit, and no auxiliary balancing loss: soft routing keeps every
//! expert differentiable from every token.

use std::sync::Arc;

use autograd::{Module, Parameter, Tape, Tensor, TensorId};

use crate::config::{GateGranularity, GeluKind, ModelConfig};
use crate::nn::{Init, LinearP};
use crate::{Error, Result};

/// Per-site dimensions of one mixture layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl MoeConfig {
    pub fn for_width(c: usize, num_experts: usize, hidden_ratio: usize) -> Self {
        MoeConfig { num_experts, in_dim: c, hidden_dim: hidden_ratio * c, out_dim: c }
    }
}

/// Two-layer GELU expert: `w_o * GELU(w_h * x + b_h) + b_o`.
pub struct ExpertP {
    pub w_h: Parameter,
    pub b_h: Parameter,
    pub w_o: Parameter,
    pub b_o: Parameter,
}

impl ExpertP {
    pub fn new(name: &str, in_dim: usize, hidden_dim: usize, out_dim: usize, init: &mut Init) -> Self {
        let t = |shape: Vec<usize>, data: Vec<f32>| Tensor::new(shape, data).expect("consistent").with_grad();
        ExpertP {
            w_h: Parameter::new(format!("{name}.w_h"), t(vec![hidden_dim, in_dim], init.trunc_normal(hidden_dim * in_dim))),
            b_h: Parameter::new(format!("{name}.b_h"), Tensor::zeros(vec![hidden_dim]).with_grad()),
            w_o: Parameter::new(format!("{name}.w_o"), t(vec![out_dim, hidden_dim], init.trunc_normal(out_dim * hidden_dim))),
            b_o: Parameter::new(format!("{name}.b_o"), Tensor::zeros(vec![out_dim]).with_grad()),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w_h.tensor.shape[1]
    }
}

impl Module for ExpertP {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.w_h);
        f(&self.b_h);
        f(&self.w_o);
        f(&self.b_o);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.w_h);
        f(&mut self.b_h);
        f(&mut self.w_o);
        f(&mut self.b_o);
    }
}

/// Single affine layer feeding the routing softmax. Initialized to zeros so
/// training starts from an unbiased uniform mixture.
pub struct GateP {
    pub w: Parameter,
    pub b: Parameter,
}

impl GateP {
    pub fn new(name: &str, num_experts: usize, in_dim: usize) -> Self {
        GateP {
            w: Parameter::new(format!("{name}.w"), Tensor::zeros(vec![num_experts, in_dim]).with_grad()),
            b: Parameter::new(format!("{name}.b"), Tensor::zeros(vec![num_experts]).with_grad()),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.w.tensor.shape[0]
    }
}

impl Module for GateP {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.w);
        f(&self.b);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// The feed-forward half of a transformer block: either a plain MLP or a
/// gated mixture. An absent gate means uniform 1/n weights with no gating
/// parameters at all (the gating-off ablation and phase-1 single-expert
/// pre-training both use this).
pub enum FfnP {
    Mlp(ExpertP),
    Moe { gate: Option<GateP>, experts: Vec<ExpertP> },
}

impl Module for FfnP {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        match self {
            FfnP::Mlp(e) => e.visit_params(f),
            FfnP::Moe { gate, experts } => {
                if let Some(g) = gate {
                    g.visit_params(f);
                }
                experts.visit_params(f);
            }
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        match self {
            FfnP::Mlp(e) => e.visit_params_mut(f),
            FfnP::Moe { gate, experts } => {
                if let Some(g) = gate {
                    g.visit_params_mut(f);
                }
                experts.visit_params_mut(f);
            }
        }
    }
}

/// Forcing the mixture during probes: pin one slot or flatten to uniform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateOverride {
    #[default]
    None,
    OneHot(usize),
    Uniform,
}

/// How a mixture site should run its forward pass.
#[derive(Debug, Clone, Copy)]
pub struct MoeFwdOpts {
    pub gelu: GeluKind,
    pub granularity: GateGranularity,
    pub gate_override: GateOverride,
    /// Samples in the batch and tokens per sample; needed for per-sample
    /// pooled gating. Their product is the token count.
    pub batch: usize,
    pub tokens_per_sample: usize,
}

/// `expert(x) = w_o * GELU(w_h * x + b_h) + b_o`. No dropout, no residual;
/// the residual lives in the block wiring.
pub fn expert_forward(tape: &mut Tape, x: TensorId, e: &ExpertP, gelu: GeluKind) -> Result<TensorId> {
    let wh = tape.param(&e.w_h);
    let bh = tape.param(&e.b_h);
    let h = tape.linear(x, wh, Some(bh))?;
    let h = tape.gelu(h, gelu == GeluKind::Exact);
    let wo = tape.param(&e.w_o);
    let bo = tape.param(&e.b_o);
    Ok(tape.linear(h, wo, Some(bo))?)
}

/// Softmax routing weights, one row per token: `softmax(w_g * x + b_g)`.
pub fn gate_weights(tape: &mut Tape, x: TensorId, gate: &GateP) -> Result<TensorId> {
    let w = tape.param(&gate.w);
    let b = tape.param(&gate.b);
    let logits = tape.linear(x, w, Some(b))?;
    Ok(tape.softmax_last(logits)?)
}

fn uniform_weights(tape: &mut Tape, tokens: usize, n: usize) -> Result<TensorId> {
    Ok(tape.constant(vec![1.0 / n as f32; tokens * n], vec![tokens, n])?)
}

fn one_hot_weights(tape: &mut Tape, tokens: usize, n: usize, slot: usize) -> Result<TensorId> {
    if slot >= n {
        return Err(Error::Config(format!("gate override slot {slot} out of {n} experts")));
    }
    let mut data = vec![0.0f32; tokens * n];
    for t in 0..tokens {
        data[t * n + slot] = 1.0;
    }
    Ok(tape.constant(data, vec![tokens, n])?)
}

/// Dense mixture: every expert runs on every token and the outputs combine
/// by the per-token gate weights, broadcast over channels.
pub fn moe_forward(
    tape: &mut Tape,
    x: TensorId,
    gate: Option<&GateP>,
    experts: &[ExpertP],
    opts: &MoeFwdOpts,
) -> Result<TensorId> {
    let n = experts.len();
    if n == 0 {
        return Err(Error::Config("mixture needs at least one expert".into()));
    }
    if let Some(g) = gate {
        if g.num_experts() != n {
            return Err(Error::Config(format!(
                "gate expects {} experts, got {}",
                g.num_experts(),
                n
            )));
        }
    }
    let tokens = opts.batch * opts.tokens_per_sample;

    let weights = match (opts.gate_override, gate) {
        (GateOverride::OneHot(slot), _) => one_hot_weights(tape, tokens, n, slot)?,
        (GateOverride::Uniform, _) | (GateOverride::None, None) => uniform_weights(tape, tokens, n)?,
        (GateOverride::None, Some(g)) => match opts.granularity {
            GateGranularity::Token => gate_weights(tape, x, g)?,
            GateGranularity::Sample => {
                let c = experts[0].in_dim();
                let pooled = tape.mean_axis1(x, opts.batch, opts.tokens_per_sample, c)?;
                let per_sample = gate_weights(tape, pooled, g)?;
                // repeat each sample's row over its tokens
                let l = opts.tokens_per_sample;
                let idx: Arc<Vec<u32>> = Arc::new(
                    (0..tokens * n).map(|i| ((i / (l * n)) * n + i % n) as u32).collect(),
                );
                tape.gather(per_sample, idx, vec![tokens, n])?
            }
        },
    };

    let mut combined: Option<TensorId> = None;
    for (i, expert) in experts.iter().enumerate() {
        let out = expert_forward(tape, x, expert, opts.gelu)?;
        let col: Arc<Vec<u32>> = Arc::new((0..tokens).map(|t| (t * n + i) as u32).collect());
        let wi = tape.gather(weights, col, vec![tokens])?;
        let scaled = tape.scale_rows(out, wi)?;
        combined = Some(match combined {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    Ok(combined.expect("at least one expert"))
}

/// Parameters one additional expert adds at a single mixture site.
pub fn added_params_per_site(in_dim: usize, hidden_dim: usize, out_dim: usize, gated: bool) -> usize {
    let expert = in_dim * hidden_dim + hidden_dim + hidden_dim * out_dim + out_dim;
    let gate_row = if gated { in_dim + 1 } else { 0 };
    expert + gate_row
}

/// Exact parameter-count change between two configs that differ only in
/// expert count: per-expert weights at every mixture site plus one gating
/// row (and bias entry) per site per added expert.
pub fn count_added_params(before: &ModelConfig, after: &ModelConfig) -> Result<i64> {
    let mut normalized = after.clone();
    normalized.num_experts = before.num_experts;
    if &normalized != before {
        return Err(Error::Config(
            "count_added_params: configs differ in fields other than num_experts".into(),
        ));
    }
    let delta_n = after.num_experts as i64 - before.num_experts as i64;
    let per_expert: i64 = before
        .moe_site_dims()
        .iter()
        .map(|&c| added_params_per_site(c, before.hidden_ratio * c, c, before.gated) as i64)
        .sum();
    Ok(delta_n * per_expert)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn opts(batch: usize, l: usize) -> MoeFwdOpts {
        MoeFwdOpts {
            gelu: GeluKind::Tanh,
            granularity: GateGranularity::Token,
            gate_override: GateOverride::None,
            batch,
            tokens_per_sample: l,
        }
    }

    fn random_tokens(tape: &mut Tape, rng: &mut ChaCha8Rng, t: usize, c: usize) -> TensorId {
        let data = (0..t * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        tape.constant(data, vec![t, c]).unwrap()
    }

    #[test]
    fn zero_gate_routes_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = random_tokens(&mut tape, &mut rng, 7, 4);
        let gate = GateP::new("g", 3, 4);
        let w = gate_weights(&mut tape, x, &gate).unwrap();
        for &v in tape.data(w) {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn dominant_bias_pins_the_gate() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.5; 4], vec![1, 4]).unwrap();
        let mut gate = GateP::new("g", 2, 4);
        gate.b.tensor.data = vec![10.0, -10.0];
        let w = gate_weights(&mut tape, x, &gate).unwrap();
        assert!((tape.data(w)[0] - 1.0).abs() < 1e-6);
        assert!(tape.data(w)[1] < 1e-6);
    }

    #[test]
    fn gate_rows_sum_to_one_thousand_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut init = Init::new(2);
        let mut tape = Tape::new();
        let x = random_tokens(&mut tape, &mut rng, 1000, 6);
        let mut gate = GateP::new("g", 3, 6);
        gate.w.tensor.data = init.trunc_normal(18).iter().map(|v| v * 50.0).collect();
        let w = gate_weights(&mut tape, x, &gate).unwrap();
        for row in tape.data(w).chunks(3) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn expert_bias_only_path() {
        let mut init = Init::new(0);
        let mut e = ExpertP::new("e", 3, 6, 3, &mut init);
        e.w_h.tensor.data.iter_mut().for_each(|v| *v = 0.0);
        e.w_o.tensor.data.iter_mut().for_each(|v| *v = 0.0);
        e.b_o.tensor.data = vec![2.5, -1.0, 0.0];
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0], vec![2, 3]).unwrap();
        let y = expert_forward(&mut tape, x, &e, GeluKind::Tanh).unwrap();
        assert_eq!(tape.data(y), &[2.5, -1.0, 0.0, 2.5, -1.0, 0.0]);
    }

    #[test]
    fn expert_identity_regime_above_gelu_knee() {
        let dim = 3;
        let mut init = Init::new(0);
        let mut e = ExpertP::new("e", dim, dim, dim, &mut init);
        let mut eye = vec![0.0; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = 1.0;
        }
        e.w_h.tensor.data = eye.clone();
        e.w_o.tensor.data = eye;
        e.b_h.tensor.data = vec![0.0; dim];
        e.b_o.tensor.data = vec![0.0; dim];
        let mut tape = Tape::new();
        let x = tape.constant(vec![5.0, 6.5, 8.0], vec![1, 3]).unwrap();
        let y = expert_forward(&mut tape, x, &e, GeluKind::Tanh).unwrap();
        for (a, b) in tape.data(y).iter().zip(tape.data(x)) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn single_expert_reduction_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut init = Init::new(5);
        let e = ExpertP::new("m.moe.expert0", 4, 16, 4, &mut init);
        let gate = GateP::new("m.moe.gate", 1, 4);

        let mut tape = Tape::new();
        let x = random_tokens(&mut tape, &mut rng, 9, 4);
        let direct = expert_forward(&mut tape, x, &e, GeluKind::Tanh).unwrap();
        let experts = vec![e];
        let mixed = moe_forward(&mut tape, x, Some(&gate), &experts, &opts(1, 9)).unwrap();
        let a: Vec<u32> = tape.data(direct).iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = tape.data(mixed).iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn identical_experts_collapse_the_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut init = Init::new(7);
        let e0 = ExpertP::new("m.moe.expert0", 4, 8, 4, &mut init);
        let mut e1 = ExpertP::new("m.moe.expert1", 4, 8, 4, &mut init);
        for (dst, src) in [
            (&mut e1.w_h, &e0.w_h),
            (&mut e1.b_h, &e0.b_h),
            (&mut e1.w_o, &e0.w_o),
            (&mut e1.b_o, &e0.b_o),
        ] {
            dst.tensor.data = src.tensor.data.clone();
        }
        let mut gate = GateP::new("m.moe.gate", 2, 4);
        gate.w.tensor.data = Init::new(8).trunc_normal(8).iter().map(|v| v * 30.0).collect();
        gate.b.tensor.data = vec![0.7, -0.3];

        let mut tape = Tape::new();
        let x = random_tokens(&mut tape, &mut rng, 11, 4);
        let direct = expert_forward(&mut tape, x, &e0, GeluKind::Tanh).unwrap();
        let experts = vec![e0, e1];
        let mixed = moe_forward(&mut tape, x, Some(&gate), &experts, &opts(1, 11)).unwrap();
        for (a, b) in tape.data(mixed).iter().zip(tape.data(direct)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn saturated_gate_selects_single_expert() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut init = Init::new(11);
        let experts: Vec<ExpertP> =
            (0..3).map(|i| ExpertP::new(&format!("m.moe.expert{i}"), 5, 10, 5, &mut init)).collect();
        let mut gate = GateP::new("m.moe.gate", 3, 5);
        gate.b.tensor.data = vec![20.0, 0.0, 0.0];

        let mut tape = Tape::new();
        let x = random_tokens(&mut tape, &mut rng, 6, 5);
        let expected = expert_forward(&mut tape, x, &experts[0], GeluKind::Tanh).unwrap();
        let mixed = moe_forward(&mut tape, x, Some(&gate), &experts, &opts(2, 3)).unwrap();
        for (a, b) in tape.data(mixed).iter().zip(tape.data(expected)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn output_stays_in_expert_convex_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut init = Init::new(13);
        let experts: Vec<ExpertP> =
            (0..3).map(|i| ExpertP::new(&format!("m.moe.expert{i}"), 4, 8, 4, &mut init)).collect();
        let mut gate = GateP::new("m.moe.gate", 3, 4);
        gate.w.tensor.data = Init::new(14).trunc_normal(12).iter().map(|v| v * 60.0).collect();

        let mut tape = Tape::new();
        let x = random_tokens(&mut tape, &mut rng, 20, 4);
        let outs: Vec<Vec<f32>> = experts
            .iter()
            .map(|e| tape_data(&mut tape, x, e))
            .collect();
        let mixed = moe_forward(&mut tape, x, Some(&gate), &experts, &opts(4, 5)).unwrap();
        for (i, &v) in tape.data(mixed).iter().enumerate() {
            let lo = outs.iter().map(|o| o[i]).fold(f32::INFINITY, f32::min);
            let hi = outs.iter().map(|o| o[i]).fold(f32::NEG_INFINITY, f32::max);
            assert!(v >= lo - 1e-5 && v <= hi + 1e-5, "element {i}: {v} outside [{lo}, {hi}]");
        }
    }

    fn tape_data(tape: &mut Tape, x: TensorId, e: &ExpertP) -> Vec<f32> {
        let id = expert_forward(tape, x, e, GeluKind::Tanh).unwrap();
        tape.data(id).to_vec()
    }

    #[test]
    fn permuting_experts_with_gate_rows_is_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut init = Init::new(16);
        let experts: Vec<ExpertP> =
            (0..3).map(|i| ExpertP::new(&format!("m.moe.expert{i}"), 4, 8, 4, &mut init)).collect();
        let mut gate = GateP::new("m.moe.gate", 3, 4);
        gate.w.tensor.data = Init::new(17).trunc_normal(12).iter().map(|v| v * 40.0).collect();
        gate.b.tensor.data = vec![0.2, -0.5, 0.9];

        let mut tape = Tape::new();
        let x = random_tokens(&mut tape, &mut rng, 8, 4);
        let base = moe_forward(&mut tape, x, Some(&gate), &experts, &opts(2, 4)).unwrap();

        // apply permutation [2, 0, 1] to experts and gating rows together
        let perm = [2usize, 0, 1];
        let permuted: Vec<ExpertP> = perm
            .iter()
            .map(|&i| {
                let src = &experts[i];
                let mut init = Init::new(0);
                let mut e = ExpertP::new("p", 4, 8, 4, &mut init);
                e.w_h.tensor.data = src.w_h.tensor.data.clone();
                e.b_h.tensor.data = src.b_h.tensor.data.clone();
                e.w_o.tensor.data = src.w_o.tensor.data.clone();
                e.b_o.tensor.data = src.b_o.tensor.data.clone();
                e
            })
            .collect();
        let mut pgate = GateP::new("pg", 3, 4);
        for (row, &i) in perm.iter().enumerate() {
            pgate.w.tensor.data[row * 4..(row + 1) * 4]
                .copy_from_slice(&gate.w.tensor.data[i * 4..(i + 1) * 4]);
            pgate.b.tensor.data[row] = gate.b.tensor.data[i];
        }
        let permuted_out = moe_forward(&mut tape, x, Some(&pgate), &permuted, &opts(2, 4)).unwrap();
        for (a, b) in tape.data(base).iter().zip(tape.data(permuted_out)) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn every_expert_receives_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut init = Init::new(19);
        let mut experts: Vec<ExpertP> =
            (0..3).map(|i| ExpertP::new(&format!("m.moe.expert{i}"), 4, 8, 4, &mut init)).collect();
        let mut gate = GateP::new("m.moe.gate", 3, 4);
        gate.w.tensor.data = Init::new(20).trunc_normal(12).iter().map(|v| v * 25.0).collect();

        let mut tape = Tape::new();
        let x = random_tokens(&mut tape, &mut rng, 10, 4);
        let y = moe_forward(&mut tape, x, Some(&gate), &experts, &opts(2, 5)).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.mean_all(sq);
        tape.backward(loss).unwrap();
        tape.write_grads(&mut experts);
        for (i, e) in experts.iter().enumerate() {
            let norm: f32 = e.w_h.tensor.grad.as_ref().unwrap().iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "expert {i} got zero gradient");
        }
    }

    #[test]
    fn per_site_added_matches_hand_count() {
        assert_eq!(added_params_per_site(24, 96, 24, true), 4753);
        assert_eq!(added_params_per_site(24, 96, 24, false), 4728);
    }

    #[test]
    fn count_added_params_contract() {
        let cfg = ExperimentConfig::toy();
        let before = cfg.model_config();
        let mut after = before.clone();
        assert_eq!(count_added_params(&before, &after).unwrap(), 0);
        after.num_experts += 1;
        // toy both-placement sites: 24,24,48,48,24,24
        let expect: i64 = [24usize, 24, 48, 48, 24, 24]
            .iter()
            .map(|&c| added_params_per_site(c, 4 * c, c, true) as i64)
            .sum();
        assert_eq!(count_added_params(&before, &after).unwrap(), expect);

        // doubling depths doubles the delta
        let mut deep_before = before.clone();
        deep_before.backbone.depths = vec![4, 4];
        deep_before.backbone.num_heads = vec![2, 4];
        let mut deep_after = deep_before.clone();
        deep_after.num_experts += 1;
        assert_eq!(count_added_params(&deep_before, &deep_after).unwrap(), 2 * expect);

        // any other difference is rejected
        let mut bad = after.clone();
        bad.hidden_ratio = 2;
        assert!(count_added_params(&before, &bad).is_err());
    }
}
