//! The Wengert tape: forward ops record nodes, `backward` replays in reverse.
//!
//! Shapes are flat and row-major. Most ops treat a tensor as `[rows, cols]`
//! where `cols` is the size of the last axis; arbitrary rearrangements
//! (windowing, rolls, head splits, pixel shuffles, channel selection) are all
//! expressed through `gather`, whose backward is a scatter-add.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::param::{Module, Parameter};
use crate::{Error, Result, Tensor};

/// Index of a value recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    /// out = scale * x + shift, element-wise.
    Affine { x: TensorId, scale: f32, shift: f32 },
    /// Element-wise product with a non-differentiable constant.
    MulConst { x: TensorId, k: Arc<Vec<f32>> },
    /// out[i] = x[i] + k[i % k.len()]; the constant carries no gradient.
    AddCycledConst { x: TensorId, k: Arc<Vec<f32>> },
    /// [rows, cols] + [cols] broadcast over rows.
    AddBias { x: TensorId, bias: TensorId, cols: usize },
    /// out[r, c] = x[r, c] * s[r].
    ScaleRows { x: TensorId, s: TensorId, cols: usize },
    /// C[m, n] = A[m, k] * B[k, n]; `trans_b` means B is stored [n, k].
    Matmul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize, trans_b: bool },
    /// Grouped matmul over G independent [m, k] x [k, n] products.
    Bmm { a: TensorId, b: TensorId, g: usize, m: usize, k: usize, n: usize, trans_b: bool },
    /// out[i] = x[idx[i]].
    Gather { x: TensorId, idx: Arc<Vec<u32>> },
    /// Row-wise concatenation along the last axis.
    ConcatLast { a: TensorId, b: TensorId, ca: usize, cb: usize },
    SumAll { x: TensorId },
    MeanAll { x: TensorId },
    /// Column sums of an [rows, cols] tensor.
    SumAxis0 { x: TensorId, rows: usize, cols: usize },
    /// Mean over the middle axis of [b, l, c].
    MeanAxis1 { x: TensorId, b: usize, l: usize, c: usize },
    SoftmaxLast { x: TensorId, cols: usize },
    LogSoftmaxLast { x: TensorId, cols: usize },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, cols: usize, eps: f32 },
    Gelu { x: TensorId, exact: bool },
    Log { x: TensorId },
    Reshape { x: TensorId },
}

struct Node {
    data: Vec<f32>,
    shape: Vec<usize>,
    needs_grad: bool,
    op: Op,
}

/// A single forward pass worth of computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    leases: HashMap<String, TensorId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, data: Vec<f32>, shape: Vec<usize>, needs_grad: bool, op: Op) -> TensorId {
        if cfg!(debug_assertions) {
            if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
                panic!("non-finite value {bad} produced by {op:?}");
            }
        }
        self.nodes.push(Node { data, shape, needs_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn len(&self, id: TensorId) -> usize {
        self.nodes[id.0].data.len()
    }

    /// Gradient of the last `backward` call w.r.t. node `id`, if any reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    // ── leaves ──────────────────────────────────────────────────────

    /// Records an input that does not require gradients.
    pub fn constant(&mut self, data: Vec<f32>, shape: Vec<usize>) -> Result<TensorId> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DataLength { expected, got: data.len() });
        }
        Ok(self.push(data, shape, false, Op::Leaf))
    }

    pub fn scalar_const(&mut self, v: f32) -> TensorId {
        self.push(vec![v], vec![1], false, Op::Leaf)
    }

    /// Records a differentiable leaf from a plain tensor.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(t.data.clone(), t.shape.clone(), t.requires_grad, Op::Leaf)
    }

    /// Leases a named parameter onto the tape. Repeated leases of the same
    /// name return the same node so fan-out gradients accumulate.
    pub fn param(&mut self, p: &Parameter) -> TensorId {
        if let Some(&id) = self.leases.get(&p.name) {
            return id;
        }
        let id = self.push(p.tensor.data.clone(), p.tensor.shape.clone(), true, Op::Leaf);
        self.leases.insert(p.name.clone(), id);
        id
    }

    // ── element-wise and broadcast ops ──────────────────────────────

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x + y);
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, ng, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x - y);
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, ng, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x * y);
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, ng, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("div", a, b)?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x / y);
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, ng, Op::Div(a, b)))
    }

    pub fn affine(&mut self, x: TensorId, scale: f32, shift: f32) -> TensorId {
        let data = self.nodes[x.0].data.iter().map(|v| scale * v + shift).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(data, shape, ng, Op::Affine { x, scale, shift })
    }

    pub fn mul_const(&mut self, x: TensorId, k: Arc<Vec<f32>>) -> Result<TensorId> {
        if k.len() != self.nodes[x.0].data.len() {
            return Err(Error::DataLength { expected: self.nodes[x.0].data.len(), got: k.len() });
        }
        let data = zip_map(&self.nodes[x.0].data, &k, |a, b| a * b);
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        Ok(self.push(data, shape, ng, Op::MulConst { x, k }))
    }

    pub fn add_cycled_const(&mut self, x: TensorId, k: Arc<Vec<f32>>) -> Result<TensorId> {
        let n = self.nodes[x.0].data.len();
        if k.is_empty() || n % k.len() != 0 {
            return Err(Error::DataLength { expected: n, got: k.len() });
        }
        let kl = k.len();
        let data = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + k[i % kl])
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        Ok(self.push(data, shape, ng, Op::AddCycledConst { x, k }))
    }

    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let cols = self.nodes[bias.0].data.len();
        let n = self.nodes[x.0].data.len();
        if cols == 0 || n % cols != 0 {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let b = &self.nodes[bias.0].data;
        let data = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % cols])
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(data, shape, ng, Op::AddBias { x, bias, cols }))
    }

    pub fn scale_rows(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        let rows = self.nodes[s.0].data.len();
        let n = self.nodes[x.0].data.len();
        if rows == 0 || n % rows != 0 {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[s.0].shape.clone(),
            });
        }
        let cols = n / rows;
        let sv = &self.nodes[s.0].data;
        let mut data = self.nodes[x.0].data.clone();
        for (r, chunk) in data.chunks_mut(cols).enumerate() {
            let f = sv[r];
            for v in chunk {
                *v *= f;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(data, shape, ng, Op::ScaleRows { x, s, cols }))
    }

    // ── matrix products ─────────────────────────────────────────────

    /// `a` is `[m, k]`, `b` is `[k, n]` (or `[n, k]` when `trans_b`).
    pub fn matmul_t(&mut self, a: TensorId, b: TensorId, trans_b: bool) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let mismatch = || Error::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(mismatch());
        }
        let data = mm(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, false, trans_b);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, vec![m, n], ng, Op::Matmul { a, b, m, k, n, trans_b }))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.matmul_t(a, b, false)
    }

    /// Affine map `x[t, in] * w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: Option<TensorId>) -> Result<TensorId> {
        let y = self.matmul_t(x, w, true)?;
        match b {
            Some(bias) => self.add_bias(y, bias),
            None => Ok(y),
        }
    }

    /// Grouped product: `a` is `[g, m, k]`, `b` is `[g, k, n]` (`[g, n, k]` if `trans_b`).
    pub fn bmm(&mut self, a: TensorId, b: TensorId, trans_b: bool) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let mismatch = || Error::ShapeMismatch { op: "bmm", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch());
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(mismatch());
        }
        let av = &self.nodes[a.0].data;
        let bv = &self.nodes[b.0].data;
        let mut data = vec![0.0f32; g * m * n];
        data.par_chunks_mut(m * n).enumerate().for_each(|(gi, out)| {
            let ab = &av[gi * m * k..(gi + 1) * m * k];
            let bb = &bv[gi * k * n..(gi + 1) * k * n];
            mm_into(ab, bb, m, k, n, false, trans_b, out);
        });
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, vec![g, m, n], ng, Op::Bmm { a, b, g, m, k, n, trans_b }))
    }

    // ── rearrangements ──────────────────────────────────────────────

    /// out[i] = x[idx[i]]. Covers windowing, rolls, transposes, selections.
    pub fn gather(&mut self, x: TensorId, idx: Arc<Vec<u32>>, out_shape: Vec<usize>) -> Result<TensorId> {
        let expected: usize = out_shape.iter().product();
        if expected != idx.len() {
            return Err(Error::DataLength { expected, got: idx.len() });
        }
        let src = &self.nodes[x.0].data;
        debug_assert!(idx.iter().all(|&i| (i as usize) < src.len()), "gather index out of range");
        let data = idx.iter().map(|&i| src[i as usize]).collect();
        let ng = self.needs(x);
        Ok(self.push(data, out_shape, ng, Op::Gather { x, idx }))
    }

    pub fn concat_last(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let mismatch = || Error::ShapeMismatch { op: "concat_last", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(mismatch());
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = self.nodes[a.0].data.len() / ca;
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&self.nodes[a.0].data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&self.nodes[b.0].data[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, ng, Op::ConcatLast { a, b, ca, cb }))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let expected: usize = shape.iter().product();
        if expected != self.nodes[x.0].data.len() {
            return Err(Error::DataLength { expected, got: self.nodes[x.0].data.len() });
        }
        let data = self.nodes[x.0].data.clone();
        let ng = self.needs(x);
        Ok(self.push(data, shape, ng, Op::Reshape { x }))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.nodes[x.0].data.iter().map(|&v| v as f64).sum();
        let ng = self.needs(x);
        self.push(vec![s as f32], vec![1], ng, Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x.0].data.len();
        let s: f64 = self.nodes[x.0].data.iter().map(|&v| v as f64).sum();
        let ng = self.needs(x);
        self.push(vec![(s / n as f64) as f32], vec![1], ng, Op::MeanAll { x })
    }

    pub fn sum_axis0(&mut self, x: TensorId, rows: usize, cols: usize) -> Result<TensorId> {
        if rows * cols != self.nodes[x.0].data.len() {
            return Err(Error::DataLength { expected: rows * cols, got: self.nodes[x.0].data.len() });
        }
        let mut acc = vec![0.0f64; cols];
        for row in self.nodes[x.0].data.chunks(cols) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += *v as f64;
            }
        }
        let data = acc.iter().map(|&v| v as f32).collect();
        let ng = self.needs(x);
        Ok(self.push(data, vec![cols], ng, Op::SumAxis0 { x, rows, cols }))
    }

    /// Token mean per sample: `[b, l, c] -> [b, c]`.
    pub fn mean_axis1(&mut self, x: TensorId, b: usize, l: usize, c: usize) -> Result<TensorId> {
        if b * l * c != self.nodes[x.0].data.len() {
            return Err(Error::DataLength { expected: b * l * c, got: self.nodes[x.0].data.len() });
        }
        let mut out = vec![0.0f32; b * c];
        for bi in 0..b {
            let mut acc = vec![0.0f64; c];
            for li in 0..l {
                let base = (bi * l + li) * c;
                for ci in 0..c {
                    acc[ci] += self.nodes[x.0].data[base + ci] as f64;
                }
            }
            for ci in 0..c {
                out[bi * c + ci] = (acc[ci] / l as f64) as f32;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, vec![b, c], ng, Op::MeanAxis1 { x, b, l, c }))
    }

    // ── nonlinearities ──────────────────────────────────────────────

    fn last_axis(&self, op: &'static str, x: TensorId) -> Result<usize> {
        let shape = &self.nodes[x.0].shape;
        let cols = *shape.last().ok_or_else(|| Error::BadShape {
            op,
            shape: shape.clone(),
            expected: "at least one axis".into(),
        })?;
        if cols == 0 {
            return Err(Error::BadShape { op, shape: shape.clone(), expected: "nonzero last axis".into() });
        }
        Ok(cols)
    }

    /// Max-subtracted softmax over the last axis; denominators accumulate in f64.
    pub fn softmax_last(&mut self, x: TensorId) -> Result<TensorId> {
        let cols = self.last_axis("softmax", x)?;
        let mut data = self.nodes[x.0].data.clone();
        for row in data.chunks_mut(cols) {
            softmax_row(row);
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        Ok(self.push(data, shape, ng, Op::SoftmaxLast { x, cols }))
    }

    pub fn log_softmax_last(&mut self, x: TensorId) -> Result<TensorId> {
        let cols = self.last_axis("log_softmax", x)?;
        let mut data = self.nodes[x.0].data.clone();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let denom: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
            let log_denom = denom.ln() as f32;
            for v in row.iter_mut() {
                *v = *v - max - log_denom;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        Ok(self.push(data, shape, ng, Op::LogSoftmaxLast { x, cols }))
    }

    /// Normalizes the last axis to zero mean / unit variance, then applies
    /// the learned affine. Statistics accumulate in f64.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f32) -> Result<TensorId> {
        let cols = self.last_axis("layer_norm", x)?;
        if self.nodes[gamma.0].data.len() != cols || self.nodes[beta.0].data.len() != cols {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let mut data = self.nodes[x.0].data.clone();
        for row in data.chunks_mut(cols) {
            let (mean, inv_std) = row_stats(row, eps);
            for (i, v) in row.iter_mut().enumerate() {
                let xhat = ((*v as f64 - mean) * inv_std) as f32;
                *v = xhat * g[i] + b[i];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(data, shape, ng, Op::LayerNorm { x, gamma, beta, cols, eps }))
    }

    pub fn gelu(&mut self, x: TensorId, exact: bool) -> TensorId {
        let data = self.nodes[x.0].data.iter().map(|&v| gelu_fwd(v, exact)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(data, shape, ng, Op::Gelu { x, exact })
    }

    pub fn log(&mut self, x: TensorId) -> TensorId {
        let data = self.nodes[x.0].data.iter().map(|v| v.ln()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(data, shape, ng, Op::Log { x })
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of every reachable leaf
    /// are kept on the tape; use [`Tape::grad`] or [`Tape::write_grads`].
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss { shape: self.nodes[loss.0].shape.clone() });
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.step_backward(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn step_backward(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let mut acc = |id: TensorId, contrib: Vec<f32>| {
            if !nodes[id.0].needs_grad {
                return;
            }
            debug_assert_eq!(contrib.len(), nodes[id.0].data.len());
            match &mut grads[id.0] {
                Some(buf) => {
                    for (d, s) in buf.iter_mut().zip(&contrib) {
                        *d += s;
                    }
                }
                slot => *slot = Some(contrib),
            }
        };

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                acc(*a, zip_map(g, &nodes[b.0].data, |gv, bv| gv * bv));
                acc(*b, zip_map(g, &nodes[a.0].data, |gv, av| gv * av));
            }
            Op::Div(a, b) => {
                let bd = &nodes[b.0].data;
                let ad = &nodes[a.0].data;
                acc(*a, zip_map(g, bd, |gv, bv| gv / bv));
                let db = g
                    .iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(gv, (av, bv))| -gv * av / (bv * bv))
                    .collect();
                acc(*b, db);
            }
            Op::Affine { x, scale, .. } => {
                let s = *scale;
                acc(*x, g.iter().map(|v| v * s).collect());
            }
            Op::MulConst { x, k } => {
                acc(*x, zip_map(g, k, |gv, kv| gv * kv));
            }
            Op::AddCycledConst { x, .. } => {
                acc(*x, g.to_vec());
            }
            Op::AddBias { x, bias, cols } => {
                acc(*x, g.to_vec());
                if nodes[bias.0].needs_grad {
                    let mut db = vec![0.0f64; *cols];
                    for (idx, gv) in g.iter().enumerate() {
                        db[idx % cols] += *gv as f64;
                    }
                    acc(*bias, db.iter().map(|&v| v as f32).collect());
                }
            }
            Op::ScaleRows { x, s, cols } => {
                let sv = &nodes[s.0].data;
                let xv = &nodes[x.0].data;
                let mut dx = g.to_vec();
                for (r, chunk) in dx.chunks_mut(*cols).enumerate() {
                    for v in chunk {
                        *v *= sv[r];
                    }
                }
                acc(*x, dx);
                if nodes[s.0].needs_grad {
                    let mut ds = vec![0.0f32; sv.len()];
                    for (r, dsr) in ds.iter_mut().enumerate() {
                        let mut a = 0.0f64;
                        for c in 0..*cols {
                            a += g[r * cols + c] as f64 * xv[r * cols + c] as f64;
                        }
                        *dsr = a as f32;
                    }
                    acc(*s, ds);
                }
            }
            Op::Matmul { a, b, m, k, n, trans_b } => {
                let (m, k, n) = (*m, *k, *n);
                let av = &nodes[a.0].data;
                let bv = &nodes[b.0].data;
                if nodes[a.0].needs_grad {
                    // dA[m,k] = dC[m,n] * B'[n,k]
                    let da = mm(g, bv, m, n, k, false, !trans_b);
                    acc(*a, da);
                }
                if nodes[b.0].needs_grad {
                    let db = if *trans_b {
                        // B stored [n,k]: dB = dC^T[n,m] * A[m,k]
                        mm(g, av, n, m, k, true, false)
                    } else {
                        // dB[k,n] = A^T[k,m] * dC[m,n]
                        mm(av, g, k, m, n, true, false)
                    };
                    acc(*b, db);
                }
            }
            Op::Bmm { a, b, g: groups, m, k, n, trans_b } => {
                let (gr, m, k, n) = (*groups, *m, *k, *n);
                let av = &nodes[a.0].data;
                let bv = &nodes[b.0].data;
                if nodes[a.0].needs_grad {
                    let mut da = vec![0.0f32; gr * m * k];
                    da.par_chunks_mut(m * k).enumerate().for_each(|(gi, out)| {
                        let gb = &g[gi * m * n..(gi + 1) * m * n];
                        let bb = &bv[gi * bstride(k, n)..(gi + 1) * bstride(k, n)];
                        mm_into(gb, bb, m, n, k, false, !trans_b, out);
                    });
                    acc(*a, da);
                }
                if nodes[b.0].needs_grad {
                    let mut db = vec![0.0f32; gr * k * n];
                    db.par_chunks_mut(k * n).enumerate().for_each(|(gi, out)| {
                        let gb = &g[gi * m * n..(gi + 1) * m * n];
                        let ab = &av[gi * m * k..(gi + 1) * m * k];
                        if *trans_b {
                            mm_into(gb, ab, n, m, k, true, false, out);
                        } else {
                            mm_into(ab, gb, k, m, n, true, false, out);
                        }
                    });
                    acc(*b, db);
                }
            }
            Op::Gather { x, idx } => {
                let mut dx = vec![0.0f32; nodes[x.0].data.len()];
                for (out_i, &src_i) in idx.iter().enumerate() {
                    dx[src_i as usize] += g[out_i];
                }
                acc(*x, dx);
            }
            Op::ConcatLast { a, b, ca, cb } => {
                let rows = g.len() / (ca + cb);
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let base = r * (ca + cb);
                    da.extend_from_slice(&g[base..base + ca]);
                    db.extend_from_slice(&g[base + ca..base + ca + cb]);
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::SumAll { x } => {
                acc(*x, vec![g[0]; nodes[x.0].data.len()]);
            }
            Op::MeanAll { x } => {
                let n = nodes[x.0].data.len();
                acc(*x, vec![g[0] / n as f32; n]);
            }
            Op::SumAxis0 { x, rows, cols } => {
                let mut dx = Vec::with_capacity(rows * cols);
                for _ in 0..*rows {
                    dx.extend_from_slice(g);
                }
                acc(*x, dx);
            }
            Op::MeanAxis1 { x, b, l, c } => {
                let mut dx = vec![0.0f32; b * l * c];
                for bi in 0..*b {
                    for li in 0..*l {
                        let base = (bi * l + li) * c;
                        for ci in 0..*c {
                            dx[base + ci] = g[bi * c + ci] / *l as f32;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::SoftmaxLast { x, cols } => {
                let y = &nodes[i].data;
                let mut dx = vec![0.0f32; y.len()];
                for (row, (yr, gr)) in y.chunks(*cols).zip(g.chunks(*cols)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv as f64 * gv as f64).sum();
                    let base = row * cols;
                    for c in 0..*cols {
                        dx[base + c] = yr[c] * (gr[c] - dot as f32);
                    }
                }
                acc(*x, dx);
            }
            Op::LogSoftmaxLast { x, cols } => {
                let y = &nodes[i].data;
                let mut dx = vec![0.0f32; y.len()];
                for (row, (yr, gr)) in y.chunks(*cols).zip(g.chunks(*cols)).enumerate() {
                    let gsum: f64 = gr.iter().map(|&v| v as f64).sum();
                    let base = row * cols;
                    for c in 0..*cols {
                        dx[base + c] = gr[c] - (yr[c].exp() * gsum as f32);
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm { x, gamma, beta, cols, eps } => {
                let xv = &nodes[x.0].data;
                let gv = &nodes[gamma.0].data;
                let cols = *cols;
                let rows = xv.len() / cols;
                let mut dx = vec![0.0f32; xv.len()];
                let mut dgamma = vec![0.0f64; cols];
                let mut dbeta = vec![0.0f64; cols];
                for r in 0..rows {
                    let row = &xv[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let (mean, inv_std) = row_stats(row, *eps);
                    let mut sum_gdy = 0.0f64;
                    let mut sum_gdy_xhat = 0.0f64;
                    let mut xhat = vec![0.0f64; cols];
                    for c in 0..cols {
                        xhat[c] = (row[c] as f64 - mean) * inv_std;
                        let gdy = gv[c] as f64 * grow[c] as f64;
                        sum_gdy += gdy;
                        sum_gdy_xhat += gdy * xhat[c];
                        dgamma[c] += grow[c] as f64 * xhat[c];
                        dbeta[c] += grow[c] as f64;
                    }
                    let inv_cols = 1.0 / cols as f64;
                    for c in 0..cols {
                        let gdy = gv[c] as f64 * grow[c] as f64;
                        dx[r * cols + c] =
                            (inv_std * (gdy - sum_gdy * inv_cols - xhat[c] * sum_gdy_xhat * inv_cols)) as f32;
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma.iter().map(|&v| v as f32).collect());
                acc(*beta, dbeta.iter().map(|&v| v as f32).collect());
            }
            Op::Gelu { x, exact } => {
                let dx = nodes[x.0]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| gv * gelu_bwd(xv, *exact))
                    .collect();
                acc(*x, dx);
            }
            Op::Log { x } => {
                acc(*x, zip_map(g, &nodes[x.0].data, |gv, xv| gv / xv));
            }
            Op::Reshape { x } => {
                acc(*x, g.to_vec());
            }
        }
    }

    /// Accumulates leased-parameter gradients into the module's tensors.
    pub fn write_grads(&self, module: &mut dyn Module) {
        module.visit_params_mut(&mut |p: &mut Parameter| {
            if let Some(&id) = self.leases.get(&p.name) {
                if let Some(g) = self.grad(id) {
                    p.tensor.accumulate_grad(g);
                }
            }
        });
    }
}

// stride of one group of B in a bmm, independent of trans_b
fn bstride(k: usize, n: usize) -> usize {
    k * n
}

fn zip_map(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn softmax_row(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut denom = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        denom += *v as f64;
    }
    let inv = (1.0 / denom) as f32;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

fn row_stats(row: &[f32], eps: f32) -> (f64, f64) {
    let n = row.len() as f64;
    let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var: f64 = row.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps as f64).sqrt())
}

const GELU_COEF: f64 = 0.044715;

fn gelu_fwd(x: f32, exact: bool) -> f32 {
    let xf = x as f64;
    if exact {
        (xf * 0.5 * (1.0 + erf(xf / std::f64::consts::SQRT_2))) as f32
    } else {
        let k = (2.0 / std::f64::consts::PI).sqrt();
        let inner = k * (xf + GELU_COEF * xf * xf * xf);
        (0.5 * xf * (1.0 + inner.tanh())) as f32
    }
}

fn gelu_bwd(x: f32, exact: bool) -> f32 {
    let xf = x as f64;
    if exact {
        let phi = 0.5 * (1.0 + erf(xf / std::f64::consts::SQRT_2));
        let pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
        (phi + xf * pdf) as f32
    } else {
        let k = (2.0 / std::f64::consts::PI).sqrt();
        let inner = k * (xf + GELU_COEF * xf * xf * xf);
        let t = inner.tanh();
        let d_inner = k * (1.0 + 3.0 * GELU_COEF * xf * xf);
        (0.5 * (1.0 + t) + 0.5 * xf * (1.0 - t * t) * d_inner) as f32
    }
}

/// Abramowitz-Stegun 7.1.26 rational approximation, |error| < 1.5e-7.
/// Plenty below f32 resolution, which is all the exact-GELU path needs.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

/// `out[m, n] = A[m, k] * B[k, n]` with optional transposed storage.
/// Inner products accumulate in f64; each output element is produced by
/// exactly one task, so results do not depend on thread count.
fn mm_into(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, ta: bool, tb: bool, out: &mut [f32]) {
    debug_assert_eq!(out.len(), m * n);
    match (ta, tb) {
        (false, false) => {
            for (i, orow) in out.chunks_mut(n).enumerate() {
                let mut acc = vec![0.0f64; n];
                let arow = &a[i * k..(i + 1) * k];
                for (p, &aip) in arow.iter().enumerate() {
                    let brow = &b[p * n..(p + 1) * n];
                    let aip = aip as f64;
                    for (av, &bv) in acc.iter_mut().zip(brow) {
                        *av += aip * bv as f64;
                    }
                }
                for (o, &v) in orow.iter_mut().zip(&acc) {
                    *o = v as f32;
                }
            }
        }
        (false, true) => {
            // B stored [n, k]: contiguous dot products.
            for (i, orow) in out.chunks_mut(n).enumerate() {
                let arow = &a[i * k..(i + 1) * k];
                for (j, o) in orow.iter_mut().enumerate() {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = 0.0f64;
                    for (&av, &bv) in arow.iter().zip(brow) {
                        acc += av as f64 * bv as f64;
                    }
                    *o = acc as f32;
                }
            }
        }
        (true, false) => {
            // A stored [k, m].
            for (i, orow) in out.chunks_mut(n).enumerate() {
                let mut acc = vec![0.0f64; n];
                for p in 0..k {
                    let aip = a[p * m + i] as f64;
                    let brow = &b[p * n..(p + 1) * n];
                    for (av, &bv) in acc.iter_mut().zip(brow) {
                        *av += aip * bv as f64;
                    }
                }
                for (o, &v) in orow.iter_mut().zip(&acc) {
                    *o = v as f32;
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0f64;
                    for p in 0..k {
                        acc += a[p * m + i] as f64 * b[j * k + p] as f64;
                    }
                    out[i * n + j] = acc as f32;
                }
            }
        }
    }
}

fn mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    if m >= 64 && !ta {
        // Row-partitioned: deterministic under any thread count.
        let rows_per = 16.max(m / (4 * rayon::current_num_threads().max(1)));
        out.par_chunks_mut(rows_per * n).enumerate().for_each(|(chunk_i, ochunk)| {
            let r0 = chunk_i * rows_per;
            let rows = ochunk.len() / n;
            mm_into(&a[r0 * k..(r0 + rows) * k], b, rows, k, n, false, tb, ochunk);
        });
    } else {
        mm_into(a, b, m, k, n, ta, tb, &mut out);
    }
    out
}
