//! Window-based multi-head self-attention and its shifted-window variant.
//!
//! Tokens live in `[B*H*W, C]` layout. Windowing, cyclic shifts, and head
//! splits are bijective index maps executed as tape gathers, so their
//! backward passes are exact scatters. The shifted variant rolls the grid by
//! `window/2`, masks attention across the wrap-around seam, and rolls back.

use std::sync::Arc;

use autograd::{Module, Parameter, Tape, TensorId};

use crate::nn::{Init, LinearP};
use crate::Result;

/// Map for `[B, H, W, C] -> [B*nW, win*win, C]`, optionally composing a
/// cyclic roll by `shift` (rolled position picks from `orig + shift mod H`).
fn partition_map(b: usize, h: usize, w: usize, c: usize, win: usize, shift: usize) -> Arc<Vec<u32>> {
    let (wh, ww) = (h / win, w / win);
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for wi in 0..wh * ww {
            let (wr, wc) = (wi / ww, wi % ww);
            for s in 0..win * win {
                let (di, dj) = (s / win, s % win);
                let row = (wr * win + di + shift) % h;
                let col = (wc * win + dj + shift) % w;
                let base = ((bi * h + row) * w + col) * c;
                for ci in 0..c {
                    idx.push((base + ci) as u32);
                }
            }
        }
    }
    Arc::new(idx)
}

fn invert(map: &[u32]) -> Arc<Vec<u32>> {
    let mut inv = vec![0u32; map.len()];
    for (dst, &src) in map.iter().enumerate() {
        inv[src as usize] = dst as u32;
    }
    Arc::new(inv)
}

/// Rearranges tokens into non-overlapping windows.
pub fn window_partition(
    tape: &mut Tape,
    tokens: TensorId,
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    win: usize,
) -> Result<TensorId> {
    check_divisible(h, w, win)?;
    let map = partition_map(b, h, w, c, win, 0);
    let nw = (h / win) * (w / win);
    Ok(tape.gather(tokens, map, vec![b * nw, win * win, c])?)
}

/// Exact inverse of [`window_partition`].
pub fn window_reverse(
    tape: &mut Tape,
    windows: TensorId,
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    win: usize,
) -> Result<TensorId> {
    check_divisible(h, w, win)?;
    let map = invert(&partition_map(b, h, w, c, win, 0));
    Ok(tape.gather(windows, map, vec![b * h * w, c])?)
}

fn check_divisible(h: usize, w: usize, win: usize) -> Result<()> {
    if win == 0 || h % win != 0 || w % win != 0 {
        return Err(crate::Error::Config(format!(
            "token grid {h}x{w} not divisible by window {win}"
        )));
    }
    Ok(())
}

/// Fused partition + head-split map: `[B*H*W, C] -> [B*nW*heads, S, hd]`.
fn attn_layout_map(
    b: usize,
    h: usize,
    w: usize,
    heads: usize,
    hd: usize,
    win: usize,
    shift: usize,
) -> Arc<Vec<u32>> {
    let c = heads * hd;
    let (wh, ww) = (h / win, w / win);
    let s = win * win;
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for wi in 0..wh * ww {
            let (wr, wc) = (wi / ww, wi % ww);
            for head in 0..heads {
                for si in 0..s {
                    let (di, dj) = (si / win, si % win);
                    let row = (wr * win + di + shift) % h;
                    let col = (wc * win + dj + shift) % w;
                    let base = ((bi * h + row) * w + col) * c + head * hd;
                    for d in 0..hd {
                        idx.push((base + d) as u32);
                    }
                }
            }
        }
    }
    Arc::new(idx)
}

/// Region band of a rolled coordinate: positions past `len - win` mix tokens
/// that were not neighbors before the roll, split at the wrap point.
fn band(i: usize, len: usize, win: usize, shift: usize) -> usize {
    if i < len - win {
        0
    } else if i < len - shift {
        1
    } else {
        2
    }
}

/// Additive attention mask for the shifted pass: 0 within a contiguous
/// region, -1e9 across the wrap seam. Layout `[nW, heads, S, S]`.
fn shifted_mask(h: usize, w: usize, heads: usize, win: usize, shift: usize) -> Arc<Vec<f32>> {
    let (wh, ww) = (h / win, w / win);
    let s = win * win;
    let mut mask = Vec::with_capacity(wh * ww * heads * s * s);
    let mut ids = vec![0usize; s];
    for wr in 0..wh {
        for wc in 0..ww {
            for (si, id) in ids.iter_mut().enumerate() {
                let (di, dj) = (si / win, si % win);
                let rb = band(wr * win + di, h, win, shift);
                let cb = band(wc * win + dj, w, win, shift);
                *id = rb * 3 + cb;
            }
            for _ in 0..heads {
                for a in 0..s {
                    for bidx in 0..s {
                        mask.push(if ids[a] == ids[bidx] { 0.0 } else { -1e9 });
                    }
                }
            }
        }
    }
    Arc::new(mask)
}

/// Q/K/V/output projections of one attention layer.
pub struct AttnP {
    pub q: LinearP,
    pub k: LinearP,
    pub v: LinearP,
    pub o: LinearP,
}

impl AttnP {
    pub fn new(name: &str, dim: usize, init: &mut Init) -> Self {
        AttnP {
            q: LinearP::new(&format!("{name}.q"), dim, dim, true, init),
            k: LinearP::new(&format!("{name}.k"), dim, dim, true, init),
            v: LinearP::new(&format!("{name}.v"), dim, dim, true, init),
            o: LinearP::new(&format!("{name}.o"), dim, dim, true, init),
        }
    }
}

impl Module for AttnP {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.q.visit_params(f);
        self.k.visit_params(f);
        self.v.visit_params(f);
        self.o.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.q.visit_params_mut(f);
        self.k.visit_params_mut(f);
        self.v.visit_params_mut(f);
        self.o.visit_params_mut(f);
    }
}

/// Multi-head scaled dot-product attention within each window. The residual
/// connection is the caller's job. When `shifted`, the grid is cyclically
/// rolled by `window/2` with a seam mask, then rolled back.
#[allow(clippy::too_many_arguments)]
pub fn wmsa(
    tape: &mut Tape,
    tokens: TensorId,
    b: usize,
    h: usize,
    w: usize,
    p: &AttnP,
    heads: usize,
    win: usize,
    shifted: bool,
) -> Result<TensorId> {
    check_divisible(h, w, win)?;
    let c = p.q.out_dim();
    if c % heads != 0 {
        return Err(crate::Error::Config(format!("dim {c} not divisible by {heads} heads")));
    }
    let hd = c / heads;
    let shift = if shifted { win / 2 } else { 0 };
    let (wh, ww) = (h / win, w / win);
    let (nw, s) = (wh * ww, win * win);
    let groups = b * nw * heads;

    let q = p.q.forward(tape, tokens)?;
    let k = p.k.forward(tape, tokens)?;
    let v = p.v.forward(tape, tokens)?;

    let layout = attn_layout_map(b, h, w, heads, hd, win, shift);
    let gshape = vec![groups, s, hd];
    let qg = tape.gather(q, layout.clone(), gshape.clone())?;
    let kg = tape.gather(k, layout.clone(), gshape.clone())?;
    let vg = tape.gather(v, layout.clone(), gshape)?;

    let scores = tape.bmm(qg, kg, true)?;
    let mut scores = tape.affine(scores, 1.0 / (hd as f32).sqrt(), 0.0);
    if shift > 0 {
        let mask = shifted_mask(h, w, heads, win, shift);
        scores = tape.add_cycled_const(scores, mask)?;
    }
    let attn = tape.softmax_last(scores)?;
    let ctx = tape.bmm(attn, vg, false)?;

    let back = invert(&layout);
    let merged = tape.gather(ctx, back, vec![b * h * w, c])?;
    p.o.forward(tape, merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use autograd::Tensor;

    fn token_tensor(b: usize, h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> f32) -> Tensor {
        let mut data = Vec::with_capacity(b * h * w * c);
        for _bi in 0..b {
            for r in 0..h {
                for col in 0..w {
                    for ci in 0..c {
                        data.push(f(r, col, ci));
                    }
                }
            }
        }
        Tensor::new(vec![b * h * w, c], data).unwrap()
    }

    #[test]
    fn partition_counts_windows() {
        let mut tape = Tape::new();
        let t = token_tensor(1, 8, 8, 3, |r, c, ci| (r * 8 + c) as f32 + ci as f32 * 0.1);
        let x = tape.leaf(&t);
        let wins = window_partition(&mut tape, x, 1, 8, 8, 3, 4).unwrap();
        assert_eq!(tape.shape(wins), &[4, 16, 3]);
    }

    #[test]
    fn partition_reverse_roundtrip_bit_exact() {
        let mut tape = Tape::new();
        let t = token_tensor(2, 8, 8, 5, |r, c, ci| ((r * 131 + c * 17 + ci) as f32).sin());
        let x = tape.leaf(&t);
        let wins = window_partition(&mut tape, x, 2, 8, 8, 5, 4).unwrap();
        let back = window_reverse(&mut tape, wins, 2, 8, 8, 5, 4).unwrap();
        let orig: Vec<u32> = tape.data(x).iter().map(|v| v.to_bits()).collect();
        let round: Vec<u32> = tape.data(back).iter().map(|v| v.to_bits()).collect();
        assert_eq!(orig, round);
    }

    #[test]
    fn first_window_holds_top_left_quadrant() {
        let mut tape = Tape::new();
        let t = token_tensor(1, 8, 8, 1, |r, c, _| (r * 100 + c) as f32);
        let x = tape.leaf(&t);
        let wins = window_partition(&mut tape, x, 1, 8, 8, 1, 4).unwrap();
        let first: Vec<f32> = tape.data(wins)[..16].to_vec();
        let mut expect = Vec::new();
        for r in 0..4 {
            for c in 0..4 {
                expect.push((r * 100 + c) as f32);
            }
        }
        assert_eq!(first, expect);
    }

    fn identity_attention(dim: usize, heads: usize) -> AttnP {
        // zero Q/K make all logits equal; V and O pass values through
        let mut init = Init::new(0);
        let mut p = AttnP::new("t.attn", dim, &mut init);
        let zero = vec![0.0; dim * dim];
        let mut eye = vec![0.0; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = 1.0;
        }
        p.q.w.tensor.data = zero.clone();
        p.k.w.tensor.data = zero;
        p.v.w.tensor.data = eye.clone();
        p.o.w.tensor.data = eye;
        let _ = heads;
        p
    }

    #[test]
    fn uniform_attention_averages_window() {
        let (h, w, c) = (4usize, 4usize, 2usize);
        let t = token_tensor(1, h, w, c, |r, col, ci| (r * w + col) as f32 + ci as f32 * 100.0);
        let p = identity_attention(c, 1);
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let y = wmsa(&mut tape, x, 1, h, w, &p, 1, 4, false).unwrap();
        // single window: every output token is the mean over all 16 tokens
        for ci in 0..c {
            let mean: f32 = (0..16).map(|i| t.data[i * c + ci]).sum::<f32>() / 16.0;
            for tok in 0..16 {
                assert!((tape.data(y)[tok * c + ci] - mean).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn unshifted_single_window_is_full_attention() {
        // identical by construction to attention over the whole 4x4 grid
        let (h, w, c) = (4usize, 4usize, 4usize);
        let t = token_tensor(1, h, w, c, |r, col, ci| ((r * 31 + col * 7 + ci) as f32 * 0.3).sin());
        let mut init = Init::new(3);
        let p = AttnP::new("t.attn", c, &mut init);
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let windowed = wmsa(&mut tape, x, 1, h, w, &p, 2, 4, false).unwrap();

        // reference: same computation, no windowing (window == grid)
        let q = p.q.forward(&mut tape, x).unwrap();
        let k = p.k.forward(&mut tape, x).unwrap();
        let v = p.v.forward(&mut tape, x).unwrap();
        let hd = c / 2;
        let map = attn_layout_map(1, h, w, 2, hd, 4, 0);
        let qg = tape.gather(q, map.clone(), vec![2, 16, hd]).unwrap();
        let kg = tape.gather(k, map.clone(), vec![2, 16, hd]).unwrap();
        let vg = tape.gather(v, map.clone(), vec![2, 16, hd]).unwrap();
        let sc = tape.bmm(qg, kg, true).unwrap();
        let sc = tape.affine(sc, 1.0 / (hd as f32).sqrt(), 0.0);
        let at = tape.softmax_last(sc).unwrap();
        let ctx = tape.bmm(at, vg, false).unwrap();
        let merged = tape.gather(ctx, invert(&map), vec![16, c]).unwrap();
        let reference = p.o.forward(&mut tape, merged).unwrap();

        let a: Vec<u32> = tape.data(windowed).iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = tape.data(reference).iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    /// Enumerates the rolled index map to find, per rolled position, which
    /// original tokens share its contiguous region, then checks the shifted
    /// forward equals a per-token mean over exactly that set.
    #[test]
    fn shifted_mask_blocks_wrapped_regions() {
        let (h, w, c, win, shift) = (8usize, 8usize, 1usize, 4usize, 2usize);
        let t = token_tensor(1, h, w, c, |r, col, _| ((r * w + col) as f32 * 0.37).cos() * 3.0);
        let p = identity_attention(c, 1);
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let y = wmsa(&mut tape, x, 1, h, w, &p, 1, win, true).unwrap();

        // oracle allowed-set from the rolled map
        let rolled_band = |i: usize, len: usize| band(i, len, win, shift);
        for rr in 0..h {
            for rc in 0..w {
                let (or, oc) = ((rr + shift) % h, (rc + shift) % w);
                let my_id = (rolled_band(rr, h) * 3 + rolled_band(rc, w), rr / win, rc / win);
                let mut sum = 0.0f64;
                let mut n = 0usize;
                for r2 in 0..h {
                    for c2 in 0..w {
                        let other = (rolled_band(r2, h) * 3 + rolled_band(c2, w), r2 / win, c2 / win);
                        if other == my_id {
                            let (o2r, o2c) = ((r2 + shift) % h, (c2 + shift) % w);
                            sum += t.data[o2r * w + o2c] as f64;
                            n += 1;
                        }
                    }
                }
                let expect = (sum / n as f64) as f32;
                let got = tape.data(y)[or * w + oc];
                assert!(
                    (got - expect).abs() < 1e-4,
                    "rolled ({rr},{rc}): got {got}, expect {expect}"
                );
            }
        }

        // independence: perturbing a cross-seam token leaves a wrapped-region
        // token's output unchanged. Rolled (7,7) is wrap band; rolled (4,4)
        // sits in the middle band of the same window.
        let mut t2 = t.clone();
        let (pr, pc) = ((4 + shift) % h, (4 + shift) % w);
        t2.data[pr * w + pc] += 100.0;
        let mut tape2 = Tape::new();
        let x2 = tape2.leaf(&t2);
        let y2 = wmsa(&mut tape2, x2, 1, h, w, &p, 1, win, true).unwrap();
        let (tr, tc) = ((7 + shift) % h, (7 + shift) % w);
        assert_eq!(
            tape.data(y)[tr * w + tc].to_bits(),
            tape2.data(y2)[tr * w + tc].to_bits(),
            "wrapped token attended across the seam"
        );
    }

    #[test]
    fn rejects_indivisible_geometry() {
        let mut tape = Tape::new();
        let t = token_tensor(1, 6, 6, 2, |_, _, _| 0.0);
        let x = tape.leaf(&t);
        assert!(window_partition(&mut tape, x, 1, 6, 6, 2, 4).is_err());
    }
}
