//! U-shaped windowed-attention backbone.
//!
//! Patch embedding feeds a stack of encoder stages (pairs of W-MSA /
//! SW-MSA blocks with the feed-forward position taken by either a plain
//! MLP or a mixture of experts), patch merging halves the grid between
//! stages, the last stage is the bottleneck, and the decoder mirrors the
//! encoder with patch expansion plus concatenated skip connections fused
//! back to the stage width. A final expansion restores full resolution and
//! a linear head emits one logit channel per padded class.

use std::sync::Arc;

use autograd::{Module, Parameter, Tape, TensorId};

use crate::attention::{wmsa, AttnP};
use crate::config::ModelConfig;
use crate::moe::{expert_forward, moe_forward, ExpertP, FfnP, GateOverride, GateP, MoeFwdOpts};
use crate::nn::{Init, LayerNormP, LinearP};
use crate::{Error, Result};

/// Token activation plus its grid geometry; `tokens` is `[b*h*w, c]`.
#[derive(Debug, Clone, Copy)]
pub struct BlockActivation {
    pub tokens: TensorId,
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

/// One W-MSA or SW-MSA block with pre-norms and a feed-forward site.
pub struct BlockP {
    pub norm1: LayerNormP,
    pub attn: AttnP,
    pub norm2: LayerNormP,
    pub ffn: FfnP,
    pub heads: usize,
    pub shifted: bool,
}

impl Module for BlockP {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.norm1.visit_params(f);
        self.attn.visit_params(f);
        self.norm2.visit_params(f);
        self.ffn.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.norm1.visit_params_mut(f);
        self.attn.visit_params_mut(f);
        self.norm2.visit_params_mut(f);
        self.ffn.visit_params_mut(f);
    }
}

/// 2x2 neighborhood concatenation, norm, and linear reduction to 2C.
pub struct MergeP {
    pub norm: LayerNormP,
    pub reduce: LinearP,
}

impl Module for MergeP {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.norm.visit_params(f);
        self.reduce.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.norm.visit_params_mut(f);
        self.reduce.visit_params_mut(f);
    }
}

fn ffn_name_exists(ffn: &FfnP) -> bool {
    matches!(ffn, FfnP::Moe { .. })
}

/// Whether the block's feed-forward site hosts a mixture.
pub fn block_has_moe(b: &BlockP) -> bool {
    ffn_name_exists(&b.ffn)
}

fn make_ffn(name: &str, c: usize, cfg: &ModelConfig, is_moe_site: bool, single_expert: bool, init: &mut Init) -> FfnP {
    let hidden = cfg.hidden_ratio * c;
    if is_moe_site {
        let n = if single_expert { 1 } else { cfg.num_experts };
        let gate = (cfg.gated && !single_expert).then(|| GateP::new(&format!("{name}.moe.gate"), n, c));
        let experts = (0..n)
            .map(|i| ExpertP::new(&format!("{name}.moe.expert{i}"), c, hidden, c, init))
            .collect();
        FfnP::Moe { gate, experts }
    } else {
        FfnP::Mlp(ExpertP::new(&format!("{name}.mlp"), c, hidden, c, init))
    }
}

fn make_stage(
    prefix: &str,
    depth: usize,
    c: usize,
    heads: usize,
    cfg: &ModelConfig,
    is_moe_site: bool,
    single_expert: bool,
    init: &mut Init,
) -> Vec<BlockP> {
    (0..depth)
        .map(|j| {
            let name = format!("{prefix}.block{j}");
            BlockP {
                norm1: LayerNormP::new(&format!("{name}.norm1"), c, cfg.backbone.layer_norm_eps),
                attn: AttnP::new(&format!("{name}.attn"), c, init),
                norm2: LayerNormP::new(&format!("{name}.norm2"), c, cfg.backbone.layer_norm_eps),
                ffn: make_ffn(&name, c, cfg, is_moe_site, single_expert, init),
                heads,
                shifted: j % 2 == 1,
            }
        })
        .collect()
}

/// Encoder trunk shared by the segmentation model and the masked-autoencoder
/// pre-training model; parameter names are identical in both so phase-1
/// checkpoints map directly onto phase-2 slots.
pub struct EncoderParts {
    pub patch_embed: LinearP,
    pub stages: Vec<Vec<BlockP>>,
    pub merges: Vec<MergeP>,
    pub bottleneck: Vec<BlockP>,
}

impl Module for EncoderParts {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.patch_embed.visit_params(f);
        for (i, stage) in self.stages.iter().enumerate() {
            stage.visit_params(f);
            self.merges[i].visit_params(f);
        }
        self.bottleneck.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            stage.visit_params_mut(f);
            // merge i sits after stage i; order within visitation is cosmetic
            self.merges[i].visit_params_mut(f);
        }
        self.patch_embed.visit_params_mut(f);
        self.bottleneck.visit_params_mut(f);
    }
}

fn build_encoder(cfg: &ModelConfig, init: &mut Init, single_expert: bool) -> EncoderParts {
    let bb = &cfg.backbone;
    let n = bb.num_stages();
    let patch_dim = bb.patch_size * bb.patch_size * bb.in_channels;
    let patch_embed = LinearP::new("patch_embed", bb.embed_dim, patch_dim, true, init);
    let enc_moe = cfg.placement.in_encoder();

    let mut stages = Vec::new();
    let mut merges = Vec::new();
    for s in 0..n - 1 {
        let c = bb.dim_at(s);
        stages.push(make_stage(&format!("enc{s}"), bb.depths[s], c, bb.num_heads[s], cfg, enc_moe, single_expert, init));
        merges.push(MergeP {
            norm: LayerNormP::new(&format!("merge{s}.norm"), 4 * c, bb.layer_norm_eps),
            reduce: LinearP::new(&format!("merge{s}.reduce"), 2 * c, 4 * c, false, init),
        });
    }
    let cb = bb.dim_at(n - 1);
    let bottleneck = make_stage("bot", bb.depths[n - 1], cb, bb.num_heads[n - 1], cfg, enc_moe, single_expert, init);
    EncoderParts { patch_embed, stages, merges, bottleneck }
}

// ── index maps ──────────────────────────────────────────────────────

/// `[B, C_in, H, W]` image to `[B*L, patch*patch*C_in]` patch vectors.
fn patch_map(b: usize, cin: usize, img: usize, p: usize) -> Arc<Vec<u32>> {
    let grid = img / p;
    let mut idx = Vec::with_capacity(b * cin * img * img);
    for bi in 0..b {
        for i in 0..grid {
            for j in 0..grid {
                for ci in 0..cin {
                    for di in 0..p {
                        for dj in 0..p {
                            let src = ((bi * cin + ci) * img + (i * p + di)) * img + (j * p + dj);
                            idx.push(src as u32);
                        }
                    }
                }
            }
        }
    }
    Arc::new(idx)
}

/// `[B, H, W, C]` tokens to `[B, H/2*W/2, 4C]`, neighbors ordered
/// (0,0), (1,0), (0,1), (1,1).
fn merge_map(b: usize, h: usize, w: usize, c: usize) -> Arc<Vec<u32>> {
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                for (qi, qj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let base = ((bi * h + 2 * i + qi) * w + 2 * j + qj) * c;
                    for ci in 0..c {
                        idx.push((base + ci) as u32);
                    }
                }
            }
        }
    }
    Arc::new(idx)
}

/// Pixel-shuffle by factor `r`: `[B, H*W, r*r*C]` to `[B, rH*rW, C]`.
fn shuffle_map(b: usize, h: usize, w: usize, r: usize, c_out: usize) -> Arc<Vec<u32>> {
    let mut idx = Vec::with_capacity(b * h * w * r * r * c_out);
    for bi in 0..b {
        for oi in 0..h * r {
            for oj in 0..w * r {
                let (i, di) = (oi / r, oi % r);
                let (j, dj) = (oj / r, oj % r);
                let base = (bi * h * w + i * w + j) * (r * r * c_out) + (di * r + dj) * c_out;
                for ci in 0..c_out {
                    idx.push((base + ci) as u32);
                }
            }
        }
    }
    Arc::new(idx)
}

// ── forward pieces ──────────────────────────────────────────────────

/// Non-overlapping patches linearly projected to the embedding width.
pub fn patch_embed(
    tape: &mut Tape,
    images: TensorId,
    b: usize,
    cfg: &ModelConfig,
    proj: &LinearP,
) -> Result<BlockActivation> {
    let bb = &cfg.backbone;
    let expect = vec![b, bb.in_channels, bb.img_size, bb.img_size];
    if tape.shape(images) != expect.as_slice() {
        return Err(Error::Config(format!(
            "patch_embed: image shape {:?} does not match configured {:?}",
            tape.shape(images),
            expect
        )));
    }
    let grid = bb.img_size / bb.patch_size;
    let pd = bb.patch_size * bb.patch_size * bb.in_channels;
    let map = patch_map(b, bb.in_channels, bb.img_size, bb.patch_size);
    let patches = tape.gather(images, map, vec![b * grid * grid, pd])?;
    let tokens = proj.forward(tape, patches)?;
    Ok(BlockActivation { tokens, b, h: grid, w: grid, c: bb.embed_dim })
}

/// 2x2 concat + norm + linear: grid halves, width doubles.
pub fn patch_merge(tape: &mut Tape, x: BlockActivation, m: &MergeP) -> Result<BlockActivation> {
    if x.h % 2 != 0 || x.w % 2 != 0 || x.h == 0 {
        return Err(Error::Config(format!("patch_merge needs an even grid, got {}x{}", x.h, x.w)));
    }
    let map = merge_map(x.b, x.h, x.w, x.c);
    let gathered = tape.gather(x.tokens, map, vec![x.b * (x.h / 2) * (x.w / 2), 4 * x.c])?;
    let normed = m.norm.forward(tape, gathered)?;
    let reduced = m.reduce.forward(tape, normed)?;
    Ok(BlockActivation { tokens: reduced, b: x.b, h: x.h / 2, w: x.w / 2, c: 2 * x.c })
}

/// Linear to 2C then pixel shuffle: grid doubles, width halves.
pub fn patch_expand(tape: &mut Tape, x: BlockActivation, e: &LinearP) -> Result<BlockActivation> {
    if x.c % 2 != 0 {
        return Err(Error::Config(format!("patch_expand needs even channels, got {}", x.c)));
    }
    let expanded = e.forward(tape, x.tokens)?;
    let c_out = x.c / 2;
    let map = shuffle_map(x.b, x.h, x.w, 2, c_out);
    let tokens = tape.gather(expanded, map, vec![x.b * x.h * 2 * x.w * 2, c_out])?;
    Ok(BlockActivation { tokens, b: x.b, h: x.h * 2, w: x.w * 2, c: c_out })
}

fn ffn_forward(
    tape: &mut Tape,
    x: TensorId,
    ffn: &FfnP,
    cfg: &ModelConfig,
    act: &BlockActivation,
    gate_override: GateOverride,
) -> Result<TensorId> {
    match ffn {
        FfnP::Mlp(e) => expert_forward(tape, x, e, cfg.backbone.gelu),
        FfnP::Moe { gate, experts } => moe_forward(
            tape,
            x,
            gate.as_ref(),
            experts,
            &MoeFwdOpts {
                gelu: cfg.backbone.gelu,
                granularity: cfg.gate_granularity,
                gate_override,
                batch: act.b,
                tokens_per_sample: act.h * act.w,
            },
        ),
    }
}

/// Pre-norm residual block: attention then feed-forward, each over a
/// layer-normed input with the raw input added back.
pub fn block_forward(
    tape: &mut Tape,
    x: BlockActivation,
    blk: &BlockP,
    cfg: &ModelConfig,
    gate_override: GateOverride,
) -> Result<BlockActivation> {
    let normed = blk.norm1.forward(tape, x.tokens)?;
    let attn = wmsa(tape, normed, x.b, x.h, x.w, &blk.attn, blk.heads, cfg.backbone.window_size, blk.shifted)?;
    let mid = tape.add(x.tokens, attn)?;

    let normed2 = blk.norm2.forward(tape, mid)?;
    let ffn = ffn_forward(tape, normed2, &blk.ffn, cfg, &x, gate_override)?;
    let out = tape.add(mid, ffn)?;
    Ok(BlockActivation { tokens: out, ..x })
}

fn stage_forward(
    tape: &mut Tape,
    mut x: BlockActivation,
    blocks: &[BlockP],
    cfg: &ModelConfig,
    gate_override: GateOverride,
) -> Result<BlockActivation> {
    for blk in blocks {
        x = block_forward(tape, x, blk, cfg, gate_override)?;
    }
    Ok(x)
}

fn encoder_forward(
    tape: &mut Tape,
    enc: &EncoderParts,
    images: TensorId,
    b: usize,
    cfg: &ModelConfig,
    gate_override: GateOverride,
) -> Result<(BlockActivation, Vec<BlockActivation>)> {
    let mut act = patch_embed(tape, images, b, cfg, &enc.patch_embed)?;
    let mut skips = Vec::new();
    for (stage, merge) in enc.stages.iter().zip(&enc.merges) {
        act = stage_forward(tape, act, stage, cfg, gate_override)?;
        skips.push(act);
        act = patch_merge(tape, act, merge)?;
    }
    let act = stage_forward(tape, act, &enc.bottleneck, cfg, gate_override)?;
    Ok((act, skips))
}

// ── segmentation model ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOpts {
    pub gate_override: GateOverride,
}

pub struct SegModel {
    pub cfg: ModelConfig,
    pub encoder: EncoderParts,
    /// Decoder pieces in forward order (deepest stage first).
    pub expands: Vec<LinearP>,
    pub fuses: Vec<LinearP>,
    pub dec_stages: Vec<Vec<BlockP>>,
    pub final_expand: LinearP,
    pub out_norm: LayerNormP,
    pub head: LinearP,
}

impl Module for SegModel {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.encoder.visit_params(f);
        for i in 0..self.dec_stages.len() {
            self.expands[i].visit_params(f);
            self.fuses[i].visit_params(f);
            self.dec_stages[i].visit_params(f);
        }
        self.final_expand.visit_params(f);
        self.out_norm.visit_params(f);
        self.head.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.encoder.visit_params_mut(f);
        for i in 0..self.dec_stages.len() {
            self.expands[i].visit_params_mut(f);
            self.fuses[i].visit_params_mut(f);
            self.dec_stages[i].visit_params_mut(f);
        }
        self.final_expand.visit_params_mut(f);
        self.out_norm.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }
}

impl SegModel {
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<SegModel> {
        cfg.validate()?;
        let bb = cfg.backbone.clone();
        let n = bb.num_stages();
        let mut init = Init::new(seed);
        let encoder = build_encoder(&cfg, &mut init, false);

        let dec_moe = cfg.placement.in_decoder();
        let mut expands = Vec::new();
        let mut fuses = Vec::new();
        let mut dec_stages = Vec::new();
        for s in (0..n - 1).rev() {
            let c = bb.dim_at(s);
            expands.push(LinearP::new(&format!("expand{s}"), 4 * c, 2 * c, false, &mut init));
            fuses.push(LinearP::new(&format!("fuse{s}"), c, 2 * c, true, &mut init));
            dec_stages.push(make_stage(&format!("dec{s}"), bb.depths[s], c, bb.num_heads[s], &cfg, dec_moe, false, &mut init));
        }
        let p2 = bb.patch_size * bb.patch_size;
        let final_expand = LinearP::new("final_expand", p2 * bb.embed_dim, bb.embed_dim, false, &mut init);
        let out_norm = LayerNormP::new("out_norm", bb.embed_dim, bb.layer_norm_eps);
        let head = LinearP::new("head", cfg.k_pad, bb.embed_dim, true, &mut init);
        Ok(SegModel { cfg, encoder, expands, fuses, dec_stages, final_expand, out_norm, head })
    }

    /// Full forward pass: logits are `[b * img * img, k_pad]` with one row
    /// per pixel in row-major order.
    pub fn forward(&self, tape: &mut Tape, images: TensorId, b: usize, opts: ForwardOpts) -> Result<BlockActivation> {
        let cfg = &self.cfg;
        let (mut act, skips) = encoder_forward(tape, &self.encoder, images, b, cfg, opts.gate_override)?;
        for (i, skip) in skips.iter().rev().enumerate() {
            act = patch_expand(tape, act, &self.expands[i])?;
            let cat = tape.concat_last(act.tokens, skip.tokens)?;
            let fused = self.fuses[i].forward(tape, cat)?;
            act = BlockActivation { tokens: fused, ..act };
            act = stage_forward(tape, act, &self.dec_stages[i], cfg, opts.gate_override)?;
        }
        // one patch-size expansion back to pixel resolution
        let p = cfg.backbone.patch_size;
        let expanded = self.final_expand.forward(tape, act.tokens)?;
        let map = shuffle_map(act.b, act.h, act.w, p, act.c);
        let pixels = tape.gather(expanded, map, vec![act.b * act.h * p * act.w * p, act.c])?;
        let normed = self.out_norm.forward(tape, pixels)?;
        let logits = self.head.forward(tape, normed)?;
        Ok(BlockActivation { tokens: logits, b: act.b, h: act.h * p, w: act.w * p, c: cfg.k_pad })
    }
}

// ── masked-autoencoder pre-training model ───────────────────────────

/// Encoder trunk plus a light reconstruction head. Each bottleneck token
/// predicts the pixel block of every patch it covers.
pub struct MaeModel {
    pub cfg: ModelConfig,
    pub encoder: EncoderParts,
    pub recon_norm: LayerNormP,
    pub recon_head: LinearP,
}

impl Module for MaeModel {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.encoder.visit_params(f);
        self.recon_norm.visit_params(f);
        self.recon_head.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.encoder.visit_params_mut(f);
        self.recon_norm.visit_params_mut(f);
        self.recon_head.visit_params_mut(f);
    }
}

impl MaeModel {
    /// Patches of the stage-0 grid covered by one bottleneck token, per side.
    pub fn patches_per_token_side(cfg: &ModelConfig) -> usize {
        1 << (cfg.backbone.num_stages() - 1)
    }

    /// Values predicted per bottleneck token.
    pub fn recon_dim(cfg: &ModelConfig) -> usize {
        let bb = &cfg.backbone;
        let g = Self::patches_per_token_side(cfg);
        g * g * bb.patch_size * bb.patch_size * bb.in_channels
    }

    pub fn build(cfg: ModelConfig, seed: u64) -> Result<MaeModel> {
        cfg.validate()?;
        if !cfg.placement.in_encoder() {
            return Err(Error::Config(
                "masked-autoencoder pre-training requires mixture sites in the encoder".into(),
            ));
        }
        let mut single = cfg.clone();
        single.num_experts = 1;
        single.gated = false;
        let mut init = Init::new(seed);
        let encoder = build_encoder(&single, &mut init, true);
        let nb = single.backbone.dim_at(single.backbone.num_stages() - 1);
        let recon_norm = LayerNormP::new("recon.norm", nb, single.backbone.layer_norm_eps);
        let recon_head = LinearP::new("recon.head", Self::recon_dim(&single), nb, true, &mut init);
        Ok(MaeModel { cfg: single, encoder, recon_norm, recon_head })
    }

    /// Returns per-token reconstruction predictions `[b*Lb, recon_dim]`.
    pub fn forward(&self, tape: &mut Tape, images: TensorId, b: usize) -> Result<BlockActivation> {
        let (act, _skips) =
            encoder_forward(tape, &self.encoder, images, b, &self.cfg, GateOverride::None)?;
        let normed = self.recon_norm.forward(tape, act.tokens)?;
        let recon = self.recon_head.forward(tape, normed)?;
        Ok(BlockActivation { tokens: recon, ..act })
    }
}
