//! Two-phase training: masked-autoencoder pre-training of each modality's
//! expert (single expert, no gate), assembly of the mixture model from the
//! per-modality checkpoints, and end-to-end segmentation fine-tuning on
//! modality-shuffled batches. Also the from-scratch ablation runner.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use autograd::checkpoint::{records_from_module, Record};
use autograd::param::{param_count, zero_grads};
use autograd::{AdamW, Module, Tape, TensorId};

use crate::backbone::{ForwardOpts, MaeModel, SegModel};
use crate::config::{derive_seed, ExperimentConfig, MoePlacement};
use crate::data::{Corpus, SampleRecord};
use crate::heads::{masked_loss, select_logits, LabelSpace, LossFlags};
use crate::metrics::{evaluate, EvalResult};
use crate::{Error, Result};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub version: u32,
    pub phase: String,
    pub seed: u64,
    pub epochs: usize,
    pub loss_curve: Vec<f64>,
    pub final_metrics: Option<EvalResult>,
    pub param_count: usize,
    pub wall_clock_secs: f64,
    pub warnings: Vec<String>,
}

impl TrainReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("report serialize: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Loss curve as `phase,epoch,loss` rows.
    pub fn save_loss_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("phase,epoch,loss\n");
        for (i, l) in self.loss_curve.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.phase, i, l));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

fn batch_tensor(tape: &mut Tape, samples: &[&SampleRecord], img: usize, cin: usize) -> Result<TensorId> {
    let mut data = Vec::with_capacity(samples.len() * cin * img * img);
    for s in samples {
        data.extend_from_slice(&s.image);
    }
    Ok(tape.constant(data, vec![samples.len(), cin, img, img])?)
}

// ── phase 1: masked-autoencoder pre-training ────────────────────────

struct MaskedBatch {
    images: Vec<f32>,
    /// (sample-in-batch, patch row, patch col) of every masked patch.
    masked: Vec<(usize, usize, usize)>,
    /// Per-patch normalized pixel targets, concatenated in `masked` order.
    targets: Vec<f32>,
}

/// Zeroes out a random `mask_ratio` of the patch grid per sample and builds
/// per-patch normalized reconstruction targets from the original pixels.
fn mask_batch(
    samples: &[&SampleRecord],
    img: usize,
    cin: usize,
    patch: usize,
    mask_ratio: f32,
    rng: &mut ChaCha8Rng,
) -> MaskedBatch {
    let grid = img / patch;
    let patch_px = patch * patch * cin;
    let n_patches = grid * grid;
    let n_mask = ((mask_ratio as f64 * n_patches as f64).round() as usize).min(n_patches);

    let mut images = Vec::with_capacity(samples.len() * cin * img * img);
    let mut masked = Vec::new();
    let mut targets = Vec::new();

    for (si, s) in samples.iter().enumerate() {
        let mut pixels = s.image.clone();
        let mut order: Vec<usize> = (0..n_patches).collect();
        let (chosen, _) = order.partial_shuffle(rng, n_mask);
        let mut chosen: Vec<usize> = chosen.to_vec();
        chosen.sort_unstable();
        for &p in &chosen {
            let (pi, pj) = (p / grid, p % grid);
            // target: original patch values, normalized per patch
            let mut vals = Vec::with_capacity(patch_px);
            for ci in 0..cin {
                for di in 0..patch {
                    for dj in 0..patch {
                        let idx = (ci * img + pi * patch + di) * img + pj * patch + dj;
                        vals.push(s.image[idx]);
                    }
                }
            }
            let n = vals.len() as f64;
            let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = vals.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-6).sqrt();
            targets.extend(vals.iter().map(|&v| ((v as f64 - mean) * inv) as f32));
            masked.push((si, pi, pj));
            // zero the masked patch in the network input
            for ci in 0..cin {
                for di in 0..patch {
                    for dj in 0..patch {
                        pixels[(ci * img + pi * patch + di) * img + pj * patch + dj] = 0.0;
                    }
                }
            }
        }
        images.extend_from_slice(&pixels);
    }
    MaskedBatch { images, masked, targets }
}

/// Mean squared error on masked patches only; `None` when nothing is masked.
fn mae_loss(
    tape: &mut Tape,
    recon: TensorId,
    cfg_grid: usize,
    g: usize,
    patch_px: usize,
    batch: &MaskedBatch,
) -> Result<Option<TensorId>> {
    if batch.masked.is_empty() {
        return Ok(None);
    }
    let tokens_side = cfg_grid / g;
    let tokens_per_sample = tokens_side * tokens_side;
    let recon_dim = g * g * patch_px;
    let mut idx = Vec::with_capacity(batch.masked.len() * patch_px);
    for &(si, pi, pj) in &batch.masked {
        let token = si * tokens_per_sample + (pi / g) * tokens_side + (pj / g);
        let offset = ((pi % g) * g + (pj % g)) * patch_px;
        let base = token * recon_dim + offset;
        for d in 0..patch_px {
            idx.push((base + d) as u32);
        }
    }
    let pred = tape.gather(recon, Arc::new(idx), vec![batch.masked.len() * patch_px])?;
    let neg_target: Vec<f32> = batch.targets.iter().map(|v| -v).collect();
    let diff = tape.add_cycled_const(pred, Arc::new(neg_target))?;
    let sq = tape.mul(diff, diff)?;
    Ok(Some(tape.mean_all(sq)))
}

/// Pre-trains a single-expert encoder on masked reconstruction for one
/// modality. The returned checkpoint carries the shared trunk weights and
/// the `moe.expert0` slots that assembly transplants.
pub fn phase1_pretrain(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    modality_id: usize,
) -> Result<(MaeModel, TrainReport)> {
    let start = Instant::now();
    cfg.validate()?;
    let indices = corpus.modality_indices(modality_id);
    if indices.is_empty() {
        return Err(Error::Data(format!("corpus has no samples of modality {modality_id}")));
    }
    let model_cfg = cfg.model_config();
    let mut model = MaeModel::build(model_cfg.clone(), derive_seed(cfg.seed, 0x9A5E + modality_id as u64))?;
    let mut opt = AdamW::new(cfg.phase1.lr, cfg.phase1.weight_decay);
    opt.weight_decay = cfg.phase1.weight_decay;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xBA7C + modality_id as u64));

    let bb = &cfg.backbone;
    let grid = bb.img_size / bb.patch_size;
    let g = MaeModel::patches_per_token_side(&model.cfg);
    let patch_px = bb.patch_size * bb.patch_size * bb.in_channels;

    let mut curve = Vec::with_capacity(cfg.phase1.epochs);
    let mut order = indices.clone();
    for _epoch in 0..cfg.phase1.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.phase1.batch_size) {
            let samples: Vec<&SampleRecord> = chunk.iter().map(|&i| &corpus.samples[i]).collect();
            let masked = mask_batch(&samples, bb.img_size, bb.in_channels, bb.patch_size, cfg.phase1.mask_ratio, &mut rng);
            let mut tape = Tape::new();
            let images = tape.constant(
                masked.images.clone(),
                vec![samples.len(), bb.in_channels, bb.img_size, bb.img_size],
            )?;
            let out = model.forward(&mut tape, images, samples.len())?;
            let Some(loss) = mae_loss(&mut tape, out.tokens, grid, g, patch_px, &masked)? else {
                continue;
            };
            epoch_loss += tape.data(loss)[0] as f64;
            steps += 1;
            tape.backward(loss).map_err(Error::from)?;
            tape.write_grads(&mut model);
            opt.step(&mut model).map_err(Error::from)?;
            zero_grads(&mut model);
        }
        curve.push(if steps > 0 { epoch_loss / steps as f64 } else { 0.0 });
    }

    let report = TrainReport {
        version: REPORT_VERSION,
        phase: format!("phase1-modality{modality_id}"),
        seed: cfg.seed,
        epochs: cfg.phase1.epochs,
        loss_curve: curve,
        final_metrics: None,
        param_count: param_count(&model),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        warnings: Vec::new(),
    };
    Ok((model, report))
}

// ── assembly ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MergeMode {
    /// Elementwise average of shared weights across the phase-1 models;
    /// symmetric in the modality order.
    #[default]
    Average,
    TakeFirst,
}

impl std::str::FromStr for MergeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(MergeMode::Average),
            "take-first" | "take_first" => Ok(MergeMode::TakeFirst),
            other => Err(Error::Config(format!("unknown merge mode '{other}'"))),
        }
    }
}

/// Builds the mixture model from phase-1 checkpoints: expert slot `i` gets
/// modality `i`'s pre-trained MLP weights, shared trunk weights are merged
/// across checkpoints, gates start at zero (uniform routing), and decoder /
/// head weights are freshly initialized.
pub fn assemble_moe(
    ckpts: &[Vec<Record>],
    cfg: &ExperimentConfig,
    mode: MergeMode,
) -> Result<SegModel> {
    cfg.validate()?;
    if ckpts.len() != cfg.moe.num_experts {
        return Err(Error::Checkpoint(format!(
            "assembly needs {} phase-1 checkpoints, got {}",
            cfg.moe.num_experts,
            ckpts.len()
        )));
    }
    let model_cfg = cfg.model_config();
    if !model_cfg.placement.in_encoder() {
        return Err(Error::Config(
            "assembly requires mixture sites in the encoder (placement encoder_only or both)".into(),
        ));
    }

    // checkpoints must describe the same architecture
    let names: Vec<std::collections::BTreeMap<&str, &Record>> = ckpts
        .iter()
        .map(|c| c.iter().map(|r| (r.name.as_str(), r)).collect())
        .collect();
    for (i, m) in names.iter().enumerate().skip(1) {
        if m.len() != names[0].len() || !m.keys().eq(names[0].keys()) {
            return Err(Error::Checkpoint(format!(
                "checkpoint {i} has a different parameter set than checkpoint 0"
            )));
        }
        for (k, r) in m {
            if r.shape != names[0][k].shape {
                return Err(Error::Checkpoint(format!(
                    "checkpoint {i}: '{k}' shape {:?} differs from checkpoint 0 {:?}",
                    r.shape, names[0][k].shape
                )));
            }
        }
    }

    let mut model = SegModel::build(model_cfg, derive_seed(cfg.seed, 0xA55E))?;
    let mut err: Option<Error> = None;
    model.visit_params_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        // expert slots: enc*.moe.expertI / bot.*.moe.expertI from checkpoint I
        if let Some(pos) = p.name.find(".moe.expert") {
            let rest = &p.name[pos + ".moe.expert".len()..];
            if let Some(dot) = rest.find('.') {
                if let Ok(slot) = rest[..dot].parse::<usize>() {
                    let source = format!("{}.moe.expert0{}", &p.name[..pos + ".moe".len()], &rest[dot..]);
                    if let Some(rec) = names[slot.min(names.len() - 1)].get(source.as_str()) {
                        if rec.shape != p.tensor.shape {
                            err = Some(Error::Checkpoint(format!(
                                "'{}': checkpoint shape {:?} vs model {:?}",
                                p.name, rec.shape, p.tensor.shape
                            )));
                            return;
                        }
                        p.tensor.data = rec.data.clone();
                    }
                    return;
                }
            }
        }
        // shared trunk weights present in the checkpoints
        if let Some(rec0) = names[0].get(p.name.as_str()) {
            if rec0.shape != p.tensor.shape {
                err = Some(Error::Checkpoint(format!(
                    "'{}': checkpoint shape {:?} vs model {:?}",
                    p.name, rec0.shape, p.tensor.shape
                )));
                return;
            }
            match mode {
                MergeMode::TakeFirst => p.tensor.data = rec0.data.clone(),
                MergeMode::Average => {
                    let mut acc = vec![0.0f64; rec0.data.len()];
                    for m in &names {
                        for (a, &v) in acc.iter_mut().zip(&m[p.name.as_str()].data) {
                            *a += v as f64;
                        }
                    }
                    let inv = 1.0 / names.len() as f64;
                    p.tensor.data = acc.iter().map(|&v| (v * inv) as f32).collect();
                }
            }
        }
        // anything else (decoder, fuses, head, gates) keeps its fresh init;
        // gates are zero-initialized by construction
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok(model)
}

// ── phase 2: segmentation fine-tuning ───────────────────────────────

fn segmentation_epochs(
    model: &mut SegModel,
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    space: &LabelSpace,
    epochs: usize,
    seed_salt: u64,
) -> Result<Vec<f64>> {
    let mut opt = AdamW::new(cfg.phase2.lr, cfg.phase2.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, seed_salt));
    let flags = LossFlags { include_background: cfg.metrics.include_background };
    let hw = corpus.img_size * corpus.img_size;

    let mut order: Vec<usize> = (0..corpus.samples.len()).collect();
    let mut curve = Vec::with_capacity(epochs);
    for _epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.phase2.batch_size) {
            let samples: Vec<&SampleRecord> = chunk.iter().map(|&i| &corpus.samples[i]).collect();
            let mut tape = Tape::new();
            let images = batch_tensor(&mut tape, &samples, corpus.img_size, corpus.in_channels)?;
            let out = model.forward(&mut tape, images, samples.len(), ForwardOpts::default())?;
            let modality_ids: Vec<usize> = samples.iter().map(|s| s.modality_id).collect();
            let selected = select_logits(&mut tape, out.tokens, samples.len(), hw, space, &modality_ids)?;
            let labels: Vec<&[u16]> = samples.iter().map(|s| s.mask.as_slice()).collect();
            let loss = masked_loss(&mut tape, &selected, &labels, flags)?;
            epoch_loss += tape.data(loss)[0] as f64;
            steps += 1;
            tape.backward(loss).map_err(Error::from)?;
            tape.write_grads(model);
            opt.step(model).map_err(Error::from)?;
            zero_grads(model);
        }
        curve.push(if steps > 0 { epoch_loss / steps as f64 } else { 0.0 });
    }
    Ok(curve)
}

/// Fine-tunes the assembled model end-to-end on modality-shuffled batches.
pub fn phase2_finetune(
    model: &mut SegModel,
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    space: &LabelSpace,
) -> Result<TrainReport> {
    let start = Instant::now();
    let mut warnings = Vec::new();
    let present = corpus.modality_ids();
    for m in &cfg.modalities {
        if !present.contains(&m.modality_id) {
            warnings.push(format!(
                "declared modality '{}' (id {}) has no samples in the corpus",
                m.name, m.modality_id
            ));
        }
    }
    for &mid in &present {
        space.modality(mid)?;
    }

    let curve = segmentation_epochs(model, cfg, corpus, space, cfg.phase2.epochs, 0xF17E)?;
    let final_metrics = evaluate(model, corpus, space, &cfg.metrics, cfg.phase2.batch_size)?;
    Ok(TrainReport {
        version: REPORT_VERSION,
        phase: "phase2".into(),
        seed: cfg.seed,
        epochs: cfg.phase2.epochs,
        loss_curve: curve,
        final_metrics: Some(final_metrics),
        param_count: param_count(model),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        warnings,
    })
}

// ── ablation over placement and gating ──────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub placement: String,
    pub gating: bool,
    pub mean_dsc: f64,
    pub per_modality_dsc: Vec<f64>,
    pub param_count: usize,
    pub expert_params: usize,
    pub gating_params: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub epochs: usize,
    pub rows: Vec<AblationRow>,
}

impl std::fmt::Display for AblationTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<14} {:<6} {:>9} {:>12} {:>12}", "placement", "gate", "mean_dsc", "params", "gate_params")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<14} {:<6} {:>9.4} {:>12} {:>12}",
                r.placement,
                if r.gating { "on" } else { "off" },
                r.mean_dsc,
                r.param_count,
                r.gating_params
            )?;
        }
        Ok(())
    }
}

fn placement_str(p: MoePlacement) -> &'static str {
    match p {
        MoePlacement::None => "none",
        MoePlacement::EncoderOnly => "encoder_only",
        MoePlacement::DecoderOnly => "decoder_only",
        MoePlacement::Both => "both",
    }
}

/// Trains each (placement, gating) variant from scratch under an identical
/// seed and data order, then evaluates it. Gating off means uniform 1/n
/// mixing with zero gating parameters.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    variants: &[(MoePlacement, bool)],
    space: &LabelSpace,
) -> Result<AblationTable> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &(placement, gated) in variants {
        let mut model_cfg = cfg.model_config();
        model_cfg.placement = placement;
        model_cfg.gated = gated;
        let mut model = SegModel::build(model_cfg, derive_seed(cfg.seed, 0xAB1A))?;
        let mut variant_cfg = cfg.clone();
        variant_cfg.phase2.moe_placement = placement;
        segmentation_epochs(&mut model, &variant_cfg, corpus, space, cfg.phase2.epochs, 0xF17E)?;
        let eval = evaluate(&model, corpus, space, &cfg.metrics, cfg.phase2.batch_size)?;
        let breakdown = crate::metrics::count_params(&model);
        rows.push(AblationRow {
            placement: placement_str(placement).to_string(),
            gating: gated,
            mean_dsc: eval.mean_dsc,
            per_modality_dsc: eval.per_modality.iter().map(|m| m.mean_dsc).collect(),
            param_count: breakdown.total,
            expert_params: breakdown.experts,
            gating_params: breakdown.gating,
        });
    }
    Ok(AblationTable { seed: cfg.seed, epochs: cfg.phase2.epochs, rows })
}

/// Snapshot a model into checkpoint records.
pub fn checkpoint_records(model: &dyn Module) -> Vec<Record> {
    records_from_module(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthSpec};
    use std::collections::BTreeMap;

    fn quick_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::toy();
        cfg.phase1.epochs = 2;
        cfg.phase2.epochs = 1;
        cfg.phase1.batch_size = 4;
        cfg.phase2.batch_size = 4;
        cfg
    }

    fn quick_corpus(cfg: &ExperimentConfig) -> Corpus {
        let spec = SynthSpec::default_profile(cfg.backbone.img_size, 4, cfg.seed);
        generate(&spec).unwrap()
    }

    #[test]
    fn mask_batch_zero_ratio_masks_nothing() {
        let cfg = quick_cfg();
        let corpus = quick_corpus(&cfg);
        let samples: Vec<&SampleRecord> = corpus.samples.iter().take(2).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mb = mask_batch(&samples, 32, 1, 4, 0.0, &mut rng);
        assert!(mb.masked.is_empty());
        assert!(mb.targets.is_empty());
        // loss over the empty masked set is defined as absent -> no step
        let mut tape = Tape::new();
        let recon = tape.constant(vec![0.0; 64], vec![4, 16]).unwrap();
        let loss = mae_loss(&mut tape, recon, 8, 2, 16, &mb).unwrap();
        assert!(loss.is_none());
    }

    #[test]
    fn mask_batch_respects_ratio_and_normalizes() {
        let cfg = quick_cfg();
        let corpus = quick_corpus(&cfg);
        let samples: Vec<&SampleRecord> = corpus.samples.iter().take(1).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mb = mask_batch(&samples, 32, 1, 4, 0.75, &mut rng);
        assert_eq!(mb.masked.len(), 48); // 64 patches * 0.75
        assert_eq!(mb.targets.len(), 48 * 16);
        // masked patches are zeroed in the input
        let (_, pi, pj) = mb.masked[0];
        for di in 0..4 {
            for dj in 0..4 {
                assert_eq!(mb.images[(pi * 4 + di) * 32 + pj * 4 + dj], 0.0);
            }
        }
        // each target patch is zero-mean
        for t in mb.targets.chunks(16) {
            let mean: f32 = t.iter().sum::<f32>() / 16.0;
            assert!(mean.abs() < 1e-4);
        }
    }

    #[test]
    fn constant_images_reconstruct_quickly() {
        let mut cfg = quick_cfg();
        cfg.phase1.epochs = 13; // 4 samples, batch 4: 13 steps total
        cfg.phase1.lr = 3e-3;
        let mut corpus = quick_corpus(&cfg);
        for s in &mut corpus.samples {
            s.image.iter_mut().for_each(|v| *v = 0.5);
        }
        let (_, report) = phase1_pretrain(&cfg, &corpus, 0).unwrap();
        let last = *report.loss_curve.last().unwrap();
        assert!(last < 1e-3, "constant-image loss stuck at {last}");
    }

    #[test]
    fn pretrain_missing_modality_is_an_error() {
        let cfg = quick_cfg();
        let mut corpus = quick_corpus(&cfg);
        corpus.samples.retain(|s| s.modality_id != 1);
        assert!(phase1_pretrain(&cfg, &corpus, 1).is_err());
    }

    #[test]
    fn identical_checkpoints_assemble_to_the_same_shared_weights() {
        let cfg = quick_cfg();
        let corpus = quick_corpus(&cfg);
        let (mae, _) = phase1_pretrain(&cfg, &corpus, 0).unwrap();
        let records = checkpoint_records(&mae);
        let ckpts = vec![records.clone(), records.clone(), records.clone()];
        let model = assemble_moe(&ckpts, &cfg, MergeMode::Average).unwrap();

        let by_name: BTreeMap<&str, &Record> = records.iter().map(|r| (r.name.as_str(), r)).collect();
        let mut checked_shared = 0;
        let mut checked_experts = 0;
        model.visit_params(&mut |p| {
            if let Some(rec) = by_name.get(p.name.as_str()) {
                assert_eq!(&p.tensor.data, &rec.data, "{} differs", p.name);
                checked_shared += 1;
            }
            if p.name.contains(".moe.expert") && (p.name.starts_with("enc") || p.name.starts_with("bot"))
            {
                let pos = p.name.find(".moe.expert").unwrap();
                let rest = &p.name[pos + ".moe.expert".len()..];
                let dot = rest.find('.').unwrap();
                let source = format!("{}.moe.expert0{}", &p.name[..pos + ".moe".len()], &rest[dot..]);
                assert_eq!(&p.tensor.data, &by_name[source.as_str()].data, "{}", p.name);
                checked_experts += 1;
            }
            if p.name.contains(".moe.gate") {
                assert!(p.tensor.data.iter().all(|&v| v == 0.0), "{} not zero", p.name);
            }
        });
        assert!(checked_shared > 10);
        assert!(checked_experts > 10);
    }

    #[test]
    fn assembly_rejects_wrong_count_and_mismatched_checkpoints() {
        let cfg = quick_cfg();
        let corpus = quick_corpus(&cfg);
        let (mae, _) = phase1_pretrain(&cfg, &corpus, 0).unwrap();
        let records = checkpoint_records(&mae);
        assert!(assemble_moe(&[records.clone()], &cfg, MergeMode::Average).is_err());

        let mut other = records.clone();
        other.retain(|r| r.name != "patch_embed.b");
        let ckpts = vec![records.clone(), other, records.clone()];
        assert!(assemble_moe(&ckpts, &cfg, MergeMode::Average).is_err());
    }

    #[test]
    fn zero_lr_freezes_parameters() {
        let mut cfg = quick_cfg();
        cfg.phase2.lr = 0.0;
        cfg.phase2.epochs = 1;
        let corpus = quick_corpus(&cfg);
        let space = LabelSpace::build(&cfg.modalities, cfg.channel_assignment, &BTreeMap::new()).unwrap();
        let mut model = SegModel::build(cfg.model_config(), 3).unwrap();
        let before: Vec<Vec<f32>> = {
            let mut v = Vec::new();
            model.visit_params(&mut |p| v.push(p.tensor.data.clone()));
            v
        };
        phase2_finetune(&mut model, &cfg, &corpus, &space).unwrap();
        let mut i = 0;
        model.visit_params(&mut |p| {
            assert_eq!(p.tensor.data, before[i], "{} moved at lr 0", p.name);
            i += 1;
        });
    }

    #[test]
    fn missing_modality_becomes_a_warning() {
        let cfg = quick_cfg();
        let mut corpus = quick_corpus(&cfg);
        corpus.samples.retain(|s| s.modality_id != 2);
        let space = LabelSpace::build(&cfg.modalities, cfg.channel_assignment, &BTreeMap::new()).unwrap();
        let mut model = SegModel::build(cfg.model_config(), 3).unwrap();
        let report = phase2_finetune(&mut model, &cfg, &corpus, &space).unwrap();
        assert_eq!(report.warnings.len(), 1);
        assert!(report.warnings[0].contains("cemri"));
    }

    #[test]
    fn one_step_moves_the_gates() {
        let mut cfg = quick_cfg();
        cfg.phase2.epochs = 1;
        let corpus = quick_corpus(&cfg);
        let space = LabelSpace::build(&cfg.modalities, cfg.channel_assignment, &BTreeMap::new()).unwrap();
        let (mae, _) = phase1_pretrain(&cfg, &corpus, 0).unwrap();
        let records = checkpoint_records(&mae);
        let ckpts = vec![records.clone(), records.clone(), records];
        let mut model = assemble_moe(&ckpts, &cfg, MergeMode::Average).unwrap();
        phase2_finetune(&mut model, &cfg, &corpus, &space).unwrap();
        let mut gate_norm = 0.0f32;
        model.visit_params(&mut |p| {
            if p.name.contains(".moe.gate") {
                gate_norm += p.tensor.data.iter().map(|v| v * v).sum::<f32>();
            }
        });
        assert!(gate_norm > 0.0, "gating parameters did not move");
    }

    #[test]
    fn report_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let report = TrainReport {
            version: REPORT_VERSION,
            phase: "phase2".into(),
            seed: 1,
            epochs: 2,
            loss_curve: vec![0.5, 0.25],
            final_metrics: None,
            param_count: 123,
            wall_clock_secs: 0.0,
            warnings: vec![],
        };
        report.save_json(&dir.path().join("report.json")).unwrap();
        report.save_loss_csv(&dir.path().join("loss.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert!(text.contains("phase2,1,0.25"));
    }
}
