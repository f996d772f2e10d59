//! Experiment configuration: architecture, modalities, and training phases.
//!
//! One config file (TOML or JSON, chosen by extension) is the single source
//! of truth for an experiment. [`ModelConfig`] is the derived architectural
//! view used by the model builder and by parameter accounting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub img_size: usize,
    pub patch_size: usize,
    pub window_size: usize,
    pub embed_dim: usize,
    /// Blocks per stage; the last stage is the bottleneck (no merge after).
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub in_channels: usize,
    /// Reserved extension point; attention is plain scaled dot-product.
    pub rel_pos_bias: bool,
    pub gelu: GeluKind,
    pub layer_norm_eps: f32,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            img_size: 64,
            patch_size: 4,
            window_size: 4,
            embed_dim: 24,
            depths: vec![2, 2, 2],
            num_heads: vec![2, 4, 8],
            in_channels: 1,
            rel_pos_bias: false,
            gelu: GeluKind::Tanh,
            layer_norm_eps: 1e-5,
        }
    }
}

impl BackboneConfig {
    /// Token-grid side at stage `i` (stage 0 is the patch grid).
    pub fn grid_at(&self, stage: usize) -> usize {
        (self.img_size / self.patch_size) >> stage
    }

    pub fn dim_at(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.img_size == 0 || self.img_size % 2 != 0 {
            return fail(format!("img_size {} must be a positive even integer", self.img_size));
        }
        if self.patch_size == 0 || self.img_size % self.patch_size != 0 {
            return fail(format!(
                "img_size {} not divisible by patch_size {}",
                self.img_size, self.patch_size
            ));
        }
        if self.depths.is_empty() {
            return fail("depths must not be empty".into());
        }
        if self.depths.len() != self.num_heads.len() {
            return fail(format!(
                "depths has {} stages but num_heads has {}",
                self.depths.len(),
                self.num_heads.len()
            ));
        }
        for (i, &d) in self.depths.iter().enumerate() {
            if d == 0 || d % 2 != 0 {
                return fail(format!("depths[{i}] = {d}: each stage needs a positive even block count"));
            }
            let grid = self.grid_at(i);
            if grid == 0 || grid % self.window_size != 0 {
                return fail(format!(
                    "stage {i} token grid {grid} not divisible by window_size {}",
                    self.window_size
                ));
            }
            if self.dim_at(i) % self.num_heads[i] != 0 {
                return fail(format!(
                    "stage {i} dim {} not divisible by num_heads {}",
                    self.dim_at(i),
                    self.num_heads[i]
                ));
            }
        }
        if self.in_channels == 0 {
            return fail("in_channels must be positive".into());
        }
        if self.rel_pos_bias {
            return fail("rel_pos_bias is a reserved extension point and not implemented".into());
        }
        if self.layer_norm_eps <= 0.0 {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeluKind {
    Tanh,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoePlacement {
    None,
    EncoderOnly,
    DecoderOnly,
    Both,
}

impl MoePlacement {
    pub fn in_encoder(self) -> bool {
        matches!(self, MoePlacement::EncoderOnly | MoePlacement::Both)
    }
    pub fn in_decoder(self) -> bool {
        matches!(self, MoePlacement::DecoderOnly | MoePlacement::Both)
    }
}

impl std::str::FromStr for MoePlacement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MoePlacement::None),
            "encoder_only" | "encoder" => Ok(MoePlacement::EncoderOnly),
            "decoder_only" | "decoder" => Ok(MoePlacement::DecoderOnly),
            "both" => Ok(MoePlacement::Both),
            other => Err(Error::Config(format!("unknown moe placement '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateGranularity {
    /// Each token gets its own expert mixture.
    Token,
    /// One mixture per sample from mean-pooled tokens.
    Sample,
}

/// Model-level mixture-of-experts settings; per-site dimensions are derived
/// from the stage widths.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MoeSettings {
    pub num_experts: usize,
    /// Expert hidden width as a multiple of the block channel width.
    pub hidden_ratio: usize,
    pub gate_granularity: GateGranularity,
}

impl Default for MoeSettings {
    fn default() -> Self {
        MoeSettings { num_experts: 3, hidden_ratio: 4, gate_granularity: GateGranularity::Token }
    }
}

/// Identity and label structure of one imaging modality.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityDescriptor {
    pub modality_id: usize,
    pub name: String,
    /// Global class ids, background (0) first.
    pub class_ids: Vec<usize>,
    pub in_channels: usize,
}

impl ModalityDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.class_ids.first() != Some(&0) {
            return Err(Error::Config(format!(
                "modality '{}': class_ids must be non-empty and begin with background id 0",
                self.name
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for &c in &self.class_ids {
            if !seen.insert(c) {
                return Err(Error::Config(format!("modality '{}': duplicate class id {c}", self.name)));
            }
        }
        if self.in_channels == 0 {
            return Err(Error::Config(format!("modality '{}': in_channels must be positive", self.name)));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelAssignment {
    /// Global class id maps to one fixed padded channel shared by all
    /// modalities, so shared organs share head rows.
    Shared,
    /// Every (modality, foreground class) pair gets its own channel.
    Disjoint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Phase1Config {
    pub mask_ratio: f32,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub weight_decay: f32,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Phase1Config { mask_ratio: 0.75, epochs: 20, lr: 1e-3, batch_size: 8, weight_decay: 1e-4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Phase2Config {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub weight_decay: f32,
    pub moe_placement: MoePlacement,
}

impl Default for Phase2Config {
    fn default() -> Self {
        Phase2Config {
            epochs: 30,
            lr: 1e-3,
            batch_size: 36,
            weight_decay: 1e-4,
            moe_placement: MoePlacement::Both,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsFlags {
    /// Background class participates in mean DSC/IoU when set.
    pub include_background: bool,
    /// Dice of two empty masks: 1.0 when set (default), else 0.0.
    pub empty_dice_is_one: bool,
}

impl Default for MetricsFlags {
    fn default() -> Self {
        MetricsFlags { include_background: false, empty_dice_is_one: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub moe: MoeSettings,
    pub modalities: Vec<ModalityDescriptor>,
    pub channel_assignment: ChannelAssignment,
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
    pub metrics: MetricsFlags,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            backbone: BackboneConfig::default(),
            moe: MoeSettings::default(),
            modalities: default_modalities(),
            channel_assignment: ChannelAssignment::Shared,
            phase1: Phase1Config::default(),
            phase2: Phase2Config::default(),
            metrics: MetricsFlags::default(),
            seed: 7,
        }
    }
}

/// Three overlapping synthetic modalities with class counts {4, 5, 3}.
/// All share background and the "blob" class; each pair overlaps further.
pub fn default_modalities() -> Vec<ModalityDescriptor> {
    vec![
        ModalityDescriptor { modality_id: 0, name: "ct".into(), class_ids: vec![0, 1, 2, 3], in_channels: 1 },
        ModalityDescriptor {
            modality_id: 1,
            name: "mri".into(),
            class_ids: vec![0, 1, 2, 3, 4],
            in_channels: 1,
        },
        ModalityDescriptor { modality_id: 2, name: "cemri".into(), class_ids: vec![0, 1, 4], in_channels: 1 },
    ]
}

impl ExperimentConfig {
    /// Small single-merge profile used by the test suites and quick runs.
    pub fn toy() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.backbone.img_size = 32;
        cfg.backbone.depths = vec![2, 2];
        cfg.backbone.num_heads = vec![2, 4];
        cfg.phase1.epochs = 12;
        cfg.phase1.batch_size = 8;
        cfg.phase2.epochs = 30;
        cfg.phase2.batch_size = 8;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.modalities.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        if self.moe.num_experts != self.modalities.len() {
            return Err(Error::Config(format!(
                "num_experts {} must equal the number of modalities {}",
                self.moe.num_experts,
                self.modalities.len()
            )));
        }
        if self.moe.hidden_ratio == 0 {
            return Err(Error::Config("hidden_ratio must be positive".into()));
        }
        let mut ids = std::collections::HashSet::new();
        for m in &self.modalities {
            m.validate()?;
            if !ids.insert(m.modality_id) {
                return Err(Error::Config(format!("duplicate modality_id {}", m.modality_id)));
            }
            if m.in_channels != self.backbone.in_channels {
                return Err(Error::Config(format!(
                    "modality '{}' has in_channels {} but backbone expects {}",
                    m.name, m.in_channels, self.backbone.in_channels
                )));
            }
        }
        if !(self.phase1.mask_ratio > 0.0 && self.phase1.mask_ratio < 1.0) {
            return Err(Error::Config(format!(
                "mask_ratio {} must lie in (0, 1)",
                self.phase1.mask_ratio
            )));
        }
        for (what, v) in [
            ("phase1.lr", self.phase1.lr),
            ("phase2.lr", self.phase2.lr),
        ] {
            if v <= 0.0 {
                return Err(Error::Config(format!("{what} must be positive, got {v}")));
            }
        }
        if self.phase1.weight_decay < 0.0 || self.phase2.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.phase1.batch_size == 0 || self.phase2.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    /// Width of the padded projection head.
    pub fn k_pad(&self) -> usize {
        match self.channel_assignment {
            ChannelAssignment::Shared => {
                self.modalities.iter().map(|m| m.num_classes()).max().unwrap_or(1)
            }
            ChannelAssignment::Disjoint => {
                // Background stays shared; every foreground entry is distinct.
                1 + self.modalities.iter().map(|m| m.num_classes() - 1).sum::<usize>()
            }
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            num_experts: self.moe.num_experts,
            hidden_ratio: self.moe.hidden_ratio,
            gate_granularity: self.moe.gate_granularity,
            placement: self.phase2.moe_placement,
            gated: true,
            k_pad: self.k_pad(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            _ => serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::to_string_pretty(self)
                .map_err(|e| Error::Config(format!("serialize: {e}")))?,
            _ => serde_json::to_string_pretty(self)
                .map_err(|e| Error::Config(format!("serialize: {e}")))?,
        };
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Full architectural description: everything the builder and the parameter
/// accounting need, nothing about training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_experts: usize,
    pub hidden_ratio: usize,
    pub gate_granularity: GateGranularity,
    pub placement: MoePlacement,
    /// When false, mixture sites average experts uniformly and carry no
    /// gating parameters (the gating-network-off ablation).
    pub gated: bool,
    pub k_pad: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_experts == 0 {
            return Err(Error::Config("num_experts must be at least 1".into()));
        }
        if self.hidden_ratio == 0 {
            return Err(Error::Config("hidden_ratio must be positive".into()));
        }
        if self.k_pad == 0 {
            return Err(Error::Config("k_pad must be positive".into()));
        }
        Ok(())
    }

    /// Channel width of every block position that hosts a mixture layer,
    /// in construction order (encoder stages, bottleneck, decoder stages).
    pub fn moe_site_dims(&self) -> Vec<usize> {
        let bb = &self.backbone;
        let n = bb.num_stages();
        let mut dims = Vec::new();
        if self.placement.in_encoder() {
            for s in 0..n.saturating_sub(1) {
                for _ in 0..bb.depths[s] {
                    dims.push(bb.dim_at(s));
                }
            }
            for _ in 0..bb.depths[n - 1] {
                dims.push(bb.dim_at(n - 1));
            }
        }
        if self.placement.in_decoder() {
            for s in (0..n.saturating_sub(1)).rev() {
                for _ in 0..bb.depths[s] {
                    dims.push(bb.dim_at(s));
                }
            }
        }
        dims
    }
}

/// Splitmix-style seed derivation for independent deterministic streams.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
        ExperimentConfig::toy().validate().unwrap();
    }

    #[test]
    fn k_pad_is_max_class_count_in_shared_mode() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.k_pad(), 5);
        let mut disjoint = cfg.clone();
        disjoint.channel_assignment = ChannelAssignment::Disjoint;
        assert_eq!(disjoint.k_pad(), 1 + 3 + 4 + 2);
    }

    #[test]
    fn rejects_odd_depths_and_bad_windows() {
        let mut cfg = ExperimentConfig::default();
        cfg.backbone.depths = vec![2, 3, 2];
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.backbone.img_size = 48; // stage-2 grid 3 not divisible by window 4
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn expert_count_tied_to_modalities() {
        let mut cfg = ExperimentConfig::default();
        cfg.moe.num_experts = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_and_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::toy();
        for name in ["c.toml", "c.json"] {
            let p = dir.path().join(name);
            cfg.save(&p).unwrap();
            let loaded = ExperimentConfig::load(&p).unwrap();
            assert_eq!(loaded.backbone.img_size, 32);
            assert_eq!(loaded.modalities.len(), 3);
        }
    }

    #[test]
    fn moe_sites_follow_placement() {
        let cfg = ExperimentConfig::toy();
        let mut mc = cfg.model_config();
        mc.placement = MoePlacement::Both;
        // depths [2,2]: encoder stage0 2 blocks @24, bottleneck 2 @48, decoder 2 @24
        assert_eq!(mc.moe_site_dims(), vec![24, 24, 48, 48, 24, 24]);
        mc.placement = MoePlacement::EncoderOnly;
        assert_eq!(mc.moe_site_dims(), vec![24, 24, 48, 48]);
        mc.placement = MoePlacement::DecoderOnly;
        assert_eq!(mc.moe_site_dims(), vec![24, 24]);
        mc.placement = MoePlacement::None;
        assert!(mc.moe_site_dims().is_empty());
    }
}
