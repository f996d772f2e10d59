//! Deterministic synthetic multimodal segmentation corpus.
//!
//! Three modality styles stand in for CT / MRI / CE-MRI: same shape
//! vocabulary, different intensity statistics (plain, gamma-compressed and
//! inverted, contrast-enhanced with bright rims around blobs) and partially
//! overlapping class sets. Geometry is rasterized with integer arithmetic
//! and intensities use only exactly-rounded float ops (+, *, sqrt) plus
//! integer-derived noise, so a given seed produces the same bytes on any
//! platform.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use autograd::checkpoint::{load_records, save_records, Record};

use crate::config::{derive_seed, ModalityDescriptor};
use crate::{Error, Result};

pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Rect,
    Ring,
}

/// Global class: rendering shape, base intensity, and size range (radius or
/// half-extent, in pixels).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthClass {
    pub id: usize,
    pub name: String,
    pub shape: ShapeKind,
    pub intensity: f32,
    pub min_size: usize,
    pub max_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthModality {
    pub modality_id: usize,
    pub name: String,
    /// Global class ids, background 0 first.
    pub class_ids: Vec<usize>,
    /// Intensity transform: exact for 1.0 (identity), 2.0 (square),
    /// 0.5 (sqrt); other exponents fall back to powf.
    pub gamma: f32,
    pub invert: bool,
    /// Bright annulus around every blob, labeled as part of the blob.
    pub enhance_rims: bool,
    pub shapes_min: usize,
    pub shapes_max: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub img_size: usize,
    pub seed: u64,
    pub samples_per_modality: usize,
    /// Standard deviation of the additive uniform noise.
    pub noise_sigma: f32,
    pub background_intensity: f32,
    pub rim_intensity: f32,
    pub rim_thickness: usize,
    pub classes: Vec<SynthClass>,
    pub modalities: Vec<SynthModality>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec::default_profile(64, 60, 7)
    }
}

impl SynthSpec {
    /// Shared-vocabulary profile: classes are separable by intensity (gaps
    /// of at least four noise sigmas) with shapes no smaller than 6 px
    /// across, easy for a small network but not degenerate.
    pub fn default_profile(img_size: usize, samples_per_modality: usize, seed: u64) -> Self {
        let s = img_size;
        let classes = vec![
            SynthClass { id: 1, name: "blob".into(), shape: ShapeKind::Disk, intensity: 0.35, min_size: s / 8, max_size: s / 5 },
            SynthClass { id: 2, name: "box".into(), shape: ShapeKind::Rect, intensity: 0.50, min_size: s / 8, max_size: s / 5 },
            SynthClass { id: 3, name: "ring".into(), shape: ShapeKind::Ring, intensity: 0.65, min_size: s / 7, max_size: s / 5 },
            SynthClass { id: 4, name: "spot".into(), shape: ShapeKind::Disk, intensity: 0.95, min_size: s / 10, max_size: s / 8 },
        ];
        let modalities = vec![
            SynthModality {
                modality_id: 0,
                name: "ct".into(),
                class_ids: vec![0, 1, 2, 3],
                gamma: 1.0,
                invert: false,
                enhance_rims: false,
                shapes_min: 1,
                shapes_max: 3,
            },
            SynthModality {
                modality_id: 1,
                name: "mri".into(),
                class_ids: vec![0, 1, 2, 3, 4],
                gamma: 2.0,
                invert: true,
                enhance_rims: false,
                shapes_min: 1,
                shapes_max: 3,
            },
            SynthModality {
                modality_id: 2,
                name: "cemri".into(),
                class_ids: vec![0, 1, 4],
                gamma: 1.0,
                invert: false,
                enhance_rims: true,
                shapes_min: 1,
                shapes_max: 3,
            },
        ];
        SynthSpec {
            img_size,
            seed,
            samples_per_modality,
            noise_sigma: 0.05,
            background_intensity: 0.08,
            rim_intensity: 0.85,
            rim_thickness: 2,
            classes,
            modalities,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.img_size < 16 {
            return Err(Error::Config("img_size must be at least 16".into()));
        }
        if self.modalities.is_empty() {
            return Err(Error::Config("need at least one modality".into()));
        }
        for m in &self.modalities {
            if m.class_ids.first() != Some(&0) {
                return Err(Error::Config(format!(
                    "modality '{}' must list background id 0 first",
                    m.name
                )));
            }
            for &cid in &m.class_ids[1..] {
                if !self.classes.iter().any(|c| c.id == cid) {
                    return Err(Error::Config(format!(
                        "modality '{}' references unknown class id {cid}",
                        m.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Modality descriptors matching this corpus, for the experiment config.
    pub fn descriptors(&self) -> Vec<ModalityDescriptor> {
        self.modalities
            .iter()
            .map(|m| ModalityDescriptor {
                modality_id: m.modality_id,
                name: m.name.clone(),
                class_ids: m.class_ids.clone(),
                in_channels: 1,
            })
            .collect()
    }

    pub fn class_names(&self) -> BTreeMap<usize, String> {
        let mut names: BTreeMap<usize, String> =
            self.classes.iter().map(|c| (c.id, c.name.clone())).collect();
        names.insert(0, "background".into());
        names
    }

    pub fn load(path: &Path) -> Result<SynthSpec> {
        let text = std::fs::read_to_string(path)?;
        let spec: SynthSpec = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            _ => serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        };
        spec.validate()?;
        Ok(spec)
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

/// One (image, mask, modality) triple. Mask entries are local class
/// indices: positions within the modality's `class_ids` list.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: usize,
    pub modality_id: usize,
    /// `[in_channels, H, W]` in `[0, 1]`.
    pub image: Vec<f32>,
    /// `[H, W]` local class indices.
    pub mask: Vec<u16>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub img_size: usize,
    pub in_channels: usize,
    pub samples: Vec<SampleRecord>,
}

impl Corpus {
    pub fn modality_indices(&self, modality_id: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.modality_id == modality_id)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn modality_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.samples.iter().map(|s| s.modality_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

struct Placed {
    cx: i64,
    cy: i64,
    bound: i64,
}

fn overlaps(placed: &[Placed], cx: i64, cy: i64, bound: i64) -> bool {
    placed.iter().any(|p| {
        let (dx, dy) = (p.cx - cx, p.cy - cy);
        let min = p.bound + bound + 1;
        dx * dx + dy * dy < min * min
    })
}

fn rasterize(
    canvas: &mut [f32],
    mask: &mut [u16],
    img: usize,
    class: &SynthClass,
    local_idx: u16,
    cx: i64,
    cy: i64,
    size: i64,
    extra: i64,
    rng: &mut ChaCha8Rng,
    rim: Option<(f32, i64)>,
) {
    let img_i = img as i64;
    let paint = |canvas: &mut [f32], mask: &mut [u16], x: i64, y: i64, v: f32, label: u16| {
        if x >= 0 && y >= 0 && x < img_i && y < img_i {
            let i = (y * img_i + x) as usize;
            canvas[i] = v;
            mask[i] = label;
        }
    };
    match class.shape {
        ShapeKind::Disk => {
            for y in cy - size..=cy + size {
                for x in cx - size..=cx + size {
                    let (dx, dy) = (x - cx, y - cy);
                    if dx * dx + dy * dy <= size * size {
                        paint(canvas, mask, x, y, class.intensity, local_idx);
                    }
                }
            }
            if let Some((rim_v, thick)) = rim {
                let outer = size + thick;
                for y in cy - outer..=cy + outer {
                    for x in cx - outer..=cx + outer {
                        let (dx, dy) = (x - cx, y - cy);
                        let d2 = dx * dx + dy * dy;
                        if d2 > size * size && d2 <= outer * outer {
                            paint(canvas, mask, x, y, rim_v, local_idx);
                        }
                    }
                }
            }
        }
        ShapeKind::Rect => {
            // extra carries the second half-extent
            let (hw, hh) = (size, extra.max(2));
            for y in cy - hh..=cy + hh {
                for x in cx - hw..=cx + hw {
                    paint(canvas, mask, x, y, class.intensity, local_idx);
                }
            }
        }
        ShapeKind::Ring => {
            let outer = size;
            let inner = (size - (size / 3).max(2)).max(1);
            for y in cy - outer..=cy + outer {
                for x in cx - outer..=cx + outer {
                    let (dx, dy) = (x - cx, y - cy);
                    let d2 = dx * dx + dy * dy;
                    if d2 <= outer * outer && d2 > inner * inner {
                        paint(canvas, mask, x, y, class.intensity, local_idx);
                    }
                }
            }
        }
    }
    let _ = rng;
}

fn apply_gamma(v: f32, gamma: f32) -> f32 {
    if gamma == 1.0 {
        v
    } else if gamma == 2.0 {
        v * v
    } else if gamma == 0.5 {
        v.sqrt()
    } else {
        v.powf(gamma)
    }
}

fn generate_sample(spec: &SynthSpec, modality: &SynthModality, sample_id: usize) -> SampleRecord {
    let img = spec.img_size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        spec.seed,
        ((modality.modality_id as u64) << 32) | sample_id as u64,
    ));
    let mut canvas = vec![spec.background_intensity; img * img];
    let mut mask = vec![0u16; img * img];

    let n_shapes = rng.random_range(modality.shapes_min..=modality.shapes_max);
    let foreground = &modality.class_ids[1..];
    let mut placed: Vec<Placed> = Vec::new();

    for _ in 0..n_shapes {
        if foreground.is_empty() {
            break;
        }
        let cid = foreground[rng.random_range(0..foreground.len())];
        let class = spec.classes.iter().find(|c| c.id == cid).expect("validated");
        let local_idx = modality.class_ids.iter().position(|&c| c == cid).unwrap() as u16;
        let size = rng.random_range(class.min_size.max(2)..=class.max_size.max(3)) as i64;
        let extra = if class.shape == ShapeKind::Rect {
            rng.random_range(class.min_size.max(2)..=class.max_size.max(3)) as i64
        } else {
            0
        };
        let rim_extra = if modality.enhance_rims && class.shape == ShapeKind::Disk && cid == 1 {
            spec.rim_thickness as i64
        } else {
            0
        };
        let bound = size.max(extra) + rim_extra;
        let lo = bound + 1;
        let hi = img as i64 - bound - 2;
        if hi <= lo {
            continue;
        }
        // bounded retries; on failure the sample simply has fewer shapes
        for _attempt in 0..20 {
            let cx = rng.random_range(lo..=hi);
            let cy = rng.random_range(lo..=hi);
            if overlaps(&placed, cx, cy, bound) {
                continue;
            }
            let rim = (rim_extra > 0).then_some((spec.rim_intensity, rim_extra));
            rasterize(&mut canvas, &mut mask, img, class, local_idx, cx, cy, size, extra, &mut rng, rim);
            placed.push(Placed { cx, cy, bound });
            break;
        }
    }

    // modality intensity style, then integer-lattice noise, then clamp
    let amp = spec.noise_sigma * 3.0f32.sqrt();
    let image: Vec<f32> = canvas
        .iter()
        .map(|&v| {
            let mut v = apply_gamma(v, modality.gamma);
            if modality.invert {
                v = 1.0 - v;
            }
            let u = rng.next_u32();
            let noise = (u as f32 / 4294967296.0 - 0.5) * 2.0 * amp;
            (v + noise).clamp(0.0, 1.0)
        })
        .collect();

    SampleRecord { sample_id, modality_id: modality.modality_id, image, mask }
}

/// Seed-deterministic corpus; per-sample RNG streams derive from
/// (seed, modality, index) so generation order cannot matter.
pub fn generate(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(spec.modalities.len() * spec.samples_per_modality);
    let mut sample_id = 0usize;
    for modality in &spec.modalities {
        for _ in 0..spec.samples_per_modality {
            samples.push(generate_sample(spec, modality, sample_id));
            sample_id += 1;
        }
    }
    Ok(Corpus { img_size: spec.img_size, in_channels: 1, samples })
}

// ── on-disk layout: index.json + samples/{id}.bin ───────────────────

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    id: usize,
    modality_id: usize,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusIndex {
    version: u32,
    img_size: usize,
    in_channels: usize,
    count: usize,
    samples: Vec<IndexEntry>,
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("samples"))?;
    let mut entries = Vec::with_capacity(corpus.samples.len());
    for s in &corpus.samples {
        let file = format!("samples/{}.bin", s.sample_id);
        let records = vec![
            Record {
                name: "image".into(),
                shape: vec![corpus.in_channels, corpus.img_size, corpus.img_size],
                data: s.image.clone(),
            },
            Record {
                name: "mask".into(),
                shape: vec![corpus.img_size, corpus.img_size],
                data: s.mask.iter().map(|&v| v as f32).collect(),
            },
            Record { name: "modality_id".into(), shape: vec![1], data: vec![s.modality_id as f32] },
            Record { name: "sample_id".into(), shape: vec![1], data: vec![s.sample_id as f32] },
        ];
        save_records(&dir.join(&file), &records)?;
        entries.push(IndexEntry { id: s.sample_id, modality_id: s.modality_id, file });
    }
    let index = CorpusIndex {
        version: CORPUS_VERSION,
        img_size: corpus.img_size,
        in_channels: corpus.in_channels,
        count: entries.len(),
        samples: entries,
    };
    let text = serde_json::to_string_pretty(&index)
        .map_err(|e| Error::Data(format!("index serialize: {e}")))?;
    std::fs::write(dir.join("index.json"), text)?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let index_path = dir.join("index.json");
    let text = std::fs::read_to_string(&index_path)?;
    // unknown future fields in the index are ignored by construction
    let index: CorpusIndex = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", index_path.display())))?;
    if index.version != CORPUS_VERSION {
        return Err(Error::Data(format!("unsupported corpus version {}", index.version)));
    }
    if index.count != index.samples.len() {
        return Err(Error::Data(format!(
            "corpus index records count {} but lists {} samples",
            index.count,
            index.samples.len()
        )));
    }
    let mut samples = Vec::with_capacity(index.samples.len());
    for entry in &index.samples {
        let records = load_records(&dir.join(&entry.file))
            .map_err(|e| Error::Data(format!("sample {}: {e}", entry.id)))?;
        let find = |name: &str| -> Result<&Record> {
            records
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::Data(format!("sample {} is missing '{name}'", entry.id)))
        };
        let image = find("image")?;
        let mask = find("mask")?;
        if image.shape != vec![index.in_channels, index.img_size, index.img_size] {
            return Err(Error::Data(format!("sample {}: image shape {:?}", entry.id, image.shape)));
        }
        let mask_vals: Vec<u16> = mask
            .data
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= u16::MAX as f32 {
                    Ok(v as u16)
                } else {
                    Err(Error::Data(format!("sample {}: non-integer mask value {v}", entry.id)))
                }
            })
            .collect::<Result<_>>()?;
        samples.push(SampleRecord {
            sample_id: entry.id,
            modality_id: entry.modality_id,
            image: image.data.clone(),
            mask: mask_vals,
        });
    }
    Ok(Corpus { img_size: index.img_size, in_channels: index.in_channels, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec::default_profile(32, 6, 11)
    }

    #[test]
    fn zero_shapes_means_all_background() {
        let mut spec = small_spec();
        for m in &mut spec.modalities {
            m.shapes_min = 0;
            m.shapes_max = 0;
        }
        let corpus = generate(&spec).unwrap();
        for s in &corpus.samples {
            assert!(s.mask.iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = small_spec();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.samples.len(), b.samples.len());
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x, y);
            let xb: Vec<u32> = x.image.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.image.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn samples_are_bounded_and_labels_local() {
        let spec = small_spec();
        let corpus = generate(&spec).unwrap();
        assert_eq!(corpus.samples.len(), 18);
        for s in &corpus.samples {
            assert!(s.image.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
            let k = spec.modalities[s.modality_id].class_ids.len();
            assert!(s.mask.iter().all(|&m| (m as usize) < k));
        }
    }

    #[test]
    fn every_class_appears_often_enough() {
        let spec = SynthSpec::default_profile(32, 1000, 3);
        let corpus = generate(&spec).unwrap();
        for m in &spec.modalities {
            let indices = corpus.modality_indices(m.modality_id);
            for local in 1..m.class_ids.len() {
                let with = indices
                    .iter()
                    .filter(|&&i| corpus.samples[i].mask.iter().any(|&v| v as usize == local))
                    .count();
                let frac = with as f64 / indices.len() as f64;
                assert!(
                    frac >= 0.05,
                    "modality {} class {} appears in {frac:.3} of samples",
                    m.name,
                    m.class_ids[local]
                );
            }
        }
    }

    #[test]
    fn modality_styles_differ() {
        let spec = small_spec();
        let corpus = generate(&spec).unwrap();
        // inverted modality has bright background
        let bright = corpus.samples.iter().find(|s| s.modality_id == 1).unwrap();
        let bg_mean: f32 = bright
            .image
            .iter()
            .zip(&bright.mask)
            .filter(|(_, &m)| m == 0)
            .map(|(v, _)| *v)
            .sum::<f32>()
            / bright.mask.iter().filter(|&&m| m == 0).count() as f32;
        assert!(bg_mean > 0.9, "{bg_mean}");

        // rim modality paints pixels near the rim intensity
        let rimmed = corpus
            .samples
            .iter()
            .filter(|s| s.modality_id == 2)
            .flat_map(|s| s.image.iter())
            .filter(|&&v| (v - 0.85).abs() < 0.1)
            .count();
        assert!(rimmed > 0);
    }

    #[test]
    fn corpus_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let corpus = generate(&spec).unwrap();
        save_corpus(&corpus, dir.path()).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(corpus.samples.len(), loaded.samples.len());
        for (a, b) in corpus.samples.iter().zip(&loaded.samples) {
            assert_eq!(a.mask, b.mask);
            let ab: Vec<u32> = a.image.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.image.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn index_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate(&small_spec()).unwrap();
        save_corpus(&corpus, dir.path()).unwrap();
        let index_path = dir.path().join("index.json");
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&index_path).unwrap()).unwrap();
        v["count"] = serde_json::json!(3);
        std::fs::write(&index_path, serde_json::to_string(&v).unwrap()).unwrap();
        assert!(load_corpus(dir.path()).is_err());
    }

    #[test]
    fn unknown_index_fields_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate(&small_spec()).unwrap();
        save_corpus(&corpus, dir.path()).unwrap();
        let index_path = dir.path().join("index.json");
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&index_path).unwrap()).unwrap();
        v["future_field"] = serde_json::json!({"anything": [1, 2, 3]});
        std::fs::write(&index_path, serde_json::to_string(&v).unwrap()).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(loaded.samples.len(), corpus.samples.len());
    }

    #[test]
    fn spec_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        for name in ["s.toml", "s.json"] {
            let p = dir.path().join(name);
            spec.save(&p).unwrap();
            let loaded = SynthSpec::load(&p).unwrap();
            assert_eq!(loaded.img_size, 32);
            assert_eq!(loaded.modalities.len(), 3);
        }
    }
}
