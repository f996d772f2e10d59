//! Dice / IoU metrics, model evaluation, and parameter accounting.
//!
//! Metrics stay in `[0, 1]` internally; percent formatting is a
//! presentation concern. Per-class aggregation over a corpus includes a
//! sample when the class is present in its truth or its prediction, so
//! trivially-absent structures do not inflate the averages.

use serde::{Deserialize, Serialize};

use autograd::param::Module;
use autograd::Tape;

use crate::backbone::{ForwardOpts, SegModel};
use crate::config::MetricsFlags;
use crate::data::Corpus;
use crate::heads::LabelSpace;
use crate::{Error, Result};

pub const EVAL_REPORT_VERSION: u32 = 1;

fn counts(pred: &[u16], truth: &[u16], class: u16) -> (u64, u64, u64) {
    let mut inter = 0u64;
    let mut p = 0u64;
    let mut t = 0u64;
    for (&a, &b) in pred.iter().zip(truth) {
        let pa = a == class;
        let tb = b == class;
        inter += (pa && tb) as u64;
        p += pa as u64;
        t += tb as u64;
    }
    (inter, p, t)
}

fn check_same_shape(pred: &[u16], truth: &[u16]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Data(format!(
            "mask sizes differ: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Dice similarity `2|P∩T| / (|P| + |T|)` for one class.
pub fn dice(pred: &[u16], truth: &[u16], class: u16, empty_is_one: bool) -> Result<f64> {
    check_same_shape(pred, truth)?;
    let (inter, p, t) = counts(pred, truth, class);
    if p + t == 0 {
        return Ok(if empty_is_one { 1.0 } else { 0.0 });
    }
    Ok(2.0 * inter as f64 / (p + t) as f64)
}

/// Intersection over union `|P∩T| / |P∪T|` for one class.
pub fn miou(pred: &[u16], truth: &[u16], class: u16, empty_is_one: bool) -> Result<f64> {
    check_same_shape(pred, truth)?;
    let (inter, p, t) = counts(pred, truth, class);
    let union = p + t - inter;
    if union == 0 {
        return Ok(if empty_is_one { 1.0 } else { 0.0 });
    }
    Ok(inter as f64 / union as f64)
}

/// Argmax over a sample's selected channels, emitting local class indices.
pub fn predict_local_mask(
    logits: &[f32],
    sample: usize,
    hw: usize,
    k_pad: usize,
    channels: &[usize],
) -> Vec<u16> {
    let mut out = Vec::with_capacity(hw);
    for pix in 0..hw {
        let base = (sample * hw + pix) * k_pad;
        let mut best = 0usize;
        let mut best_v = f32::NEG_INFINITY;
        for (local, &ch) in channels.iter().enumerate() {
            let v = logits[base + ch];
            if v > best_v {
                best_v = v;
                best = local;
            }
        }
        out.push(best as u16);
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetric {
    pub class_id: usize,
    pub name: String,
    pub dsc: f64,
    pub iou: f64,
    /// Samples that entered the average (class present in truth or
    /// prediction); 0 means the metric defaulted to the empty convention.
    pub samples_counted: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModalityEval {
    pub modality_id: usize,
    pub name: String,
    pub per_class: Vec<ClassMetric>,
    pub mean_dsc: f64,
    pub mean_iou: f64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub version: u32,
    pub include_background: bool,
    pub per_modality: Vec<ModalityEval>,
    pub mean_dsc: f64,
    pub mean_iou: f64,
    pub sample_count: usize,
}

/// Runs the model over the corpus and aggregates per-class metrics.
pub fn evaluate(
    model: &SegModel,
    corpus: &Corpus,
    space: &LabelSpace,
    flags: &MetricsFlags,
    batch_size: usize,
) -> Result<EvalResult> {
    let k_pad = model.cfg.k_pad;
    space.check_head_rows(model.head.w.tensor.shape[0])?;
    let hw = corpus.img_size * corpus.img_size;

    // (modality, local class) -> accumulated (dice, iou, n)
    let mut acc: std::collections::BTreeMap<(usize, usize), (f64, f64, usize)> =
        std::collections::BTreeMap::new();
    let mut sample_counts: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();

    for chunk in corpus.samples.chunks(batch_size.max(1)) {
        let b = chunk.len();
        let mut data = Vec::with_capacity(b * corpus.in_channels * hw);
        for s in chunk {
            data.extend_from_slice(&s.image);
        }
        let mut tape = Tape::new();
        let images = tape.constant(data, vec![b, corpus.in_channels, corpus.img_size, corpus.img_size])?;
        let out = model.forward(&mut tape, images, b, ForwardOpts::default())?;
        let logits = tape.data(out.tokens);

        for (i, s) in chunk.iter().enumerate() {
            let channels = &space.modality(s.modality_id)?.channels;
            let pred = predict_local_mask(logits, i, hw, k_pad, channels);
            *sample_counts.entry(s.modality_id).or_default() += 1;
            let start = if flags.include_background { 0 } else { 1 };
            for local in start..channels.len() {
                let cls = local as u16;
                let in_truth = s.mask.iter().any(|&v| v == cls);
                let in_pred = pred.iter().any(|&v| v == cls);
                if !in_truth && !in_pred {
                    continue;
                }
                let d = dice(&pred, &s.mask, cls, flags.empty_dice_is_one)?;
                let j = miou(&pred, &s.mask, cls, flags.empty_dice_is_one)?;
                let e = acc.entry((s.modality_id, local)).or_insert((0.0, 0.0, 0));
                e.0 += d;
                e.1 += j;
                e.2 += 1;
            }
        }
    }

    let empty_default = if flags.empty_dice_is_one { 1.0 } else { 0.0 };
    let mut per_modality = Vec::new();
    for m in &space.modalities {
        let n_samples = sample_counts.get(&m.modality_id).copied().unwrap_or(0);
        if n_samples == 0 {
            continue;
        }
        let start = if flags.include_background { 0 } else { 1 };
        let mut per_class = Vec::new();
        for local in start..m.class_ids.len() {
            let (d, j, n) = acc.get(&(m.modality_id, local)).copied().unwrap_or((0.0, 0.0, 0));
            let (dsc, iou) = if n > 0 {
                (d / n as f64, j / n as f64)
            } else {
                (empty_default, empty_default)
            };
            per_class.push(ClassMetric {
                class_id: m.class_ids[local],
                name: space.class_name(m.class_ids[local]).to_string(),
                dsc,
                iou,
                samples_counted: n,
            });
        }
        let mean_dsc = per_class.iter().map(|c| c.dsc).sum::<f64>() / per_class.len().max(1) as f64;
        let mean_iou = per_class.iter().map(|c| c.iou).sum::<f64>() / per_class.len().max(1) as f64;
        per_modality.push(ModalityEval {
            modality_id: m.modality_id,
            name: m.name.clone(),
            per_class,
            mean_dsc,
            mean_iou,
            sample_count: n_samples,
        });
    }

    let n_mod = per_modality.len().max(1) as f64;
    Ok(EvalResult {
        version: EVAL_REPORT_VERSION,
        include_background: flags.include_background,
        mean_dsc: per_modality.iter().map(|m| m.mean_dsc).sum::<f64>() / n_mod,
        mean_iou: per_modality.iter().map(|m| m.mean_iou).sum::<f64>() / n_mod,
        sample_count: per_modality.iter().map(|m| m.sample_count).sum(),
        per_modality,
    })
}

// ── parameter accounting ────────────────────────────────────────────

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub total: usize,
    pub attention: usize,
    pub experts: usize,
    pub gating: usize,
    pub heads: usize,
    pub other: usize,
}

/// Groups parameter counts by role, read off the name registry.
pub fn count_params(m: &dyn Module) -> ParamBreakdown {
    let mut b = ParamBreakdown::default();
    m.visit_params(&mut |p| {
        let n = p.numel();
        b.total += n;
        if p.name.contains(".attn.") {
            b.attention += n;
        } else if p.name.contains(".moe.expert") {
            b.experts += n;
        } else if p.name.contains(".moe.gate") {
            b.gating += n;
        } else if p.name.starts_with("head.") || p.name.starts_with("recon.") {
            b.heads += n;
        } else {
            b.other += n;
        }
    });
    b
}

// ── report schema validation ────────────────────────────────────────

/// Minimal JSON-schema subset: `type`, `properties`, `required`, `items`.
/// Enough to pin the report layout without pulling in a validator crate.
pub fn validate_against_schema(value: &serde_json::Value, schema: &serde_json::Value) -> Result<()> {
    fn fail(path: &str, msg: String) -> Result<()> {
        Err(Error::Data(format!("schema violation at {path}: {msg}")))
    }
    fn walk(value: &serde_json::Value, schema: &serde_json::Value, path: &str) -> Result<()> {
        if let Some(ty) = schema.get("type").and_then(|t| t.as_str()) {
            let ok = match ty {
                "object" => value.is_object(),
                "array" => value.is_array(),
                "string" => value.is_string(),
                "number" => value.is_number(),
                "integer" => value.is_i64() || value.is_u64(),
                "boolean" => value.is_boolean(),
                _ => true,
            };
            if !ok {
                return fail(path, format!("expected {ty}, got {value}"));
            }
        }
        if let Some(req) = schema.get("required").and_then(|r| r.as_array()) {
            for key in req {
                let key = key.as_str().unwrap_or_default();
                if value.get(key).is_none() {
                    return fail(path, format!("missing required field '{key}'"));
                }
            }
        }
        if let Some(props) = schema.get("properties").and_then(|p| p.as_object()) {
            for (key, sub) in props {
                if let Some(v) = value.get(key) {
                    walk(v, sub, &format!("{path}.{key}"))?;
                }
            }
        }
        if let Some(items) = schema.get("items") {
            if let Some(arr) = value.as_array() {
                for (i, v) in arr.iter().enumerate() {
                    walk(v, items, &format!("{path}[{i}]"))?;
                }
            }
        }
        Ok(())
    }
    walk(value, schema, "$")
}

/// The schema shipped with the crate, versioned alongside the report.
pub fn eval_report_schema() -> serde_json::Value {
    serde_json::from_str(include_str!("../schemas/eval_report_v1.schema.json"))
        .expect("shipped schema parses")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_masks_score_one() {
        let m: Vec<u16> = vec![0, 1, 1, 0, 2, 1];
        assert_eq!(dice(&m, &m, 1, true).unwrap(), 1.0);
        assert_eq!(miou(&m, &m, 1, true).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let a: Vec<u16> = vec![1, 1, 0, 0];
        let b: Vec<u16> = vec![0, 0, 1, 1];
        assert_eq!(dice(&a, &b, 1, true).unwrap(), 0.0);
        assert_eq!(miou(&a, &b, 1, true).unwrap(), 0.0);
    }

    #[test]
    fn shifted_block_hand_count() {
        // 4x4 grid: truth block at cols 0..2 rows 0..2, pred shifted one col
        let mut truth = vec![0u16; 16];
        let mut pred = vec![0u16; 16];
        for r in 0..2 {
            for c in 0..2 {
                truth[r * 4 + c] = 1;
                pred[r * 4 + c + 1] = 1;
            }
        }
        assert_eq!(dice(&pred, &truth, 1, true).unwrap(), 0.5);
        let iou = miou(&pred, &truth, 1, true).unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn both_empty_follows_convention() {
        let a = vec![0u16; 8];
        assert_eq!(dice(&a, &a, 3, true).unwrap(), 1.0);
        assert_eq!(dice(&a, &a, 3, false).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = vec![0u16; 8];
        let b = vec![0u16; 9];
        assert!(dice(&a, &b, 0, true).is_err());
    }

    #[test]
    fn symmetry_and_iou_dice_identity() {
        let mut state = 0x12345u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as u32
        };
        for _ in 0..100 {
            let a: Vec<u16> = (0..64).map(|_| (next() % 3) as u16).collect();
            let b: Vec<u16> = (0..64).map(|_| (next() % 3) as u16).collect();
            for cls in 0..3u16 {
                let d1 = dice(&a, &b, cls, true).unwrap();
                let d2 = dice(&b, &a, cls, true).unwrap();
                assert_eq!(d1, d2);
                let j = miou(&a, &b, cls, true).unwrap();
                assert!((j - d1 / (2.0 - d1)).abs() < 1e-9, "iou {j} vs dice {d1}");
            }
        }
    }

    #[test]
    fn brute_force_oracle_agreement() {
        // oracle: explicit pixel-set construction
        let oracle = |p: &[u16], t: &[u16], c: u16| -> (f64, f64) {
            let ps: std::collections::HashSet<usize> =
                p.iter().enumerate().filter(|(_, &v)| v == c).map(|(i, _)| i).collect();
            let ts: std::collections::HashSet<usize> =
                t.iter().enumerate().filter(|(_, &v)| v == c).map(|(i, _)| i).collect();
            let inter = ps.intersection(&ts).count() as f64;
            let d = if ps.is_empty() && ts.is_empty() {
                1.0
            } else {
                2.0 * inter / (ps.len() + ts.len()) as f64
            };
            let uni = ps.union(&ts).count() as f64;
            let j = if uni == 0.0 { 1.0 } else { inter / uni };
            (d, j)
        };
        let mut state = 99u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as u32
        };
        for _ in 0..100 {
            let a: Vec<u16> = (0..100).map(|_| (next() % 4) as u16).collect();
            let b: Vec<u16> = (0..100).map(|_| (next() % 4) as u16).collect();
            for cls in 0..4u16 {
                let (od, oj) = oracle(&a, &b, cls);
                assert_eq!(dice(&a, &b, cls, true).unwrap(), od);
                assert_eq!(miou(&a, &b, cls, true).unwrap(), oj);
            }
        }
    }

    #[test]
    fn argmax_prediction_uses_selected_channels_only() {
        // k_pad 4, channels [0, 2]: channel 1 and 3 are noise
        let logits = vec![
            0.0, 9.0, 1.0, 9.0, // pixel 0: ch0=0 < ch2=1 -> local 1
            5.0, 9.0, 1.0, 9.0, // pixel 1: ch0=5 > ch2=1 -> local 0
        ];
        let pred = predict_local_mask(&logits, 0, 2, 4, &[0, 2]);
        assert_eq!(pred, vec![1, 0]);
    }

    #[test]
    fn schema_validator_catches_missing_fields() {
        let schema = eval_report_schema();
        let report = EvalResult {
            version: EVAL_REPORT_VERSION,
            include_background: false,
            per_modality: vec![],
            mean_dsc: 0.5,
            mean_iou: 0.4,
            sample_count: 0,
        };
        let v = serde_json::to_value(&report).unwrap();
        validate_against_schema(&v, &schema).unwrap();

        let mut broken = v.clone();
        broken.as_object_mut().unwrap().remove("mean_dsc");
        assert!(validate_against_schema(&broken, &schema).is_err());

        let mut wrong_type = v;
        wrong_type["sample_count"] = serde_json::json!("three");
        assert!(validate_against_schema(&wrong_type, &schema).is_err());
    }
}
