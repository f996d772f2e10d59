//! Dynamic selection over the padded projection head.
//!
//! The head is sized to `k_pad` channels, the widest class set over all
//! modalities. Each sample gathers only the channels of the classes its
//! modality actually has, so the loss and metrics operate on native label
//! dimensions and batches can mix modalities in any order. Channels outside
//! a sample's selection receive no gradient from that sample.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use autograd::{Tape, TensorId};
use serde::{Deserialize, Serialize};

use crate::config::{ChannelAssignment, ModalityDescriptor};
use crate::{Error, Result};

pub const LABEL_SPACE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassDef {
    pub id: usize,
    pub name: String,
}

/// One modality's slice of the padded head: `channels[i]` is the padded
/// channel holding local class `i` (the i-th entry of `class_ids`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModalityChannels {
    pub modality_id: usize,
    pub name: String,
    pub class_ids: Vec<usize>,
    pub channels: Vec<usize>,
}

/// Global class registry plus per-modality channel selections. Serialized
/// as JSON beside every checkpoint; loaders refuse checkpoints whose head
/// width disagrees with `k_pad`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelSpace {
    pub version: u32,
    pub k_pad: usize,
    pub assignment: ChannelAssignment,
    pub classes: Vec<ClassDef>,
    pub modalities: Vec<ModalityChannels>,
}

impl LabelSpace {
    pub fn build(
        modalities: &[ModalityDescriptor],
        assignment: ChannelAssignment,
        class_names: &BTreeMap<usize, String>,
    ) -> Result<LabelSpace> {
        if modalities.is_empty() {
            return Err(Error::Config("label space needs at least one modality".into()));
        }
        let mut globals: Vec<usize> = modalities.iter().flat_map(|m| m.class_ids.iter().copied()).collect();
        globals.sort_unstable();
        globals.dedup();

        let (k_pad, channel_of): (usize, Box<dyn Fn(usize, usize) -> usize>) = match assignment {
            ChannelAssignment::Shared => {
                let k_pad = modalities.iter().map(|m| m.class_ids.len()).max().unwrap();
                // channel = rank of the global id (identity when ids are dense)
                let rank: BTreeMap<usize, usize> =
                    globals.iter().enumerate().map(|(r, &id)| (id, r)).collect();
                if globals.len() > k_pad {
                    return Err(Error::Config(format!(
                        "{} distinct global classes exceed k_pad {k_pad}; shared channel \
                         assignment needs a dense registry",
                        globals.len()
                    )));
                }
                (k_pad, Box::new(move |_mi, class_id| rank[&class_id]))
            }
            ChannelAssignment::Disjoint => {
                // background shares channel 0; every foreground entry is unique
                let mut next = 1usize;
                let mut map: BTreeMap<(usize, usize), usize> = BTreeMap::new();
                for m in modalities {
                    for &cid in &m.class_ids {
                        if cid != 0 {
                            map.insert((m.modality_id, cid), next);
                            next += 1;
                        }
                    }
                }
                (next, Box::new(move |mi, cid| if cid == 0 { 0 } else { map[&(mi, cid)] }))
            }
        };

        let classes = globals
            .iter()
            .map(|&id| ClassDef {
                id,
                name: class_names.get(&id).cloned().unwrap_or_else(|| format!("class{id}")),
            })
            .collect();
        let mods = modalities
            .iter()
            .map(|m| {
                m.validate()?;
                Ok(ModalityChannels {
                    modality_id: m.modality_id,
                    name: m.name.clone(),
                    class_ids: m.class_ids.clone(),
                    channels: m.class_ids.iter().map(|&c| channel_of(m.modality_id, c)).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(LabelSpace { version: LABEL_SPACE_VERSION, k_pad, assignment, classes, modalities: mods })
    }

    pub fn modality(&self, modality_id: usize) -> Result<&ModalityChannels> {
        self.modalities
            .iter()
            .find(|m| m.modality_id == modality_id)
            .ok_or_else(|| Error::Data(format!("modality id {modality_id} not registered in label space")))
    }

    pub fn class_name(&self, id: usize) -> &str {
        self.classes.iter().find(|c| c.id == id).map(|c| c.name.as_str()).unwrap_or("?")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("label space serialize: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<LabelSpace> {
        let text = std::fs::read_to_string(path)?;
        let ls: LabelSpace = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if ls.version != LABEL_SPACE_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported label space version {}",
                path.display(),
                ls.version
            )));
        }
        Ok(ls)
    }

    /// Loaders call this before using a checkpointed head.
    pub fn check_head_rows(&self, head_rows: usize) -> Result<()> {
        if head_rows != self.k_pad {
            return Err(Error::Checkpoint(format!(
                "head has {head_rows} rows but label space expects k_pad {}",
                self.k_pad
            )));
        }
        Ok(())
    }
}

/// Contract seam: the network already emits `k_pad` channels structurally;
/// this asserts it and passes through, so alternate padding strategies have
/// a place to live.
pub fn pad_logits(tape: &Tape, logits: TensorId, k_pad: usize) -> Result<TensorId> {
    let shape = tape.shape(logits);
    if shape.last() != Some(&k_pad) {
        return Err(Error::Data(format!(
            "padded logits have channel dim {:?}, expected k_pad {k_pad}",
            shape.last()
        )));
    }
    Ok(logits)
}

/// Per-sample gather of the channels a sample's modality declares, in
/// `class_ids` order. Input is `[b*hw, k_pad]` row-major over pixels;
/// each output is `[hw, k_i]`.
pub fn select_logits(
    tape: &mut Tape,
    padded: TensorId,
    b: usize,
    hw: usize,
    space: &LabelSpace,
    modality_ids: &[usize],
) -> Result<Vec<TensorId>> {
    let padded = pad_logits(tape, padded, space.k_pad)?;
    if modality_ids.len() != b {
        return Err(Error::Data(format!(
            "batch has {b} samples but {} modality ids were given",
            modality_ids.len()
        )));
    }
    let k_pad = space.k_pad;
    let mut out = Vec::with_capacity(b);
    for (s, &mid) in modality_ids.iter().enumerate() {
        let channels = &space.modality(mid)?.channels;
        let k = channels.len();
        let mut idx = Vec::with_capacity(hw * k);
        for pix in 0..hw {
            let base = (s * hw + pix) * k_pad;
            for &ch in channels {
                idx.push((base + ch) as u32);
            }
        }
        out.push(tape.gather(padded, Arc::new(idx), vec![hw, k])?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct LossFlags {
    pub include_background: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags { include_background: false }
    }
}

const DICE_SMOOTH: f32 = 1.0;

fn check_labels(selected_k: usize, labels: &[u16], sample: usize) -> Result<()> {
    let bad = labels.iter().filter(|&&l| l as usize >= selected_k).count();
    if bad > 0 {
        return Err(Error::LabelOutOfRange { sample, pixels: bad, num_classes: selected_k });
    }
    Ok(())
}

/// Mean over pixels of the negative log-likelihood of the true class.
pub fn cross_entropy_mean(tape: &mut Tape, selected: TensorId, labels: &[u16]) -> Result<TensorId> {
    let k = *tape.shape(selected).last().expect("selected logits have a class axis");
    let hw = labels.len();
    let logsm = tape.log_softmax_last(selected)?;
    let mut pick = vec![0.0f32; hw * k];
    let scale = -1.0 / hw as f32;
    for (pix, &l) in labels.iter().enumerate() {
        pick[pix * k + l as usize] = scale;
    }
    let weighted = tape.mul_const(logsm, Arc::new(pick))?;
    Ok(tape.sum_all(weighted))
}

/// One minus the mean soft Dice over the averaged classes.
pub fn soft_dice_loss(
    tape: &mut Tape,
    selected: TensorId,
    labels: &[u16],
    flags: LossFlags,
) -> Result<TensorId> {
    let k = *tape.shape(selected).last().expect("selected logits have a class axis");
    let hw = labels.len();
    let probs = tape.softmax_last(selected)?;

    let mut onehot = vec![0.0f32; hw * k];
    let mut tsum = vec![0.0f32; k];
    for (pix, &l) in labels.iter().enumerate() {
        onehot[pix * k + l as usize] = 1.0;
        tsum[l as usize] += 1.0;
    }
    let masked = tape.mul_const(probs, Arc::new(onehot))?;
    let inter = tape.sum_axis0(masked, hw, k)?;
    let psum = tape.sum_axis0(probs, hw, k)?;

    let num = tape.affine(inter, 2.0, DICE_SMOOTH);
    let tplus: Vec<f32> = tsum.iter().map(|v| v + DICE_SMOOTH).collect();
    let den = tape.add_cycled_const(psum, Arc::new(tplus))?;
    let dice = tape.div(num, den)?;

    let classes: Vec<u32> = if flags.include_background || k == 1 {
        (0..k as u32).collect()
    } else {
        (1..k as u32).collect()
    };
    let picked = tape.gather(dice, Arc::new(classes.clone()), vec![classes.len()])?;
    let mean = tape.mean_all(picked);
    Ok(tape.affine(mean, -1.0, 1.0))
}

/// Mean over samples of `(cross-entropy + soft Dice) / 2`, each computed
/// only over the sample's selected channels.
pub fn masked_loss(
    tape: &mut Tape,
    selected: &[TensorId],
    labels: &[&[u16]],
    flags: LossFlags,
) -> Result<TensorId> {
    if selected.is_empty() || selected.len() != labels.len() {
        return Err(Error::Data(format!(
            "loss needs matching logits/labels, got {} and {}",
            selected.len(),
            labels.len()
        )));
    }
    let mut total: Option<TensorId> = None;
    for (s, (&sel, &lab)) in selected.iter().zip(labels).enumerate() {
        let k = *tape.shape(sel).last().expect("class axis");
        check_labels(k, lab, s)?;
        let ce = cross_entropy_mean(tape, sel, lab)?;
        let dl = soft_dice_loss(tape, sel, lab, flags)?;
        let both = tape.add(ce, dl)?;
        let half = tape.affine(both, 0.5, 0.0);
        total = Some(match total {
            Some(acc) => tape.add(acc, half)?,
            None => half,
        });
    }
    Ok(tape.affine(total.expect("non-empty batch"), 1.0 / selected.len() as f32, 0.0))
}
