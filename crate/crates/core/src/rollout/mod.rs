//! Attention rollout: which observed object tokens a prediction token draws on.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};
use crate::pte::{Modality, SequenceLayout};
use crate::tokens::TokenSlot;

/// Default prediction steps for heatmap export.
pub const HEATMAP_STEPS: [usize; 4] = [0, 5, 10, 15];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadAggregation {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    /// Weight of the identity in `residual * I + (1 - residual) * A`.
    pub residual: f64,
    pub heads: HeadAggregation,
    pub include_whole_frame: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            residual: 0.5,
            heads: HeadAggregation::Mean,
            include_whole_frame: false,
        }
    }
}

/// Accumulated attention `[L, L]`; row `i` is how token `i` mixes the inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutMap {
    pub weights: Tensor<f64>,
}

/// Multiply the residual-mixed, row-renormalised per-layer maps,
/// last layer on the left. `mask[j]` excludes key `j`.
pub fn attention_rollout<T: Real>(
    attentions: &[Tensor<T>],
    mask: &[bool],
    cfg: &RolloutConfig,
) -> Result<RolloutMap> {
    let first = attentions
        .first()
        .ok_or_else(|| Error::Parameter("rollout needs at least one layer".into()))?;
    if !(0.0..=1.0).contains(&cfg.residual) {
        return Err(Error::Parameter(format!("residual weight {} outside [0, 1]", cfg.residual)));
    }
    let l = mask.len();
    let heads = first.shape()[0];
    let mut acc: Option<Vec<f64>> = None;
    for (layer, a) in attentions.iter().enumerate() {
        if a.shape() != [heads, l, l] {
            return Err(Error::Dimension(format!(
                "layer {layer} attention {:?}, expected [{heads}, {l}, {l}]",
                a.shape()
            )));
        }
        let mut m = vec![0.0; l * l];
        for h in 0..heads {
            let block = &a.data()[h * l * l..(h + 1) * l * l];
            for (row, probs) in block.chunks(l).enumerate() {
                let sum: f64 = probs.iter().map(|p| p.as_f64()).sum();
                if (sum - 1.0).abs() > 1e-4 {
                    return Err(Error::Validation(format!(
                        "layer {layer} head {h} row {row} sums to {sum}"
                    )));
                }
                for (j, p) in probs.iter().enumerate() {
                    let p = p.as_f64();
                    let slot = &mut m[row * l + j];
                    match cfg.heads {
                        HeadAggregation::Mean => *slot += p / heads as f64,
                        HeadAggregation::Max => *slot = slot.max(p),
                    }
                }
            }
        }
        for i in 0..l {
            let row = &mut m[i * l..(i + 1) * l];
            for (j, v) in row.iter_mut().enumerate() {
                *v = if mask[j] {
                    0.0
                } else {
                    (1.0 - cfg.residual) * *v + if i == j { cfg.residual } else { 0.0 }
                };
            }
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|v| *v /= total);
            }
        }
        acc = Some(match acc {
            None => m,
            Some(prev) => {
                let mut out = vec![0.0; l * l];
                crate::numcore::matmul(l, l, l, &m, &prev, &mut out);
                out
            }
        });
    }
    Ok(RolloutMap {
        weights: Tensor::matrix(l, l, acc.expect("at least one layer"))?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectWeight {
    pub segment_idx: u32,
    pub frame_idx: u32,
    pub slot: usize,
    pub weight: f64,
}

fn object_columns<'a>(
    layout: &'a SequenceLayout,
    slots: &'a [TokenSlot],
) -> impl Iterator<Item = (usize, &'a TokenSlot)> + 'a {
    layout.tokens.iter().enumerate().filter_map(move |(col, t)| match (t.modality, t.object) {
        (Modality::Object, Some(i)) => slots.get(i).map(|s| (col, s)),
        _ => None,
    })
}

/// Highest-weighted observed objects in the rollout row of prediction step `z`.
/// Null tokens are never returned; whole-frame tokens only when configured.
/// Ties keep canonical (segment, frame, slot) order.
pub fn top_objects(
    map: &RolloutMap,
    layout: &SequenceLayout,
    slots: &[TokenSlot],
    z: usize,
    k: usize,
    cfg: &RolloutConfig,
) -> Result<Vec<ObjectWeight>> {
    let start = layout.prediction_start();
    if start + z >= layout.len() {
        return Err(Error::Parameter(format!("prediction step {z} out of range")));
    }
    let row = map.weights.row(start + z);
    let mut out: Vec<ObjectWeight> = object_columns(layout, slots)
        .filter(|(_, s)| !s.null && (cfg.include_whole_frame || !s.whole_frame))
        .filter(|(col, _)| row[*col] > 0.0)
        .map(|(col, s)| ObjectWeight {
            segment_idx: s.segment_idx,
            frame_idx: s.frame_idx,
            slot: s.slot,
            weight: row[col],
        })
        .collect();
    out.sort_by(|a, b| b.weight.total_cmp(&a.weight));
    out.truncate(k);
    Ok(out)
}

/// Per-step object weights normalised to sum to one over all object columns.
pub fn heatmap_rows(
    map: &RolloutMap,
    layout: &SequenceLayout,
    slots: &[TokenSlot],
    steps: &[usize],
) -> Result<Vec<(usize, Vec<ObjectWeight>)>> {
    let start = layout.prediction_start();
    steps
        .iter()
        .map(|&z| {
            if start + z >= layout.len() {
                return Err(Error::Parameter(format!("prediction step {z} out of range")));
            }
            let row = map.weights.row(start + z);
            let cols: Vec<_> = object_columns(layout, slots).collect();
            let total: f64 = cols.iter().map(|(c, _)| row[*c]).sum();
            let weights = cols
                .iter()
                .map(|(c, s)| ObjectWeight {
                    segment_idx: s.segment_idx,
                    frame_idx: s.frame_idx,
                    slot: s.slot,
                    weight: if total > 0.0 { row[*c] / total } else { 0.0 },
                })
                .collect();
            Ok((z, weights))
        })
        .collect()
}

pub fn heatmap_csv(rows: &[(usize, Vec<ObjectWeight>)]) -> String {
    let mut s = String::from("step,segment_idx,frame_idx,object_slot,weight\n");
    for (z, ws) in rows {
        for w in ws {
            writeln!(s, "{z},{},{},{},{}", w.segment_idx, w.frame_idx, w.slot, w.weight)
                .expect("string write");
        }
    }
    s
}

pub fn export_heatmap(
    map: &RolloutMap,
    layout: &SequenceLayout,
    slots: &[TokenSlot],
    steps: &[usize],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let rows = heatmap_rows(map, layout, slots, steps)?;
    fs::write(path, heatmap_csv(&rows)).map_err(|e| Error::io(path, e))
}

/// Plain-text grayscale image: one row per step, one column per object token,
/// each row scaled so its maximum is white.
pub fn heatmap_pgm(rows: &[(usize, Vec<ObjectWeight>)]) -> String {
    let width = rows.first().map_or(0, |(_, w)| w.len());
    let mut s = format!("P2\n{width} {}\n255\n", rows.len());
    for (_, ws) in rows {
        let max = ws.iter().map(|w| w.weight).fold(0.0, f64::max);
        let line: Vec<String> = ws
            .iter()
            .map(|w| {
                let v = if max > 0.0 { (w.weight / max * 255.0).round() } else { 0.0 };
                (v as u8).to_string()
            })
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}
