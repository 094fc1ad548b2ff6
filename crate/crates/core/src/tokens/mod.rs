//! Fixed-size object-token sets from grounded detections.
//!
//! Each observed segment contributes `n_img` sampled frames and each frame
//! contributes exactly `n_obj` token slots: a whole-frame pseudo-object, the
//! top-scoring detections above the confidence threshold, and masked null
//! padding. Sequence length is therefore constant per configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastore::{BoxXyxy, DetectionRecord, FeatureStore, LTAExample};
use crate::error::{Error, Result};
use crate::numcore::{derive_seed, hash_str, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub n_img: usize,
    /// Slots per frame including the whole-frame token.
    pub n_obj: usize,
    pub threshold: f64,
    pub use_location: bool,
    pub use_category: bool,
    pub frame_w: f64,
    pub frame_h: f64,
    pub fps: f64,
    /// Pack of whole-frame descriptors keyed `video/segment/frame`; zeros when absent.
    pub frame_pack: String,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            n_img: 4,
            n_obj: 11,
            threshold: 0.3,
            use_location: true,
            use_category: true,
            frame_w: 640.0,
            frame_h: 480.0,
            fps: 30.0,
            frame_pack: "frames".into(),
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_img == 0 || self.n_obj == 0 {
            return Err(Error::Parameter("n_img and n_obj must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Parameter(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        if !(self.frame_w > 0.0 && self.frame_h > 0.0 && self.fps > 0.0) {
            return Err(Error::Parameter("frame size and fps must be positive".into()));
        }
        Ok(())
    }

    pub fn tokens_per_segment(&self) -> usize {
        self.n_img * self.n_obj
    }
}

/// `n` frame indices evenly spaced over `first..=last`, rounded half-up.
pub fn sample_frames(first: u32, last: u32, n: usize) -> Vec<u32> {
    let last = last.max(first);
    if n == 1 {
        return vec![first];
    }
    let span = (last - first) as u64;
    let denom = (n - 1) as u64;
    (0..n as u64)
        .map(|i| first + ((2 * span * i + denom) / (2 * denom)) as u32)
        .collect()
}

/// A selected region before feature assembly.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub bbox: BoxXyxy,
    pub score: f64,
    /// `None` for the whole-frame token.
    pub category: Option<u32>,
    /// `(pack_id, row)` of the region descriptor; `None` means zeros.
    pub descriptor: Option<(String, u32)>,
}

impl Candidate {
    pub fn whole_frame(frame_w: f64, frame_h: f64) -> Self {
        Candidate {
            bbox: BoxXyxy::new(0.0, 0.0, frame_w, frame_h),
            score: 1.0,
            category: None,
            descriptor: None,
        }
    }

    pub fn is_whole_frame(&self) -> bool {
        self.category.is_none()
    }
}

fn rank(a: &DetectionRecord, b: &DetectionRecord) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| b.bbox.area().total_cmp(&a.bbox.area()))
        .then_with(|| a.bbox.x1.total_cmp(&b.bbox.x1))
}

/// Whole-frame token followed by the best `n_obj - 1` detections scoring at
/// least `threshold`, ordered by score, then area (larger first), then `x1`.
pub fn filter_detections(dets: &[DetectionRecord], cfg: &SelectionConfig) -> Vec<Candidate> {
    let mut kept: Vec<&DetectionRecord> =
        dets.iter().filter(|d| d.score >= cfg.threshold).collect();
    kept.sort_by(|a, b| rank(a, b));
    std::iter::once(Candidate::whole_frame(cfg.frame_w, cfg.frame_h))
        .chain(
            kept.into_iter()
                .take(cfg.n_obj.saturating_sub(1))
                .map(|d| Candidate {
                    bbox: d.bbox,
                    score: d.score,
                    category: Some(d.category_idx),
                    descriptor: (!d.pack_id.is_empty()).then(|| (d.pack_id.clone(), d.row)),
                }),
        )
        .collect()
}

/// Square around the box centre with side `max(w, h)`, capped at the shorter
/// frame side and translated (never scaled) back inside the frame.
pub fn square_crop_box(b: &BoxXyxy, frame_w: f64, frame_h: f64) -> Result<BoxXyxy> {
    if !b.is_valid() {
        return Err(Error::Geometry(format!("degenerate box {b:?}")));
    }
    if !(frame_w > 0.0 && frame_h > 0.0)
        || b.x1 < 0.0
        || b.y1 < 0.0
        || b.x2 > frame_w
        || b.y2 > frame_h
    {
        return Err(Error::Geometry(format!(
            "box {b:?} not inside a {frame_w}x{frame_h} frame"
        )));
    }
    let side = b.width().max(b.height()).min(frame_w.min(frame_h));
    let place = |centre: f64, extent: f64| (centre - side / 2.0).clamp(0.0, extent - side);
    let x1 = place((b.x1 + b.x2) / 2.0, frame_w);
    let y1 = place((b.y1 + b.y2) / 2.0, frame_h);
    Ok(BoxXyxy::new(x1, y1, x1 + side, y1 + side))
}

/// Widths of the raw object feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub descriptor_dim: usize,
    pub prompt_count: usize,
}

impl FeatureLayout {
    /// descriptor + 4 location slots + score + one-hot over prompts and the whole-frame sentinel.
    pub fn feature_dim(&self) -> usize {
        self.descriptor_dim + 4 + 1 + self.prompt_count + 1
    }
}

/// Raw feature for one token: `[descriptor | cx cy w h | score | one-hot]`.
pub fn assemble_object_features(
    cand: &Candidate,
    descriptor: Option<&[f32]>,
    cfg: &SelectionConfig,
    layout: &FeatureLayout,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; layout.feature_dim()];
    let d = layout.descriptor_dim;
    if let Some(desc) = descriptor {
        if desc.len() != d {
            return Err(Error::Dimension(format!(
                "descriptor has {} values, layout expects {d}",
                desc.len()
            )));
        }
        for (o, v) in out.iter_mut().zip(desc) {
            *o = *v as f64;
        }
    }
    if cfg.use_location {
        let b = &cand.bbox;
        let loc = [
            (b.x1 + b.x2) / 2.0 / cfg.frame_w,
            (b.y1 + b.y2) / 2.0 / cfg.frame_h,
            b.width() / cfg.frame_w,
            b.height() / cfg.frame_h,
        ];
        for (o, v) in out[d..d + 4].iter_mut().zip(loc) {
            *o = v.clamp(0.0, 1.0);
        }
    }
    if cfg.use_category {
        out[d + 4] = cand.score;
        let class = match cand.category {
            Some(c) if (c as usize) < layout.prompt_count => c as usize,
            Some(c) => {
                return Err(Error::Index(format!(
                    "category {c} outside a vocabulary of {}",
                    layout.prompt_count
                )))
            }
            None => layout.prompt_count,
        };
        out[d + 5 + class] = 1.0;
    }
    Ok(out)
}

/// Uniform random boxes (corners sorted, at least 1px per side), uniform scores
/// and categories; the random-region baseline. Records carry no descriptor.
pub fn random_detections(
    seed: u64,
    n: usize,
    frame_w: f64,
    frame_h: f64,
    prompt_count: usize,
) -> Vec<DetectionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = |extent: f64, rng: &mut ChaCha8Rng| {
        let (a, b) = (rng.random::<f64>() * extent, rng.random::<f64>() * extent);
        let (lo, hi) = (a.min(b), a.max(b));
        if hi - lo >= 1.0 {
            (lo, hi)
        } else {
            // widen symmetrically, then shift back inside the frame
            let mid = (lo + hi) / 2.0;
            let lo = (mid - 0.5).clamp(0.0, (extent - 1.0).max(0.0));
            (lo, (lo + 1.0).min(extent))
        }
    };
    (0..n)
        .map(|_| {
            let (x1, x2) = axis(frame_w, &mut rng);
            let (y1, y2) = axis(frame_h, &mut rng);
            DetectionRecord {
                video_id: String::new(),
                segment_idx: 0,
                frame_idx: 0,
                bbox: BoxXyxy::new(x1, y1, x2, y2),
                category_idx: rng.random_range(0..prompt_count.max(1)) as u32,
                score: rng.random(),
                pack_id: String::new(),
                row: 0,
            }
        })
        .collect()
}

/// Position of a token slot inside the object block of a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSlot {
    /// Position of the segment inside the observed window.
    pub segment_pos: usize,
    pub segment_idx: u32,
    /// Which of the `n_img` sampled frames.
    pub frame_slot: usize,
    pub frame_idx: u32,
    pub slot: usize,
    pub whole_frame: bool,
    pub null: bool,
    pub category: Option<u32>,
}

/// Everything the encoder consumes for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub example_id: String,
    /// `[n_observed, clip_dim]`
    pub clips: Tensor<f64>,
    /// `[n_observed * n_img * n_obj, feature_dim]`, canonical (segment, frame, slot) order.
    pub objects: Tensor<f64>,
    pub slots: Vec<TokenSlot>,
    pub target_verbs: Vec<usize>,
    pub target_nouns: Vec<usize>,
}

impl ModelInput {
    /// Mask bits (true = masked) over object tokens.
    pub fn object_mask(&self) -> Vec<bool> {
        self.slots.iter().map(|s| s.null).collect()
    }
}

/// How object regions are sourced.
#[derive(Clone, Debug, PartialEq)]
pub enum RegionSource {
    Detections,
    /// Random boxes with zero descriptors, seeded per frame.
    Random { seed: u64 },
}

/// Build the fixed-shape token set of `example`.
pub fn build_model_input(
    example: &LTAExample,
    packs: &FeatureStore,
    cfg: &SelectionConfig,
    layout: &FeatureLayout,
    source: &RegionSource,
) -> Result<ModelInput> {
    cfg.validate()?;
    let mut clip_rows = Vec::new();
    let mut clip_dim = None;
    for (pack, key) in &example.clip_refs {
        let row = packs
            .pack(pack)
            .and_then(|p| p.get(key))
            .ok_or_else(|| Error::Link(format!("clip `{key}` missing from pack `{pack}`")))?;
        if *clip_dim.get_or_insert(row.len()) != row.len() {
            return Err(Error::Dimension("clip descriptors differ in width".into()));
        }
        clip_rows.extend(row.iter().map(|v| *v as f64));
    }
    let clips = Tensor::matrix(example.clip_refs.len(), clip_dim.unwrap_or(0), clip_rows)?;

    let frame_pack = packs.pack(&cfg.frame_pack);
    let fdim = layout.feature_dim();
    let mut objects = Vec::with_capacity(example.observed.len() * cfg.tokens_per_segment() * fdim);
    let mut slots = Vec::with_capacity(example.observed.len() * cfg.tokens_per_segment());
    for (segment_pos, seg) in example.observed.iter().enumerate() {
        let (first, last) = seg.frame_range(cfg.fps);
        let available: Vec<u32> = example
            .detections
            .range((seg.segment_idx, 0)..=(seg.segment_idx, u32::MAX))
            .map(|((_, f), _)| *f)
            .collect();
        for (frame_slot, frame_idx) in sample_frames(first, last, cfg.n_img).into_iter().enumerate()
        {
            let cands = match source {
                RegionSource::Detections => {
                    // nearest frame that has detections; ties go to the earlier one
                    let near = available
                        .iter()
                        .min_by_key(|f| (f.abs_diff(frame_idx), **f))
                        .copied();
                    let dets = near
                        .and_then(|f| example.detections.get(&(seg.segment_idx, f)))
                        .map(Vec::as_slice)
                        .unwrap_or(&[]);
                    filter_detections(dets, cfg)
                }
                RegionSource::Random { seed } => {
                    let s = derive_seed(
                        *seed,
                        &[hash_str(&example.video_id), seg.segment_idx as u64, frame_idx as u64],
                    );
                    let dets = random_detections(
                        s,
                        cfg.n_obj.saturating_sub(1),
                        cfg.frame_w,
                        cfg.frame_h,
                        layout.prompt_count,
                    );
                    filter_detections(&dets, cfg)
                }
            };
            let frame_key = format!("{}/{}/{}", example.video_id, seg.segment_idx, frame_idx);
            for slot in 0..cfg.n_obj {
                let base = TokenSlot {
                    segment_pos,
                    segment_idx: seg.segment_idx,
                    frame_slot,
                    frame_idx,
                    slot,
                    whole_frame: false,
                    null: true,
                    category: None,
                };
                let Some(cand) = cands.get(slot) else {
                    objects.extend(std::iter::repeat_n(0.0, fdim));
                    slots.push(base);
                    continue;
                };
                let descriptor = match (&cand.descriptor, cand.is_whole_frame()) {
                    (Some((pack, row)), _) => Some(packs.resolve(pack, *row).ok_or_else(|| {
                        Error::Link(format!("row {row} missing from pack `{pack}`"))
                    })?),
                    (None, true) => frame_pack.and_then(|p| p.get(&frame_key)),
                    (None, false) => None,
                };
                objects.extend(assemble_object_features(cand, descriptor, cfg, layout)?);
                slots.push(TokenSlot {
                    whole_frame: cand.is_whole_frame(),
                    null: false,
                    category: cand.category,
                    ..base
                });
            }
        }
    }
    let objects = Tensor::matrix(slots.len(), fdim, objects)?;
    Ok(ModelInput {
        example_id: example.example_id.clone(),
        clips,
        objects,
        slots,
        target_verbs: example.target_verbs.iter().map(|v| *v as usize).collect(),
        target_nouns: example.target_nouns.iter().map(|v| *v as usize).collect(),
    })
}

/// Token sets for many examples, built in parallel in input order.
pub fn build_model_inputs(
    examples: &[LTAExample],
    packs: &FeatureStore,
    cfg: &SelectionConfig,
    layout: &FeatureLayout,
    source: &RegionSource,
) -> Result<Vec<ModelInput>> {
    examples
        .par_iter()
        .map(|e| build_model_input(e, packs, cfg, layout, source))
        .collect()
}
