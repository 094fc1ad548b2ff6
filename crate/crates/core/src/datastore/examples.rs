use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{AnnotationSet, DetectionRecord, FeatureStore, Segment};
use crate::error::{Error, Result};

/// Window geometry for example construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExampleConfig {
    /// Observed segments per example.
    pub n_observed: usize,
    /// Future steps to predict.
    pub horizon: usize,
    /// Pack holding one clip descriptor per segment, keyed by [`clip_key`].
    pub clip_pack: String,
}

impl Default for ExampleConfig {
    fn default() -> Self {
        ExampleConfig {
            n_observed: 3,
            horizon: 20,
            clip_pack: "clips".into(),
        }
    }
}

pub fn clip_key(video_id: &str, segment_idx: u32) -> String {
    format!("{video_id}/{segment_idx}")
}

/// A stop position inside one video.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub example_id: String,
    pub video: usize,
    /// Position (not `segment_idx`) of the last observed segment.
    pub stop: usize,
}

/// One anticipation problem: observe `n_observed` segments, predict `horizon` actions.
#[derive(Clone, Debug, PartialEq)]
pub struct LTAExample {
    pub example_id: String,
    pub video_id: String,
    pub observed: Vec<Segment>,
    /// `(pack_id, key)` of each observed clip descriptor.
    pub clip_refs: Vec<(String, String)>,
    /// Observed detections grouped by `(segment_idx, frame_idx)`.
    pub detections: BTreeMap<(u32, u32), Vec<DetectionRecord>>,
    pub target_verbs: Vec<u32>,
    pub target_nouns: Vec<u32>,
}

/// Every stop position `j` with `j >= n_observed - 1` and `j + horizon < S`.
pub fn enumerate_windows(
    annotations: &AnnotationSet,
    n_observed: usize,
    horizon: usize,
) -> Result<Vec<Window>> {
    if n_observed == 0 || horizon == 0 {
        return Err(Error::Parameter(
            "observed segments and horizon must both be at least 1".into(),
        ));
    }
    let mut out = Vec::new();
    for (vi, video) in annotations.videos.iter().enumerate() {
        let s = video.segments.len();
        if s < n_observed + horizon {
            continue;
        }
        for stop in n_observed - 1..s - horizon {
            out.push(Window {
                example_id: format!(
                    "{}:{}",
                    video.video_id, video.segments[stop].segment_idx
                ),
                video: vi,
                stop,
            });
        }
    }
    Ok(out)
}

/// Sliding-window examples over every valid stop position, with all
/// descriptor references checked against `packs`.
pub fn build_examples(
    annotations: &AnnotationSet,
    detections: &[DetectionRecord],
    packs: &FeatureStore,
    cfg: &ExampleConfig,
) -> Result<Vec<LTAExample>> {
    let mut by_segment: HashMap<(&str, u32), Vec<&DetectionRecord>> = HashMap::new();
    for d in detections {
        by_segment
            .entry((d.video_id.as_str(), d.segment_idx))
            .or_default()
            .push(d);
    }
    let clips = packs.pack(&cfg.clip_pack);

    let windows = enumerate_windows(annotations, cfg.n_observed, cfg.horizon)?;
    let mut out = Vec::with_capacity(windows.len());
    for w in windows {
        let video = &annotations.videos[w.video];
        let observed = &video.segments[w.stop + 1 - cfg.n_observed..=w.stop];
        let future = &video.segments[w.stop + 1..=w.stop + cfg.horizon];

        let mut clip_refs = Vec::with_capacity(observed.len());
        let mut grouped: BTreeMap<(u32, u32), Vec<DetectionRecord>> = BTreeMap::new();
        for seg in observed {
            let key = clip_key(&video.video_id, seg.segment_idx);
            if clips.and_then(|p| p.get(&key)).is_none() {
                return Err(Error::Link(format!(
                    "clip descriptor `{key}` not found in pack `{}`",
                    cfg.clip_pack
                )));
            }
            clip_refs.push((cfg.clip_pack.clone(), key));
            for d in by_segment
                .get(&(video.video_id.as_str(), seg.segment_idx))
                .into_iter()
                .flatten()
            {
                if packs.resolve(&d.pack_id, d.row).is_none() {
                    return Err(Error::Link(format!(
                        "detection in `{}` segment {} frame {} points at missing row {} of pack `{}`",
                        d.video_id, d.segment_idx, d.frame_idx, d.row, d.pack_id
                    )));
                }
                grouped
                    .entry((d.segment_idx, d.frame_idx))
                    .or_default()
                    .push((*d).clone());
            }
        }
        out.push(LTAExample {
            example_id: w.example_id,
            video_id: video.video_id.clone(),
            observed: observed.to_vec(),
            clip_refs,
            detections: grouped,
            target_verbs: future.iter().map(|s| s.verb_id).collect(),
            target_nouns: future.iter().map(|s| s.noun_id).collect(),
        });
    }
    Ok(out)
}
