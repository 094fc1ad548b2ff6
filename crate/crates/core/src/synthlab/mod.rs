//! Seeded synthetic benchmark in the on-disk dataset layout.
//!
//! Each video follows a verb chain `v_{t+1} = σ(v_t)` and plants a few goal
//! nouns with per-video base scores; the noun of segment `t` is the goal
//! ranked `t mod goals` by base score. Clip descriptors encode only the
//! current verb, detections only the goals (plus low-scoring distractors),
//! so verbs are recoverable from clips and nouns only from object tokens.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datastore::{
    clip_key, write_annotations, write_detections, write_feature_pack, AnnotationSet, BoxXyxy,
    DetectionRecord, FeaturePack, Segment, Split, ANNOTATIONS_FILE, DETECTIONS_FILE, PACKS_DIR,
    SPLIT_FILE,
};
use crate::error::{Error, Result};
use crate::numcore::derive_seed;
use crate::tokens::sample_frames;

pub const PROMPTS_FILE: &str = "prompts.txt";
/// Noun embeddings keyed by noun name (for k-means prompts); kept outside `packs/`.
pub const NOUN_EMBEDDINGS_FILE: &str = "noun_embeddings.fpk";
pub const CLIP_PACK: &str = "clips";
pub const OBJECT_PACK: &str = "objects";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_videos: usize,
    pub segments_per_video: usize,
    /// Future steps; detections are emitted only for segments that can be observed.
    pub horizon: usize,
    pub verb_count: usize,
    pub noun_count: usize,
    pub goals_per_video: usize,
    pub clip_dim: usize,
    pub obj_descriptor_dim: usize,
    pub noise_std: f64,
    pub distractor_rate: f64,
    /// Inclusive range of planted base scores.
    pub planted_score: (f64, f64),
    /// Exclusive upper bound of distractor scores (lower bound 0).
    pub distractor_score_max: f64,
    pub frames_per_segment: usize,
    pub segment_seconds: f64,
    pub fps: f64,
    pub frame_w: f64,
    pub frame_h: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_videos: 500,
            segments_per_video: 23,
            horizon: 20,
            verb_count: 10,
            noun_count: 20,
            goals_per_video: 3,
            clip_dim: 16,
            obj_descriptor_dim: 16,
            noise_std: 0.1,
            distractor_rate: 0.3,
            planted_score: (0.35, 1.0),
            distractor_score_max: 0.4,
            frames_per_segment: 4,
            segment_seconds: 2.0,
            fps: 30.0,
            frame_w: 640.0,
            frame_h: 480.0,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.verb_count < 2 || self.noun_count < 2 {
            return Err(Error::Parameter("verb_count and noun_count must be at least 2".into()));
        }
        if self.goals_per_video == 0 || self.goals_per_video > self.noun_count {
            return Err(Error::Parameter(format!(
                "goals_per_video {} must be in 1..={}",
                self.goals_per_video, self.noun_count
            )));
        }
        if self.n_videos == 0 || self.segments_per_video <= self.horizon || self.frames_per_segment == 0 {
            return Err(Error::Parameter(
                "need videos, more segments than the horizon, and frames per segment".into(),
            ));
        }
        if self.clip_dim == 0 || self.obj_descriptor_dim == 0 {
            return Err(Error::Parameter("descriptor widths must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Parameter(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        let (lo, hi) = self.planted_score;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(lo) && unit(hi) && lo <= hi && unit(self.distractor_score_max) && unit(self.distractor_rate)) {
            return Err(Error::Parameter("scores and rates must lie in [0, 1]".into()));
        }
        if !(self.segment_seconds > 0.0 && self.fps > 0.0 && self.frame_w >= 2.0 && self.frame_h >= 2.0) {
            return Err(Error::Parameter("segment length, fps and frame size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Parameter(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }

    /// Segments that can appear inside an observation window.
    pub fn observable_segments(&self) -> usize {
        self.segments_per_video - self.horizon
    }
}

pub fn verb_name(i: usize) -> String {
    format!("verb{i:02}")
}

pub fn noun_name(i: usize) -> String {
    format!("noun{i:02}")
}

/// Latent structure of one generated video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoPlan {
    pub video_id: String,
    pub verbs: Vec<u32>,
    /// Goal nouns sorted by base score, highest first.
    pub goals: Vec<u32>,
    pub base_scores: Vec<f64>,
}

impl VideoPlan {
    pub fn noun_at(&self, segment: usize) -> u32 {
        self.goals[segment % self.goals.len()]
    }
}

/// Everything [`generate`] wrote, kept in memory.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub annotations: AnnotationSet,
    pub detections: Vec<DetectionRecord>,
    pub clips: FeaturePack,
    pub objects: FeaturePack,
    pub noun_embeddings: FeaturePack,
    pub split: Split,
    pub plans: Vec<VideoPlan>,
    /// The verb successor permutation σ, a single cycle.
    pub successor: Vec<u32>,
}

fn gaussian_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    (0..rows).map(|_| (0..dim).map(|_| n.sample(rng)).collect()).collect()
}

fn noisy(rng: &mut ChaCha8Rng, base: &[f64], std: f64) -> Vec<f32> {
    let n = Normal::new(0.0, std).expect("finite std");
    base.iter()
        .map(|v| (if std > 0.0 { v + n.sample(rng) } else { *v }) as f32)
        .collect()
}

fn random_box(rng: &mut ChaCha8Rng, w: f64, h: f64) -> BoxXyxy {
    let mut axis = |len: f64| {
        let a = rng.random_range(0.0..len - 1.0);
        let b = rng.random_range(a + 1.0..=len);
        ((a * 100.0).round() / 100.0, (b * 100.0).round() / 100.0)
    };
    let (x1, x2) = axis(w);
    let (y1, y2) = axis(h);
    BoxXyxy::new(x1, y1, x2.max(x1 + 0.01), y2.max(y1 + 0.01))
}

/// Build the dataset in memory. Deterministic per `cfg.seed`; every video
/// draws from its own stream so prefixes agree across `n_videos`.
pub fn synthesize(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut global = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0]));
    let verb_emb = gaussian_rows(&mut global, cfg.verb_count, cfg.clip_dim);
    let noun_emb = gaussian_rows(&mut global, cfg.noun_count, cfg.obj_descriptor_dim);
    // a random single cycle, so every chain visits every verb
    let mut order: Vec<u32> = (0..cfg.verb_count as u32).collect();
    order.shuffle(&mut global);
    let mut successor = vec![0u32; cfg.verb_count];
    for (i, v) in order.iter().enumerate() {
        successor[*v as usize] = order[(i + 1) % order.len()];
    }

    let mut noun_embeddings = FeaturePack::new(cfg.obj_descriptor_dim);
    for (i, e) in noun_emb.iter().enumerate() {
        noun_embeddings.push(noun_name(i), &e.iter().map(|v| *v as f32).collect::<Vec<_>>())?;
    }

    let mut segments = Vec::new();
    let mut detections = Vec::new();
    let mut plans = Vec::with_capacity(cfg.n_videos);
    let mut clips = FeaturePack::new(cfg.clip_dim);
    let mut objects = FeaturePack::new(cfg.obj_descriptor_dim);
    let frames_per_seg = (cfg.segment_seconds * cfg.fps).round().max(1.0) as u32;

    for v in 0..cfg.n_videos {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, v as u64]));
        let video_id = format!("vid{v:04}");

        let mut verbs = vec![rng.random_range(0..cfg.verb_count as u32)];
        for t in 1..cfg.segments_per_video {
            verbs.push(successor[verbs[t - 1] as usize]);
        }
        let mut pool: Vec<u32> = (0..cfg.noun_count as u32).collect();
        pool.shuffle(&mut rng);
        let (lo, hi) = cfg.planted_score;
        let mut planted: Vec<(u32, f64)> = pool[..cfg.goals_per_video]
            .iter()
            .map(|g| (*g, rng.random_range(lo..=hi)))
            .collect();
        planted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let plan = VideoPlan {
            video_id: video_id.clone(),
            verbs,
            goals: planted.iter().map(|p| p.0).collect(),
            base_scores: planted.iter().map(|p| p.1).collect(),
        };

        for t in 0..cfg.segments_per_video {
            let verb = plan.verbs[t] as usize;
            let noun = plan.noun_at(t) as usize;
            let start_s = t as f64 * cfg.segment_seconds;
            segments.push(Segment {
                video_id: video_id.clone(),
                segment_idx: t as u32,
                start_s,
                end_s: start_s + cfg.segment_seconds,
                verb_id: verb as u32,
                noun_id: noun as u32,
                verb_name: verb_name(verb),
                noun_name: noun_name(noun),
            });
            clips.push(clip_key(&video_id, t as u32), &noisy(&mut rng, &verb_emb[verb], cfg.noise_std))?;
            if t >= cfg.observable_segments() {
                continue;
            }
            let first = t as u32 * frames_per_seg;
            for frame in sample_frames(first, first + frames_per_seg - 1, cfg.frames_per_segment) {
                let mut frame_dets = planted.clone();
                for c in &pool[cfg.goals_per_video..] {
                    if rng.random_bool(cfg.distractor_rate) {
                        frame_dets.push((*c, rng.random_range(0.0..cfg.distractor_score_max)));
                    }
                }
                frame_dets.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                for (k, (cat, score)) in frame_dets.into_iter().enumerate() {
                    let bbox = random_box(&mut rng, cfg.frame_w, cfg.frame_h);
                    let desc = noisy(&mut rng, &noun_emb[cat as usize], cfg.noise_std);
                    let row = objects.push(format!("{video_id}/{t}/{frame}/{k}"), &desc)?;
                    detections.push(DetectionRecord {
                        video_id: video_id.clone(),
                        segment_idx: t as u32,
                        frame_idx: frame,
                        bbox,
                        category_idx: cat,
                        score: (score * 1e6).round() / 1e6,
                        pack_id: OBJECT_PACK.into(),
                        row,
                    });
                }
            }
        }
        plans.push(plan);
    }

    let mut ids: Vec<String> = plans.iter().map(|p| p.video_id.clone()).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2]));
    ids.shuffle(&mut split_rng);
    let n_val = (cfg.n_videos as f64 * cfg.val_fraction).round() as usize;
    let mut val = ids.split_off(ids.len() - n_val.min(ids.len() - 1));
    ids.sort();
    val.sort();

    Ok(SynthDataset {
        annotations: AnnotationSet::from_segments(segments)?,
        detections,
        clips,
        objects,
        noun_embeddings,
        split: Split { train: ids, val },
        plans,
        successor,
    })
}

/// Generate and write the dataset under `out_dir`:
/// `annotations.jsonl`, `detections.jsonl`, `packs/{clips,objects}.fpk`,
/// `prompts.txt` (all noun names), `noun_embeddings.fpk` and `split.json`.
pub fn generate(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SynthDataset> {
    let out = out_dir.as_ref();
    let data = synthesize(cfg)?;
    let packs = out.join(PACKS_DIR);
    fs::create_dir_all(&packs).map_err(|e| Error::io(&packs, e))?;
    write_annotations(out.join(ANNOTATIONS_FILE), &data.annotations)?;
    write_detections(out.join(DETECTIONS_FILE), &data.detections)?;
    write_feature_pack(packs.join(format!("{CLIP_PACK}.fpk")), &data.clips)?;
    write_feature_pack(packs.join(format!("{OBJECT_PACK}.fpk")), &data.objects)?;
    write_feature_pack(out.join(NOUN_EMBEDDINGS_FILE), &data.noun_embeddings)?;
    let prompts = out.join(PROMPTS_FILE);
    let names: Vec<String> = (0..cfg.noun_count).map(noun_name).collect();
    fs::write(&prompts, names.join("\n") + "\n").map_err(|e| Error::io(&prompts, e))?;
    data.split.write(out.join(SPLIT_FILE))?;
    Ok(data)
}
