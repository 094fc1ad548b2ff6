//! Candidate generation and long-horizon anticipation metrics.
//!
//! Edit distance is the restricted Damerau-Levenshtein distance (optimal
//! string alignment): insertions, deletions, substitutions and transpositions
//! of adjacent items, with no substring edited twice. ED@z takes the best of
//! the K candidates on the first z steps and divides by z; AUED averages ED@z
//! over z = 1..Z.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastore::{read_jsonl, write_jsonl};
use crate::error::{Error, Result};
use crate::numcore::{derive_seed, hash_str, ParamStore, Real, Tensor};
use crate::pte::{pte_forward, ForwardOptions, PTEConfig};
use crate::tokens::ModelInput;

/// One `(verb, noun)` step.
pub type Action = (u32, u32);

/// K candidate action sequences for one example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionSet {
    pub example_id: String,
    /// `K` sequences of `Z` actions; candidate 0 is the per-step argmax.
    pub candidates: Vec<Vec<Action>>,
}

impl PredictionSet {
    pub fn horizon(&self) -> usize {
        self.candidates.first().map_or(0, Vec::len)
    }

    pub fn validate(&self, verb_count: usize, noun_count: usize) -> Result<()> {
        let z = self.horizon();
        if self.candidates.is_empty() || z == 0 {
            return Err(Error::Validation(format!("`{}` has no candidates", self.example_id)));
        }
        for c in &self.candidates {
            if c.len() != z {
                return Err(Error::Validation(format!(
                    "`{}` has candidates of different lengths",
                    self.example_id
                )));
            }
            if let Some((v, n)) = c
                .iter()
                .find(|(v, n)| *v as usize >= verb_count || *n as usize >= noun_count)
            {
                return Err(Error::Validation(format!(
                    "`{}` predicts ({v}, {n}) outside vocabularies of {verb_count} verbs and {noun_count} nouns",
                    self.example_id
                )));
            }
        }
        Ok(())
    }
}

/// Row-wise softmax of a `[rows, C]` logit matrix.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Tensor<f64> {
    let c = logits.cols();
    let mut out = Vec::with_capacity(logits.numel());
    for r in 0..logits.rows() {
        let row: Vec<f64> = logits.row(r).iter().map(|v| v.as_f64()).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    Tensor::new(vec![logits.rows(), c], out).expect("same shape")
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, v)| if *v > b.1 { (i, *v) } else { b })
        .0
}

fn check_probs(name: &str, p: &Tensor<f64>) -> Result<()> {
    for r in 0..p.rows() {
        let row = p.row(r);
        let sum: f64 = row.iter().sum();
        if row.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-4 {
            return Err(Error::Validation(format!(
                "{name} probabilities at step {r} sum to {sum}"
            )));
        }
    }
    Ok(())
}

/// Candidate 0 is the independent per-step argmax of verbs and nouns;
/// candidates 1..K are sampled per step from `p^(1/temperature)`.
pub fn generate_candidates(
    verb_probs: &Tensor<f64>,
    noun_probs: &Tensor<f64>,
    k: usize,
    seed: u64,
    temperature: f64,
) -> Result<Vec<Vec<Action>>> {
    if k == 0 || !(temperature > 0.0) {
        return Err(Error::Parameter("K must be at least 1 and temperature positive".into()));
    }
    if verb_probs.rows() != noun_probs.rows() {
        return Err(Error::Dimension("verb and noun horizons differ".into()));
    }
    check_probs("verb", verb_probs)?;
    check_probs("noun", noun_probs)?;
    let z = verb_probs.rows();
    let mut out = vec![(0..z)
        .map(|s| (argmax(verb_probs.row(s)) as u32, argmax(noun_probs.row(s)) as u32))
        .collect::<Vec<_>>()];
    if k == 1 {
        return Ok(out);
    }
    let tempered = |p: &Tensor<f64>| -> Result<Vec<WeightedIndex<f64>>> {
        (0..z)
            .map(|s| {
                // subtract-free scaling: p^(1/t) relative to the row max keeps weights finite
                let row = p.row(s);
                let max = row.iter().cloned().fold(0.0, f64::max);
                let w: Vec<f64> = row.iter().map(|v| (v / max).powf(1.0 / temperature)).collect();
                WeightedIndex::new(w).map_err(|e| Error::Numeric(format!("sampling weights: {e}")))
            })
            .collect()
    };
    let (vd, nd) = (tempered(verb_probs)?, tempered(noun_probs)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 1..k {
        out.push(
            (0..z)
                .map(|s| (vd[s].sample(&mut rng) as u32, nd[s].sample(&mut rng) as u32))
                .collect(),
        );
    }
    Ok(out)
}

/// Restricted Damerau-Levenshtein (optimal string alignment) distance.
pub fn damerau_levenshtein<E: PartialEq>(a: &[E], b: &[E]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            let mut best = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
            if i > 1 && j > 1 && a[i - 1] == b[j - 2] && a[i - 2] == b[j - 1] {
                best = best.min(d[i - 2][j - 2] + 1);
            }
            d[i][j] = best;
        }
    }
    d[n][m]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Verb,
    Noun,
    /// Joint `(verb, noun)` equality.
    Action,
}

fn project(seq: &[Action], field: Field) -> Vec<u64> {
    seq.iter()
        .map(|(v, n)| match field {
            Field::Verb => *v as u64,
            Field::Noun => *n as u64,
            Field::Action => ((*v as u64) << 32) | *n as u64,
        })
        .collect()
}

/// `min_k DL(candidate_k[..z], gt[..z]) / z`.
pub fn edit_distance_at_z(candidates: &[Vec<Action>], gt: &[Action], z: usize, field: Field) -> Result<f64> {
    if z == 0 || z > gt.len() {
        return Err(Error::Parameter(format!("z = {z} outside 1..={}", gt.len())));
    }
    if candidates.is_empty() || candidates.iter().any(|c| c.len() < z) {
        return Err(Error::Parameter(format!("candidates shorter than z = {z}")));
    }
    let g = project(&gt[..z], field);
    let best = candidates
        .iter()
        .map(|c| damerau_levenshtein(&project(&c[..z], field), &g))
        .min()
        .expect("non-empty");
    Ok(best as f64 / z as f64)
}

/// Mean of ED@z over `z = 1..=horizon`.
pub fn aued(candidates: &[Vec<Action>], gt: &[Action], horizon: usize, field: Field) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::Parameter("horizon must be at least 1".into()));
    }
    let mut total = 0.0;
    for z in 1..=horizon {
        total += edit_distance_at_z(candidates, gt, z, field)?;
    }
    Ok(total / horizon as f64)
}

/// Mean over classes present in `gt` of per-class frame accuracy.
pub fn moc(pred: &[u32], gt: &[u32]) -> Result<f64> {
    if gt.is_empty() || pred.len() != gt.len() {
        return Err(Error::Parameter("MoC needs equal-length, non-empty frame arrays".into()));
    }
    let mut per: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gt) {
        let e = per.entry(*g).or_default();
        e.0 += usize::from(p == g);
        e.1 += 1;
    }
    Ok(per.values().map(|(c, n)| *c as f64 / *n as f64).sum::<f64>() / per.len() as f64)
}

/// `(top1, class_mean)`; classes without ground-truth instances are ignored.
pub fn class_mean_accuracy(pred: &[u32], gt: &[u32], n_classes: usize) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::Parameter("prediction and ground-truth lengths differ".into()));
    }
    if gt.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut hits = vec![0usize; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (p, g) in pred.iter().zip(gt) {
        let g = *g as usize;
        if g >= n_classes {
            return Err(Error::Index(format!("class {g} outside {n_classes}")));
        }
        counts[g] += 1;
        hits[g] += usize::from(*p as usize == g);
    }
    let top1 = hits.iter().sum::<usize>() as f64 / gt.len() as f64;
    let present: Vec<f64> = counts
        .iter()
        .zip(&hits)
        .filter(|(c, _)| **c > 0)
        .map(|(c, h)| *h as f64 / *c as f64)
        .collect();
    Ok((top1, present.iter().sum::<f64>() / present.len() as f64))
}

/// Ground truth for one example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Target {
    pub example_id: String,
    pub actions: Vec<Action>,
}

impl Target {
    pub fn from_input(input: &ModelInput) -> Self {
        Target {
            example_id: input.example_id.clone(),
            actions: input
                .target_verbs
                .iter()
                .zip(&input.target_nouns)
                .map(|(v, n)| (*v as u32, *n as u32))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepEd {
    pub z: usize,
    pub verb_ed: f64,
    pub noun_ed: f64,
    pub action_ed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub examples: usize,
    pub horizon: usize,
    pub candidates: usize,
    /// ED@Z, averaged over examples.
    pub verb_ed: f64,
    pub noun_ed: f64,
    pub action_ed: f64,
    pub aued_verb: f64,
    pub aued_noun: f64,
    pub aued_action: f64,
    /// Mean ED@z for z = 1..=Z.
    pub per_step: Vec<StepEd>,
    /// Step-1 accuracy of the argmax candidate.
    pub top1_verb: f64,
    pub class_mean_verb: f64,
    pub top1_noun: f64,
    pub class_mean_noun: f64,
}

/// Metrics over every target; each must have a prediction with the same id.
pub fn evaluate(
    predictions: &[PredictionSet],
    targets: &[Target],
    verb_count: usize,
    noun_count: usize,
) -> Result<MetricsReport> {
    let first = targets
        .first()
        .ok_or_else(|| Error::Parameter("no examples to evaluate".into()))?;
    let horizon = first.actions.len();
    let by_id: HashMap<&str, &PredictionSet> =
        predictions.iter().map(|p| (p.example_id.as_str(), p)).collect();
    let mut sums = vec![[0.0f64; 3]; horizon];
    let (mut v_pred, mut v_gt, mut n_pred, mut n_gt) = (vec![], vec![], vec![], vec![]);
    let mut k_max = 0;
    for t in targets {
        if t.actions.len() != horizon {
            return Err(Error::Validation(format!("`{}` has a different horizon", t.example_id)));
        }
        let p = by_id
            .get(t.example_id.as_str())
            .ok_or_else(|| Error::Link(format!("no prediction for `{}`", t.example_id)))?;
        p.validate(verb_count, noun_count)?;
        k_max = k_max.max(p.candidates.len());
        for (z, s) in sums.iter_mut().enumerate() {
            for (slot, field) in [Field::Verb, Field::Noun, Field::Action].into_iter().enumerate() {
                s[slot] += edit_distance_at_z(&p.candidates, &t.actions, z + 1, field)?;
            }
        }
        v_pred.push(p.candidates[0][0].0);
        n_pred.push(p.candidates[0][0].1);
        v_gt.push(t.actions[0].0);
        n_gt.push(t.actions[0].1);
    }
    let n = targets.len() as f64;
    let per_step: Vec<StepEd> = sums
        .iter()
        .enumerate()
        .map(|(z, s)| StepEd {
            z: z + 1,
            verb_ed: s[0] / n,
            noun_ed: s[1] / n,
            action_ed: s[2] / n,
        })
        .collect();
    let mean = |f: fn(&StepEd) -> f64| per_step.iter().map(f).sum::<f64>() / horizon as f64;
    let last = per_step.last().expect("horizon >= 1");
    let (top1_verb, class_mean_verb) = class_mean_accuracy(&v_pred, &v_gt, verb_count)?;
    let (top1_noun, class_mean_noun) = class_mean_accuracy(&n_pred, &n_gt, noun_count)?;
    Ok(MetricsReport {
        examples: targets.len(),
        horizon,
        candidates: k_max,
        verb_ed: last.verb_ed,
        noun_ed: last.noun_ed,
        action_ed: last.action_ed,
        aued_verb: mean(|s| s.verb_ed),
        aued_noun: mean(|s| s.noun_ed),
        aued_action: mean(|s| s.action_ed),
        top1_verb,
        class_mean_verb,
        top1_noun,
        class_mean_noun,
        per_step,
    })
}

/// Candidate-generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub k: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            k: 5,
            temperature: 1.0,
            seed: 0,
        }
    }
}

/// Forward every example (in parallel, order preserved) and draw candidates.
pub fn predict<T: Real>(
    params: &ParamStore<T>,
    cfg: &PTEConfig,
    inputs: &[ModelInput],
    gen: &GenerationConfig,
) -> Result<Vec<PredictionSet>> {
    inputs
        .par_iter()
        .map(|input| {
            let out = pte_forward(params, cfg, input, &ForwardOptions::eval())?;
            let candidates = generate_candidates(
                &softmax_rows(&out.verb_logits),
                &softmax_rows(&out.noun_logits),
                gen.k,
                derive_seed(gen.seed, &[hash_str(&input.example_id)]),
                gen.temperature,
            )?;
            Ok(PredictionSet {
                example_id: input.example_id.clone(),
                candidates,
            })
        })
        .collect()
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &[PredictionSet]) -> Result<()> {
    write_jsonl(path.as_ref(), preds)
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionSet>> {
    Ok(read_jsonl(path.as_ref())?.into_iter().map(|(_, p)| p).collect())
}

pub const PER_STEP_HEADER: &str = "z,verb_ed,noun_ed,action_ed";

/// Per-step curve as CSV; values use shortest round-trip formatting.
pub fn per_step_csv(report: &MetricsReport) -> String {
    let mut s = format!("{PER_STEP_HEADER}\n");
    for r in &report.per_step {
        writeln!(s, "{},{},{},{}", r.z, r.verb_ed, r.noun_ed, r.action_ed).expect("string write");
    }
    s
}

pub fn write_per_step_csv(path: impl AsRef<Path>, report: &MetricsReport) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, per_step_csv(report)).map_err(|e| Error::io(path, e))
}

pub fn read_per_step_csv(path: impl AsRef<Path>) -> Result<Vec<StepEd>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == PER_STEP_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                message: format!("expected header `{PER_STEP_HEADER}`"),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |m: String| Error::Parse {
                path: path.into(),
                line: i + 1,
                message: m,
            };
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad(format!("expected 4 columns, got {}", f.len())));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(e.to_string()));
            Ok(StepEd {
                z: f[0].trim().parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                verb_ed: num(f[1])?,
                noun_ed: num(f[2])?,
                action_ed: num(f[3])?,
            })
        })
        .collect()
}

pub fn write_report(path: impl AsRef<Path>, report: &MetricsReport) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, serde_json::to_vec_pretty(report)?).map_err(|e| Error::io(path, e))
}
