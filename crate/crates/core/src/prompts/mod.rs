//! Object-prompt vocabularies built from task knowledge.

mod kmeans;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans_cluster, KMeansConfig, KMeansResult};

use crate::datastore::{AnnotationSet, FeaturePack};
use crate::error::{Error, Result};

/// Default vocabulary size.
pub const DEFAULT_PROMPT_CAP: usize = 80;

/// The 80 COCO object categories, in their conventional order.
pub const COCO_CATEGORIES: [&str; 80] = [
    "person", "bicycle", "car", "motorcycle", "airplane", "bus",
    "train", "truck", "boat", "traffic light", "fire hydrant", "stop sign",
    "parking meter", "bench", "bird", "cat", "dog", "horse",
    "sheep", "cow", "elephant", "bear", "zebra", "giraffe",
    "backpack", "umbrella", "handbag", "tie", "suitcase", "frisbee",
    "skis", "snowboard", "sports ball", "kite", "baseball bat", "baseball glove",
    "skateboard", "surfboard", "tennis racket", "bottle", "wine glass", "cup",
    "fork", "knife", "spoon", "bowl", "banana", "apple",
    "sandwich", "orange", "broccoli", "carrot", "hot dog", "pizza",
    "donut", "cake", "chair", "couch", "potted plant", "bed",
    "dining table", "toilet", "tv", "laptop", "mouse", "remote",
    "keyboard", "cell phone", "microwave", "oven", "toaster", "sink",
    "refrigerator", "book", "clock", "vase", "scissors", "teddy bear",
    "hair drier", "toothbrush",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    MostCommon,
    Kmeans,
    Fixed,
    /// Random-box baseline: the vocabulary only supplies categories for random regions.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub representative: String,
    pub members: Vec<String>,
    pub total_count: u64,
}

/// Where a vocabulary came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub counts: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clusters: Vec<ClusterSummary>,
    /// Nouns dropped because they had no embedding.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptList {
    pub entries: Vec<String>,
    pub strategy: Strategy,
    #[serde(default)]
    pub provenance: Provenance,
}

impl PromptList {
    pub fn new(entries: Vec<String>, strategy: Strategy, provenance: Provenance) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.as_str()) {
                return Err(Error::Validation(format!("duplicate prompt `{e}`")));
            }
        }
        Ok(PromptList {
            entries,
            strategy,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e == name)
    }

    /// `(category_name, category_idx)` pairs; the index is the position.
    pub fn indexed(&self) -> impl Iterator<Item = (&str, usize)> {
        self.entries.iter().enumerate().map(|(i, e)| (e.as_str(), i))
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Newline-separated names, the format external grounding tools consume.
    pub fn save_text(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = self.entries.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// Load either a JSON prompt list or a plain newline-separated file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let list: PromptList = serde_json::from_slice(&bytes)?;
            return PromptList::new(list.entries, list.strategy, list.provenance);
        }
        load_fixed_prompts(path)
    }
}

/// Word embeddings keyed by category name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation(format!(
                "embedding must be finite with dim {}",
                self.dim
            )));
        }
        self.vectors.insert(name.into(), v);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.vectors.get(name).map(Vec::as_slice)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Read an `FPK1` pack keyed by category name.
    pub fn from_pack(pack: &FeaturePack) -> Result<Self> {
        let mut t = EmbeddingTable::new(pack.dim());
        for (k, r) in pack.keys() {
            let row = pack.row(*r as usize).expect("index validated on decode");
            t.insert(k.clone(), row.iter().map(|v| *v as f64).collect())?;
        }
        Ok(t)
    }
}

/// Noun occurrences over the given (training) annotations.
pub fn count_noun_frequencies(annotations: &AnnotationSet) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for s in annotations.segments() {
        *counts.entry(s.noun_name.clone()).or_insert(0) += 1;
    }
    counts
}

/// Names sorted by count descending, ties lexicographically ascending.
fn ranked(counts: &BTreeMap<String, u64>) -> Vec<(&String, u64)> {
    let mut v: Vec<_> = counts.iter().map(|(k, c)| (k, *c)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    v
}

/// Top-`n` nouns by frequency.
pub fn build_most_common(counts: &BTreeMap<String, u64>, n: usize) -> Result<PromptList> {
    if n == 0 {
        return Err(Error::Parameter("prompt count must be at least 1".into()));
    }
    let entries = ranked(counts)
        .into_iter()
        .take(n)
        .map(|(k, _)| k.clone())
        .collect();
    PromptList::new(
        entries,
        Strategy::MostCommon,
        Provenance {
            counts: counts.clone(),
            ..Default::default()
        },
    )
}

/// Cluster nouns in embedding space, keep each cluster's most frequent member,
/// rank clusters by summed frequency and take the top `n` representatives.
pub fn build_kmeans_prompts(
    counts: &BTreeMap<String, u64>,
    table: &EmbeddingTable,
    k: usize,
    n: usize,
    seed: u64,
) -> Result<PromptList> {
    if counts.is_empty() {
        return Err(Error::Parameter("no noun counts to cluster".into()));
    }
    if n == 0 || k == 0 {
        return Err(Error::Parameter("k and prompt count must be at least 1".into()));
    }
    let (known, missing): (Vec<_>, Vec<_>) =
        counts.keys().partition(|name| table.get(name).is_some());
    if known.is_empty() {
        return Err(Error::Parameter("no counted noun has an embedding".into()));
    }
    let vectors: Vec<Vec<f64>> = known
        .iter()
        .map(|name| table.get(name).expect("partitioned").to_vec())
        .collect();
    let fit = kmeans_cluster(&vectors, &KMeansConfig::new(k.min(known.len()), seed))?;

    let mut groups: Vec<Vec<&String>> = vec![Vec::new(); fit.centroids.len()];
    for (name, a) in known.iter().zip(&fit.assignments) {
        groups[*a].push(name);
    }
    let mut clusters: Vec<ClusterSummary> = groups
        .into_iter()
        .filter(|g| !g.is_empty())
        .map(|mut members| {
            members.sort_by(|a, b| counts[*b].cmp(&counts[*a]).then_with(|| a.cmp(b)));
            ClusterSummary {
                representative: members[0].clone(),
                total_count: members.iter().map(|m| counts[*m]).sum(),
                members: members.into_iter().cloned().collect(),
            }
        })
        .collect();
    clusters.sort_by(|a, b| {
        b.total_count
            .cmp(&a.total_count)
            .then_with(|| a.representative.cmp(&b.representative))
    });
    let entries = clusters
        .iter()
        .take(n)
        .map(|c| c.representative.clone())
        .collect();
    PromptList::new(
        entries,
        Strategy::Kmeans,
        Provenance {
            counts: counts.clone(),
            clusters,
            missing: missing.into_iter().cloned().collect(),
        },
    )
}

/// The COCO list as a fixed vocabulary.
pub fn coco_prompts() -> PromptList {
    PromptList::new(COCO_CATEGORIES.iter().map(|c| c.to_string()).collect(), Strategy::Fixed, Provenance::default())
        .expect("category names are distinct")
}

/// Newline-separated category file; order preserved, blank lines ignored.
pub fn load_fixed_prompts(path: impl AsRef<Path>) -> Result<PromptList> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    PromptList::new(entries, Strategy::Fixed, Provenance::default())
}
