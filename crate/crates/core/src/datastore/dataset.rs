use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_annotations, read_detections, AnnotationSet, DetectionRecord, FeatureStore};
use crate::error::{Error, Result};

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const PACKS_DIR: &str = "packs";
pub const SPLIT_FILE: &str = "split.json";

/// Video ids of each split; the exact schema of `split.json`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl Split {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let split: Split = serde_json::from_slice(&bytes)?;
        if let Some(v) = split.train.iter().find(|v| split.val.contains(v)) {
            return Err(Error::Validation(format!("video `{v}` is in both splits")));
        }
        Ok(split)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }
}

/// A dataset directory in the standard layout:
/// `annotations.jsonl`, `detections.jsonl`, `packs/*.fpk` and an optional `split.json`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub annotations: AnnotationSet,
    pub detections: Vec<DetectionRecord>,
    pub packs: FeatureStore,
    pub split: Option<Split>,
}

impl Dataset {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let split_path = root.join(SPLIT_FILE);
        let split = if split_path.exists() {
            Some(Split::read(&split_path)?)
        } else {
            None
        };
        Ok(Dataset {
            annotations: read_annotations(root.join(ANNOTATIONS_FILE))?,
            detections: read_detections(root.join(DETECTIONS_FILE))?,
            packs: FeatureStore::load_dir(root.join(PACKS_DIR))?,
            split,
            root,
        })
    }

    /// Annotations of one split, or everything when there is no split file.
    pub fn subset(&self, which: SplitName) -> AnnotationSet {
        match (&self.split, which) {
            (None, _) => self.annotations.clone(),
            (Some(s), SplitName::Train) => self.annotations.subset(&s.train),
            (Some(s), SplitName::Val) => self.annotations.subset(&s.val),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
}
