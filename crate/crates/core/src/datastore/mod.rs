//! On-disk formats and example construction.
//!
//! * `annotations.jsonl` — one labelled segment per line.
//! * `detections.jsonl` — one grounded box per line, pointing into a feature pack.
//! * `*.fpk` — the `FPK1` little-endian `f32` row container with a key index.
//! * `split.json` — train/val video ids.

mod annotations;
mod dataset;
mod detections;
mod examples;
mod fpk;

pub use annotations::{read_annotations, write_annotations, AnnotationSet, Segment, VideoAnnotations};
pub use dataset::{Dataset, Split, SplitName, ANNOTATIONS_FILE, DETECTIONS_FILE, PACKS_DIR, SPLIT_FILE};
pub use detections::{read_detections, write_detections, BoxXyxy, DetectionRecord};
pub use examples::{
    build_examples, clip_key, enumerate_windows, ExampleConfig, LTAExample, Window,
};
pub use fpk::{read_feature_pack, write_feature_pack, FeaturePack, FeatureStore, FPK_MAGIC};

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Parse a JSON-lines file, skipping blank lines; errors carry 1-based line numbers.
pub(crate) fn read_jsonl<R: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, R)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

pub(crate) fn write_jsonl<'a, R: Serialize + 'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a R>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
