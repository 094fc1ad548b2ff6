use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_jsonl, write_jsonl};
use crate::error::{Error, Result};

/// Pixel box in `(x1, y1, x2, y2)` order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxXyxy {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BoxXyxy {
    fn from([x1, y1, x2, y2]: [f64; 4]) -> Self {
        BoxXyxy { x1, y1, x2, y2 }
    }
}

impl From<BoxXyxy> for [f64; 4] {
    fn from(b: BoxXyxy) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BoxXyxy {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxXyxy { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x2 > self.x1
            && self.y2 > self.y1
    }
}

/// One grounded object; the exact line schema of `detections.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub video_id: String,
    pub segment_idx: u32,
    pub frame_idx: u32,
    #[serde(rename = "box")]
    pub bbox: BoxXyxy,
    pub category_idx: u32,
    pub score: f64,
    pub pack_id: String,
    pub row: u32,
}

impl DetectionRecord {
    pub fn validate(&self) -> Result<()> {
        if !self.bbox.is_valid() {
            return Err(Error::Validation(format!(
                "detection in `{}` segment {} frame {}: invalid box {:?}",
                self.video_id, self.segment_idx, self.frame_idx, self.bbox
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Validation(format!(
                "detection in `{}` segment {} frame {}: score {} outside [0, 1]",
                self.video_id, self.segment_idx, self.frame_idx, self.score
            )));
        }
        Ok(())
    }
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<DetectionRecord>> {
    let path = path.as_ref();
    let rows: Vec<(usize, DetectionRecord)> = read_jsonl(path)?;
    rows.into_iter()
        .map(|(line, d)| {
            d.validate().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            })?;
            Ok(d)
        })
        .collect()
}

pub fn write_detections(path: impl AsRef<Path>, dets: &[DetectionRecord]) -> Result<()> {
    write_jsonl(path.as_ref(), dets)
}
