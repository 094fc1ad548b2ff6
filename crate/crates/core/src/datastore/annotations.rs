use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_jsonl, write_jsonl};
use crate::error::{Error, Result};

/// One labelled segment; also the exact line schema of `annotations.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub video_id: String,
    pub segment_idx: u32,
    pub start_s: f64,
    pub end_s: f64,
    pub verb_id: u32,
    pub noun_id: u32,
    pub verb_name: String,
    pub noun_name: String,
}

impl Segment {
    /// Inclusive absolute frame range covered by the segment at `fps`.
    pub fn frame_range(&self, fps: f64) -> (u32, u32) {
        let first = (self.start_s * fps).floor().max(0.0) as u32;
        let last = ((self.end_s * fps).ceil() as u32).saturating_sub(1).max(first);
        (first, last)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VideoAnnotations {
    pub video_id: String,
    pub segments: Vec<Segment>,
}

/// Segments grouped per video in order of first appearance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnnotationSet {
    pub videos: Vec<VideoAnnotations>,
}

impl AnnotationSet {
    /// Group and validate segments. Rejects bad rows instead of repairing them.
    pub fn from_segments(segments: impl IntoIterator<Item = Segment>) -> Result<Self> {
        let mut videos: Vec<VideoAnnotations> = Vec::new();
        let mut slot: HashMap<String, usize> = HashMap::new();
        for seg in segments {
            validate_segment(&seg)?;
            let i = *slot.entry(seg.video_id.clone()).or_insert_with(|| {
                videos.push(VideoAnnotations {
                    video_id: seg.video_id.clone(),
                    segments: Vec::new(),
                });
                videos.len() - 1
            });
            if let Some(prev) = videos[i].segments.last() {
                if seg.segment_idx <= prev.segment_idx || seg.start_s < prev.start_s {
                    return Err(Error::Validation(format!(
                        "video `{}` segment {}: out of order after segment {} (start {} < {} or index not increasing)",
                        seg.video_id, seg.segment_idx, prev.segment_idx, seg.start_s, prev.start_s
                    )));
                }
            }
            videos[i].segments.push(seg);
        }
        Ok(AnnotationSet { videos })
    }

    pub fn video(&self, video_id: &str) -> Option<&VideoAnnotations> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.videos.iter().flat_map(|v| v.segments.iter())
    }

    pub fn segment_count(&self) -> usize {
        self.videos.iter().map(|v| v.segments.len()).sum()
    }

    /// Restrict to the listed videos, keeping this set's order.
    pub fn subset(&self, video_ids: &[String]) -> AnnotationSet {
        AnnotationSet {
            videos: self
                .videos
                .iter()
                .filter(|v| video_ids.contains(&v.video_id))
                .cloned()
                .collect(),
        }
    }

    /// Check that every id lies inside the configured vocabularies.
    pub fn check_vocab(&self, verb_count: usize, noun_count: usize) -> Result<()> {
        for s in self.segments() {
            if s.verb_id as usize >= verb_count || s.noun_id as usize >= noun_count {
                return Err(Error::Validation(format!(
                    "video `{}` segment {}: verb {} / noun {} outside vocabularies of {verb_count} / {noun_count}",
                    s.video_id, s.segment_idx, s.verb_id, s.noun_id
                )));
            }
        }
        Ok(())
    }
}

fn validate_segment(seg: &Segment) -> Result<()> {
    if !seg.start_s.is_finite() || !seg.end_s.is_finite() || seg.end_s <= seg.start_s {
        return Err(Error::Validation(format!(
            "video `{}` segment {}: end_s {} must exceed start_s {}",
            seg.video_id, seg.segment_idx, seg.end_s, seg.start_s
        )));
    }
    Ok(())
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    let path = path.as_ref();
    let rows: Vec<(usize, Segment)> = read_jsonl(path)?;
    AnnotationSet::from_segments(rows.into_iter().map(|(_, s)| s))
}

pub fn write_annotations(path: impl AsRef<Path>, set: &AnnotationSet) -> Result<()> {
    write_jsonl(path.as_ref(), set.segments())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn line(vid: &str, idx: u32, s: f64, e: f64, verb: u32, noun: u32) -> String {
        format!(
            r#"{{"video_id":"{vid}","segment_idx":{idx},"start_s":{s},"end_s":{e},"verb_id":{verb},"noun_id":{noun},"verb_name":"v{verb}","noun_name":"n{noun}"}}"#
        )
    }

    fn file(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn reads_two_segments() {
        let f = file(&[line("a", 0, 0.0, 2.0, 3, 7), line("a", 1, 2.0, 4.0, 1, 7)]);
        let set = read_annotations(f.path()).unwrap();
        assert_eq!(set.videos.len(), 1);
        assert_eq!(set.videos[0].segments.len(), 2);
        assert_eq!(set.videos[0].segments[1].verb_id, 1);
    }

    #[test]
    fn rejects_inverted_segment() {
        let f = file(&[line("a", 4, 3.0, 3.0, 0, 0)]);
        let err = read_annotations(f.path()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("segment 4"));
    }

    #[test]
    fn rejects_out_of_order() {
        let f = file(&[line("a", 1, 2.0, 4.0, 0, 0), line("a", 0, 0.0, 2.0, 0, 0)]);
        assert!(matches!(read_annotations(f.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = file(&[line("a", 0, 0.0, 1.0, 0, 0), "{not json".into()]);
        match read_annotations(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_set() {
        let f = file(&[]);
        assert_eq!(read_annotations(f.path()).unwrap(), AnnotationSet::default());
    }

    #[test]
    fn vocab_check() {
        let f = file(&[line("a", 0, 0.0, 1.0, 5, 1)]);
        let set = read_annotations(f.path()).unwrap();
        assert!(set.check_vocab(6, 2).is_ok());
        assert!(set.check_vocab(5, 2).is_err());
    }

    #[test]
    fn frame_range() {
        let f = file(&[line("a", 0, 0.0, 3.3, 0, 0)]);
        let set = read_annotations(f.path()).unwrap();
        assert_eq!(set.videos[0].segments[0].frame_range(30.0), (0, 98));
    }
}
