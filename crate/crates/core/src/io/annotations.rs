use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{parse_json, read_text, to_json, write_bytes};
use crate::error::{Error, Result};
use crate::model::{validate_annotation, FacialArea, StepAnnotation, TemporalSpan, VideoAnnotation, Violation};

#[derive(Serialize, Deserialize)]
struct AnnotationsDoc {
    videos: Vec<VideoDoc>,
}

#[derive(Serialize, Deserialize)]
struct VideoDoc {
    video_id: String,
    duration_s: f64,
    steps: Vec<StepDoc>,
}

#[derive(Serialize, Deserialize)]
struct StepDoc {
    index: u32,
    caption: String,
    start_s: f64,
    end_s: f64,
    areas: Vec<u8>,
}

/// Parsed annotations plus every invariant violation found while reading.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub videos: Vec<VideoAnnotation>,
    pub violations: Vec<(String, Violation)>,
}

impl AnnotationSet {
    pub fn video(&self, video_id: &str) -> Option<&VideoAnnotation> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }
}

pub fn annotations_from_str(text: &str, strict: bool) -> Result<AnnotationSet> {
    let doc: AnnotationsDoc = parse_json(text, "annotations")?;
    let mut videos = Vec::with_capacity(doc.videos.len());
    let mut violations = Vec::new();
    let mut seen = BTreeSet::new();
    for v in doc.videos {
        if !seen.insert(v.video_id.clone()) {
            return Err(Error::InvalidArgument(format!("duplicate video id `{}`", v.video_id)));
        }
        let mut steps = Vec::with_capacity(v.steps.len());
        for s in v.steps {
            let areas = s
                .areas
                .iter()
                .map(|&a| FacialArea::new(a))
                .collect::<Result<BTreeSet<_>>>()
                .map_err(|e| Error::InvalidArgument(format!("video {} step {}: {e}", v.video_id, s.index)))?;
            steps.push(StepAnnotation {
                index: s.index,
                caption: s.caption,
                span: TemporalSpan {
                    start_s: s.start_s,
                    end_s: s.end_s,
                },
                areas,
            });
        }
        let video = VideoAnnotation {
            video_id: v.video_id,
            duration_s: v.duration_s,
            steps,
        };
        for violation in validate_annotation(&video) {
            violations.push((video.video_id.clone(), violation));
        }
        videos.push(video);
    }
    if strict {
        if let Some((vid, first)) = violations.first() {
            return Err(Error::InvalidArgument(format!(
                "video {vid}: {first} ({} violation(s) in total)",
                violations.len()
            )));
        }
    }
    Ok(AnnotationSet { videos, violations })
}

pub fn annotations_to_string(videos: &[VideoAnnotation]) -> String {
    let doc = AnnotationsDoc {
        videos: videos
            .iter()
            .map(|v| VideoDoc {
                video_id: v.video_id.clone(),
                duration_s: v.duration_s,
                steps: v
                    .steps
                    .iter()
                    .map(|s| StepDoc {
                        index: s.index,
                        caption: s.caption.clone(),
                        start_s: s.span.start_s,
                        end_s: s.span.end_s,
                        areas: s.areas.iter().map(|a| a.region_id()).collect(),
                    })
                    .collect(),
            })
            .collect(),
    };
    to_json(&doc)
}

/// Reads an annotations file. Invariant violations are collected in the
/// result; with `strict` the first one becomes an error.
pub fn read_annotations(path: &Path, strict: bool) -> Result<AnnotationSet> {
    annotations_from_str(&read_text(path)?, strict)
}

pub fn write_annotations(path: &Path, videos: &[VideoAnnotation]) -> Result<()> {
    write_bytes(path, annotations_to_string(videos).as_bytes())
}
