//! Readers and writers for every file the toolkit exchanges.

mod annotations;
mod features;
mod frames;
mod questions;

pub use annotations::{
    annotations_from_str, annotations_to_string, read_annotations, write_annotations, AnnotationSet,
};
pub use features::{decode_features, encode_features, read_features, write_features, FeatureStore};
pub use frames::{
    plan_frames, plan_video, pre_makeup_image, step_end_image, step_frame_images, FramePlan,
    FrameSamplePlan, FRAMES_PER_CLIP,
};
pub use questions::{
    check_predictions, choices_from_str, choices_to_string, localizations_to_string,
    questions_from_str, questions_to_string, read_choices, read_questions, read_triplets,
    triplets_to_string, write_choices, write_questions, write_triplets, Choices, Localization,
};

use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Byte offset of a 1-based (line, column) position reported by serde_json.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len();
    }
    text.len()
}

/// Parses a whole JSON document. Trailing non-whitespace is rejected and the
/// error carries the byte offset of the first offending character.
pub(crate) fn parse_json<T: DeserializeOwned>(text: &str, context: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        context: context.to_string(),
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })
}

pub(crate) fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("in-memory values always serialize");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_garbage_reports_offset() {
        let text = "{\"a\": 1}\n  xyz";
        let err = parse_json::<serde_json::Value>(text, "test").unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset, 11),
            other => panic!("unexpected {other:?}"),
        }
    }
}
