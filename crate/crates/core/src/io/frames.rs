use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TemporalSpan, VideoAnnotation};

pub const FRAMES_PER_CLIP: usize = 10;

/// Clips at least this long are sampled with a stride of `LONG_CLIP_STRIDE`.
const LONG_CLIP_S: f64 = 10.0;
const LONG_CLIP_STRIDE: u64 = 5;

/// Frame numbers to extract from the end of one clip, latest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePlan {
    pub frame_indices: Vec<u64>,
    /// Set when clamping at the clip start produced repeated indices.
    pub duplicate_warning: bool,
}

/// Ten frames at the end of a clip: consecutive for clips shorter than 10 s,
/// every fifth frame otherwise, clamped at the clip's first frame.
pub fn plan_frames(span: TemporalSpan, fps: f64) -> Result<FramePlan> {
    if !(fps.is_finite() && fps > 0.0) {
        return Err(Error::InvalidArgument(format!("fps must be positive and finite, got {fps}")));
    }
    let span = TemporalSpan::new(span.start_s, span.end_s)?;
    let last = (span.end_s * fps).floor() as u64;
    let first = ((span.start_s * fps).floor() as u64).min(last);
    let stride = if span.width() < LONG_CLIP_S { 1 } else { LONG_CLIP_STRIDE };
    let frame_indices: Vec<u64> = (0..FRAMES_PER_CLIP as u64)
        .map(|k| last.saturating_sub(k * stride).max(first))
        .collect();
    let duplicate_warning = frame_indices.windows(2).any(|w| w[0] == w[1]);
    Ok(FramePlan {
        frame_indices,
        duplicate_warning,
    })
}

/// A frame plan tied to one step of one video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSamplePlan {
    pub video_id: String,
    pub step_index: u32,
    pub frame_indices: Vec<u64>,
    pub duplicate_warning: bool,
}

pub fn plan_video(video: &VideoAnnotation, fps: f64) -> Result<Vec<FrameSamplePlan>> {
    video
        .steps
        .iter()
        .map(|s| {
            let plan = plan_frames(s.span, fps)?;
            Ok(FrameSamplePlan {
                video_id: video.video_id.clone(),
                step_index: s.index,
                frame_indices: plan.frame_indices,
                duplicate_warning: plan.duplicate_warning,
            })
        })
        .collect()
}

fn image_id(video_id: &str, frame: u64) -> String {
    format!("{video_id}@{frame}")
}

/// Id of the facial image at the end of step `step_index`.
pub fn step_end_image(video: &VideoAnnotation, step_index: u32, fps: f64) -> Result<String> {
    let step = video.step(step_index).ok_or_else(|| {
        Error::InvalidArgument(format!("video {} has no step {step_index}", video.video_id))
    })?;
    let plan = plan_frames(step.span, fps)?;
    Ok(image_id(&video.video_id, plan.frame_indices[0]))
}

/// Distinct image ids sampled for a step, latest first.
pub fn step_frame_images(video: &VideoAnnotation, step_index: u32, fps: f64) -> Result<Vec<String>> {
    let step = video.step(step_index).ok_or_else(|| {
        Error::InvalidArgument(format!("video {} has no step {step_index}", video.video_id))
    })?;
    let mut frames = plan_frames(step.span, fps)?.frame_indices;
    frames.dedup();
    Ok(frames.into_iter().map(|f| image_id(&video.video_id, f)).collect())
}

/// Id of the face before any makeup: the frame where the first step starts.
pub fn pre_makeup_image(video: &VideoAnnotation, fps: f64) -> Result<String> {
    let first = video
        .steps
        .first()
        .ok_or_else(|| Error::InvalidArgument(format!("video {} has no steps", video.video_id)))?;
    Ok(image_id(&video.video_id, (first.span.start_s * fps).floor() as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(a: f64, b: f64) -> TemporalSpan {
        TemporalSpan { start_s: a, end_s: b }
    }

    #[test]
    fn long_clip_strides_by_five() {
        let p = plan_frames(span(0.0, 30.0), 10.0).unwrap();
        let want: Vec<u64> = (0..10).map(|k| 300 - 5 * k).collect();
        assert_eq!(p.frame_indices, want);
        assert_eq!(*p.frame_indices.last().unwrap(), 255);
        assert!(!p.duplicate_warning);
    }

    #[test]
    fn short_clip_is_consecutive() {
        let p = plan_frames(span(0.0, 3.0), 10.0).unwrap();
        assert_eq!(p.frame_indices, (21..=30).rev().collect::<Vec<u64>>());
    }

    #[test]
    fn ten_seconds_exactly_uses_stride() {
        let p = plan_frames(span(0.0, 10.0), 10.0).unwrap();
        assert_eq!(p.frame_indices[1], 95);
        let q = plan_frames(span(0.0, 9.999), 10.0).unwrap();
        assert_eq!(q.frame_indices[1], q.frame_indices[0] - 1);
    }

    #[test]
    fn tiny_clip_clamps_with_warning() {
        let p = plan_frames(span(0.0, 0.5), 2.0).unwrap();
        assert_eq!(p.frame_indices, vec![1, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert!(p.duplicate_warning);
    }

    #[test]
    fn clamps_at_clip_start_not_zero() {
        // 12 s clip starting at 100 s, 1 fps: 112, 107, 102, then clamped to 100.
        let p = plan_frames(span(100.0, 112.0), 1.0).unwrap();
        assert_eq!(&p.frame_indices[..5], &[112, 107, 102, 100, 100]);
        assert!(p.duplicate_warning);
    }

    #[test]
    fn errors() {
        assert!(plan_frames(span(0.0, 1.0), 0.0).is_err());
        assert!(plan_frames(span(0.0, 1.0), f64::NAN).is_err());
        assert!(plan_frames(span(2.0, 1.0), 10.0).is_err());
    }

    #[test]
    fn deterministic_gap_property() {
        for (a, b, fps) in [(3.0, 40.0, 25.0), (0.0, 9.5, 30.0), (7.0, 17.0, 24.0)] {
            let p = plan_frames(span(a, b), fps).unwrap();
            assert_eq!(p, plan_frames(span(a, b), fps).unwrap());
            let gap = if b - a < 10.0 { 1 } else { 5 };
            for w in p.frame_indices.windows(2) {
                assert_eq!(w[0] - w[1], gap);
            }
        }
    }
}
