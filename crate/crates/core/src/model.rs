//! Domain types shared by every stage of the pipeline.
//!
//! Values are plain data: once built they are only read, so they can be
//! shared freely between threads.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of annotated face regions.
pub const FACIAL_REGION_COUNT: usize = 24;

/// Items per ordering question.
pub const ITEMS_PER_QUESTION: usize = 5;

/// Candidate answers per ordering question.
pub const CANDIDATES_PER_QUESTION: usize = 4;

/// A half-open time range inside a video, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalSpan {
    pub start_s: f64,
    pub end_s: f64,
}

impl TemporalSpan {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self> {
        let span = TemporalSpan { start_s, end_s };
        match span.check() {
            None => Ok(span),
            Some(reason) => Err(Error::InvalidSpan {
                start_s,
                end_s,
                reason,
            }),
        }
    }

    fn check(&self) -> Option<&'static str> {
        if !self.start_s.is_finite() || !self.end_s.is_finite() {
            Some("non-finite bound")
        } else if self.start_s < 0.0 || self.end_s < 0.0 {
            Some("negative bound")
        } else if self.start_s >= self.end_s {
            Some("start >= end")
        } else {
            None
        }
    }

    pub fn is_valid(&self) -> bool {
        self.check().is_none()
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start_s + self.end_s)
    }

    pub fn width(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn intersection(&self, other: &TemporalSpan) -> f64 {
        (self.end_s.min(other.end_s) - self.start_s.max(other.start_s)).max(0.0)
    }
}

/// One of the 24 face regions. Region ids are opaque; names come from an
/// optional [`AreaLabels`] table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct FacialArea(u8);

impl FacialArea {
    pub fn new(region_id: u8) -> Result<Self> {
        if (region_id as usize) < FACIAL_REGION_COUNT {
            Ok(FacialArea(region_id))
        } else {
            Err(Error::InvalidArgument(format!(
                "facial region id {region_id} outside [0, {}]",
                FACIAL_REGION_COUNT - 1
            )))
        }
    }

    pub fn region_id(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = FacialArea> {
        (0..FACIAL_REGION_COUNT as u8).map(FacialArea)
    }
}

impl TryFrom<u8> for FacialArea {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        FacialArea::new(value)
    }
}

impl From<FacialArea> for u8 {
    fn from(area: FacialArea) -> u8 {
        area.0
    }
}

/// User-supplied display names for the 24 face regions.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaLabels(Vec<String>);

impl AreaLabels {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.len() != FACIAL_REGION_COUNT {
            return Err(Error::InvalidArgument(format!(
                "expected {FACIAL_REGION_COUNT} region labels, got {}",
                labels.len()
            )));
        }
        Ok(AreaLabels(labels))
    }

    pub fn label(&self, area: FacialArea) -> &str {
        &self.0[area.0 as usize]
    }
}

impl Default for AreaLabels {
    fn default() -> Self {
        AreaLabels((0..FACIAL_REGION_COUNT).map(|i| format!("region_{i:02}")).collect())
    }
}

/// Multi-hot encoding of a set of areas.
pub fn area_indicator(areas: &BTreeSet<FacialArea>) -> [f64; FACIAL_REGION_COUNT] {
    let mut out = [0.0; FACIAL_REGION_COUNT];
    for a in areas {
        out[a.0 as usize] = 1.0;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepAnnotation {
    /// 1-based position of the step in its video.
    pub index: u32,
    pub caption: String,
    pub span: TemporalSpan,
    pub areas: BTreeSet<FacialArea>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub duration_s: f64,
    pub steps: Vec<StepAnnotation>,
}

impl VideoAnnotation {
    pub fn step(&self, index: u32) -> Option<&StepAnnotation> {
        self.steps.iter().find(|s| s.index == index)
    }

    /// Steps whose spans overlap their predecessor. Overlap is allowed but
    /// worth reporting.
    pub fn overlapping_steps(&self) -> Vec<u32> {
        self.steps
            .windows(2)
            .filter(|w| w[1].span.start_s < w[0].span.end_s)
            .map(|w| w[1].index)
            .collect()
    }
}

/// A single broken invariant found by [`validate_annotation`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    /// 1-based position in the step list, when the violation concerns a step.
    pub position: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.position {
            Some(p) => write!(f, "{} (step position {p}): {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

/// Lists every invariant violation in `a`. An empty list means the
/// annotation is well formed.
pub fn validate_annotation(a: &VideoAnnotation) -> Vec<Violation> {
    let mut out = Vec::new();
    if a.video_id.is_empty() {
        out.push(Violation {
            field: "video_id",
            position: None,
            message: "empty video id".into(),
        });
    }
    if !a.duration_s.is_finite() || a.duration_s <= 0.0 {
        out.push(Violation {
            field: "duration_s",
            position: None,
            message: format!("duration {} is not a positive finite number", a.duration_s),
        });
    }
    let mut prev_start: Option<f64> = None;
    for (i, step) in a.steps.iter().enumerate() {
        let position = i + 1;
        if step.index as usize != position {
            out.push(Violation {
                field: "index",
                position: Some(position),
                message: format!("non-contiguous index at position {position} (found {})", step.index),
            });
        }
        if step.caption.trim().is_empty() {
            out.push(Violation {
                field: "caption",
                position: Some(position),
                message: "empty caption".into(),
            });
        }
        let span = step.span;
        if let Some(reason) = span.check() {
            out.push(Violation {
                field: "span",
                position: Some(position),
                message: format!("{reason} ({}, {})", span.start_s, span.end_s),
            });
        } else if a.duration_s.is_finite() && span.end_s > a.duration_s {
            out.push(Violation {
                field: "span",
                position: Some(position),
                message: format!("end {} exceeds video duration {}", span.end_s, a.duration_s),
            });
        }
        if let Some(p) = prev_start {
            if span.start_s < p {
                out.push(Violation {
                    field: "start_s",
                    position: Some(position),
                    message: format!("start {} precedes previous step start {p}", span.start_s),
                });
            }
        }
        prev_start = Some(span.start_s);
    }
    out
}

/// Which of the two ordering tasks a question belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ImageOrdering,
    StepOrdering,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::ImageOrdering => "image_ordering",
            Task::StepOrdering => "step_ordering",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image_ordering" => Ok(Task::ImageOrdering),
            "step_ordering" => Ok(Task::StepOrdering),
            other => Err(Error::InvalidArgument(format!("unknown task `{other}`"))),
        }
    }
}

/// An ordering of five presented items.
///
/// `order[i]` is the presentation index of the item placed at chronological
/// position `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Permutation5([u8; ITEMS_PER_QUESTION]);

impl Permutation5 {
    pub const IDENTITY: Permutation5 = Permutation5([0, 1, 2, 3, 4]);

    pub fn new(order: [u8; ITEMS_PER_QUESTION]) -> Result<Self> {
        let mut seen = [false; ITEMS_PER_QUESTION];
        for &v in &order {
            let v = v as usize;
            if v >= ITEMS_PER_QUESTION || seen[v] {
                return Err(Error::InvalidArgument(format!(
                    "{order:?} is not a permutation of 0..5"
                )));
            }
            seen[v] = true;
        }
        Ok(Permutation5(order))
    }

    pub fn from_slice(order: &[i64]) -> Result<Self> {
        if order.len() != ITEMS_PER_QUESTION {
            return Err(Error::InvalidArgument(format!(
                "permutation must have 5 entries, got {}",
                order.len()
            )));
        }
        let mut out = [0u8; ITEMS_PER_QUESTION];
        for (slot, &v) in out.iter_mut().zip(order) {
            *slot = u8::try_from(v)
                .map_err(|_| Error::InvalidArgument(format!("permutation entry {v} out of range")))?;
        }
        Permutation5::new(out)
    }

    pub fn order(&self) -> &[u8; ITEMS_PER_QUESTION] {
        &self.0
    }

    /// Items rearranged into the order this permutation claims is chronological.
    pub fn apply<'a, T>(&self, items: &'a [T]) -> Vec<&'a T> {
        self.0.iter().map(|&i| &items[i as usize]).collect()
    }

    pub fn reversed(&self) -> Permutation5 {
        let mut o = self.0;
        o.reverse();
        Permutation5(o)
    }

    /// Builds the permutation that sorts `keys` ascending, breaking ties by
    /// presentation index.
    pub fn sorting<K: PartialOrd>(keys: &[K]) -> Result<Permutation5> {
        if keys.len() != ITEMS_PER_QUESTION {
            return Err(Error::InvalidArgument(format!(
                "expected 5 keys, got {}",
                keys.len()
            )));
        }
        let mut idx: Vec<u8> = (0..ITEMS_PER_QUESTION as u8).collect();
        idx.sort_by(|&a, &b| {
            keys[a as usize]
                .partial_cmp(&keys[b as usize])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut out = [0u8; ITEMS_PER_QUESTION];
        out.copy_from_slice(&idx);
        Ok(Permutation5(out))
    }

    /// All 120 permutations in lexicographic order.
    pub fn all() -> Vec<Permutation5> {
        let mut out = Vec::with_capacity(120);
        let mut cur = [0u8; ITEMS_PER_QUESTION];
        fn rec(depth: usize, used: &mut [bool; 5], cur: &mut [u8; 5], out: &mut Vec<Permutation5>) {
            if depth == ITEMS_PER_QUESTION {
                out.push(Permutation5(*cur));
                return;
            }
            for v in 0..ITEMS_PER_QUESTION {
                if !used[v] {
                    used[v] = true;
                    cur[depth] = v as u8;
                    rec(depth + 1, used, cur, out);
                    used[v] = false;
                }
            }
        }
        rec(0, &mut [false; 5], &mut cur, &mut out);
        out
    }
}

impl fmt::Display for Permutation5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = self.0;
        write!(f, "({},{},{},{},{})", o[0], o[1], o[2], o[3], o[4])
    }
}

/// A complete multi-choice ordering question.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderingQuestion {
    pub question_id: String,
    pub task: Task,
    pub video_id: String,
    /// Image ids (image ordering) or captions (step ordering), in
    /// presentation order.
    pub items: Vec<String>,
    /// Step descriptions in chronological order. Present on image-ordering
    /// questions, where they are part of the prompt.
    pub captions: Option<Vec<String>>,
    pub candidates: [Permutation5; CANDIDATES_PER_QUESTION],
    pub answer: Option<u8>,
}

impl OrderingQuestion {
    /// Structural checks: five items, distinct candidates, answer in range.
    pub fn validate(&self) -> Result<()> {
        if self.items.len() != ITEMS_PER_QUESTION {
            return Err(Error::InvalidArgument(format!(
                "question {}: expected 5 items, got {}",
                self.question_id,
                self.items.len()
            )));
        }
        for i in 0..CANDIDATES_PER_QUESTION {
            for j in i + 1..CANDIDATES_PER_QUESTION {
                if self.candidates[i] == self.candidates[j] {
                    return Err(Error::InvalidArgument(format!(
                        "question {}: candidates {i} and {j} are identical",
                        self.question_id
                    )));
                }
            }
        }
        if let Some(a) = self.answer {
            if a as usize >= CANDIDATES_PER_QUESTION {
                return Err(Error::ChoiceOutOfRange {
                    qid: self.question_id.clone(),
                    index: a as i64,
                });
            }
        }
        Ok(())
    }

    pub fn without_answer(&self) -> OrderingQuestion {
        OrderingQuestion {
            answer: None,
            ..self.clone()
        }
    }
}

/// A finite real vector carrying an image, segment or token embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f32>);

impl FeatureVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "feature value".into(),
                detail: format!("entry {pos} is {}", values[pos]),
            });
        }
        Ok(FeatureVector(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(index: u32, start: f64, end: f64) -> StepAnnotation {
        StepAnnotation {
            index,
            caption: format!("step {index}"),
            span: TemporalSpan { start_s: start, end_s: end },
            areas: BTreeSet::new(),
        }
    }

    fn video(steps: Vec<StepAnnotation>) -> VideoAnnotation {
        VideoAnnotation {
            video_id: "v".into(),
            duration_s: 1000.0,
            steps,
        }
    }

    #[test]
    fn well_formed_ten_steps() {
        let steps = (1..=10).map(|i| step(i, (i - 1) as f64 * 10.0, i as f64 * 10.0)).collect();
        assert!(validate_annotation(&video(steps)).is_empty());
    }

    #[test]
    fn non_contiguous_index() {
        let v = video(vec![step(1, 0.0, 1.0), step(2, 1.0, 2.0), step(4, 2.0, 3.0)]);
        let errs = validate_annotation(&v);
        assert_eq!(errs.len(), 1);
        assert!(errs[0].message.starts_with("non-contiguous index at position 3"));
        assert_eq!(errs[0].position, Some(3));
    }

    #[test]
    fn reversed_span() {
        let v = video(vec![step(1, 5.0, 3.0)]);
        let errs = validate_annotation(&v);
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].field, "span");
        assert!(errs[0].message.contains("start >= end"));
    }

    #[test]
    fn decreasing_start_and_overflowing_span() {
        let mut v = video(vec![step(1, 10.0, 20.0), step(2, 5.0, 2000.0)]);
        v.duration_s = 100.0;
        let fields: Vec<_> = validate_annotation(&v).iter().map(|e| e.field).collect();
        assert_eq!(fields, vec!["span", "start_s"]);
    }

    #[test]
    fn overlap_is_reported_not_violated() {
        let v = video(vec![step(1, 0.0, 10.0), step(2, 5.0, 12.0)]);
        assert!(validate_annotation(&v).is_empty());
        assert_eq!(v.overlapping_steps(), vec![2]);
    }

    #[test]
    fn span_constructor_checks() {
        assert!(TemporalSpan::new(0.0, 1.0).is_ok());
        assert!(TemporalSpan::new(1.0, 1.0).is_err());
        assert!(TemporalSpan::new(-1.0, 1.0).is_err());
        assert!(TemporalSpan::new(0.0, f64::NAN).is_err());
    }

    #[test]
    fn facial_area_range() {
        assert_eq!(FacialArea::all().count(), 24);
        assert!(FacialArea::new(23).is_ok());
        assert!(FacialArea::new(24).is_err());
        assert_eq!(AreaLabels::default().label(FacialArea::new(3).unwrap()), "region_03");
    }

    #[test]
    fn permutation_checks() {
        assert!(Permutation5::new([0, 1, 2, 3, 4]).is_ok());
        assert!(Permutation5::new([0, 1, 2, 3, 3]).is_err());
        assert!(Permutation5::new([0, 1, 2, 3, 5]).is_err());
        assert_eq!(Permutation5::all().len(), 120);
        let p = Permutation5::sorting(&[30, 10, 20, 10, 0]).unwrap();
        assert_eq!(p.order(), &[4, 1, 3, 2, 0]);
        let items = ["a", "b", "c", "d", "e"];
        let applied: Vec<&str> = p.apply(&items).into_iter().copied().collect();
        assert_eq!(applied, vec!["e", "b", "d", "c", "a"]);
    }

    #[test]
    fn feature_vector_rejects_nan() {
        assert!(FeatureVector::new(vec![1.0, f32::NAN]).is_err());
        assert_eq!(FeatureVector::new(vec![1.0, 2.0]).unwrap().len(), 2);
    }
}
