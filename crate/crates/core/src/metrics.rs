//! Evaluation metrics and the report document.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::tiou;
use crate::io::{check_predictions, Choices};
use crate::model::TemporalSpan;

/// Fraction of keyed questions answered correctly. Predictions must cover
/// exactly the keyed question ids.
pub fn multi_choice_accuracy(predictions: &Choices, key: &Choices) -> Result<f64> {
    if key.is_empty() {
        return Err(Error::EmptySet("answer key"));
    }
    check_predictions(predictions, key)?;
    let correct = key.iter().filter(|(q, a)| predictions[*q] == **a).count();
    Ok(correct as f64 / key.len() as f64)
}

/// 0-based rank of the true target for each query of one video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoRanking {
    pub video_id: String,
    pub target_ranks: Vec<usize>,
}

/// Per-video recall at `k`, averaged over videos with equal weight.
pub fn recall_at_k_retrieval(videos: &[VideoRanking], k: usize) -> Result<f64> {
    if videos.is_empty() {
        return Err(Error::EmptySet("video"));
    }
    let mut sum = 0.0;
    for v in videos {
        if v.target_ranks.is_empty() {
            return Err(Error::InvalidArgument(format!("video {} has no queries", v.video_id)));
        }
        let hits = v.target_ranks.iter().filter(|&&r| r < k).count();
        sum += hits as f64 / v.target_ranks.len() as f64;
    }
    Ok(sum / videos.len() as f64)
}

/// Fraction of queries with at least one of the top-`k` predictions at
/// tIoU `>= m`. Each query's predictions must be sorted by descending score.
pub fn recall_at_k_tiou(predictions: &[Vec<TemporalSpan>], groundtruths: &[TemporalSpan], k: usize, m: f64) -> Result<f64> {
    if predictions.len() != groundtruths.len() {
        return Err(Error::Shape(format!(
            "{} prediction lists for {} groundtruths",
            predictions.len(),
            groundtruths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::EmptySet("query"));
    }
    let mut hits = 0;
    for (i, (preds, gt)) in predictions.iter().zip(groundtruths).enumerate() {
        if preds.len() < k {
            return Err(Error::InvalidArgument(format!(
                "query {i} has {} predictions, k = {k}",
                preds.len()
            )));
        }
        if preds[..k].iter().any(|p| tiou(p, gt) >= m) {
            hits += 1;
        }
    }
    Ok(hits as f64 / predictions.len() as f64)
}

/// Mean top-1 tIoU over queries.
pub fn mean_iou(top1: &[TemporalSpan], groundtruths: &[TemporalSpan]) -> Result<f64> {
    if top1.len() != groundtruths.len() {
        return Err(Error::Shape(format!("{} predictions for {} groundtruths", top1.len(), groundtruths.len())));
    }
    if top1.is_empty() {
        return Err(Error::EmptySet("query"));
    }
    Ok(top1.iter().zip(groundtruths).map(|(p, g)| tiou(p, g)).sum::<f64>() / top1.len() as f64)
}

/// Unit-cost edit distance between two symbol sequences.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Default recall grid.
pub const RECALL_KS: [usize; 2] = [1, 5];
pub const RECALL_TIOUS: [f64; 4] = [0.1, 0.3, 0.5, 0.7];

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Serialized evaluation result. Display fields are rounded to two
/// decimals; `raw` keeps full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub n: usize,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_gap: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<BTreeMap<String, f64>>,
    pub raw: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn new(task: &str, n: usize, accuracy: f64) -> EvalReport {
        EvalReport {
            task: task.to_string(),
            n,
            accuracy: round2(accuracy),
            per_gap: None,
            recall: None,
            raw: BTreeMap::from([("accuracy".to_string(), accuracy)]),
        }
    }

    pub fn with_per_gap(mut self, per_gap: &BTreeMap<String, f64>) -> EvalReport {
        for (g, a) in per_gap {
            self.raw.insert(format!("per_gap.{g}"), *a);
        }
        self.per_gap = Some(per_gap.iter().map(|(g, a)| (g.clone(), round2(*a))).collect());
        self
    }

    pub fn with_recall(mut self, recall: &BTreeMap<String, f64>) -> EvalReport {
        for (name, v) in recall {
            self.raw.insert(format!("recall.{name}"), *v);
        }
        self.recall = Some(recall.iter().map(|(k, v)| (k.clone(), round2(*v))).collect());
        self
    }

    pub fn to_json(&self) -> String {
        crate::io::to_json(self)
    }
}
