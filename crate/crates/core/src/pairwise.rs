//! Siamese pairwise ordering: pair datasets, comparators, candidate scoring
//! and the easy-to-hard curriculum.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{sigmoid, Graph, ParamStore, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::io::{pre_makeup_image, step_frame_images, Choices, FeatureStore};
use crate::model::{OrderingQuestion, Permutation5, VideoAnnotation, ITEMS_PER_QUESTION};
use crate::nn::{Mlp, SentenceEncoder, Vocabulary};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Tensor;
use crate::train::{self, EpochLog, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSample {
    pub video_id: String,
    pub item_a: String,
    pub item_b: String,
    /// 1 if `item_a` occurs earlier than `item_b`.
    pub label: u8,
    pub step_gap: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairItems {
    Images,
    Captions,
}

/// Every pair of distinct steps of every video, in both orientations. For
/// images one sampled frame per step represents the pair; with `features`
/// given, frames without a stored vector are skipped.
pub fn build_pair_dataset(
    videos: &[VideoAnnotation],
    items: PairItems,
    features: Option<&FeatureStore>,
    seed: u64,
    fps: f64,
) -> Result<Vec<PairSample>> {
    let mut out = Vec::new();
    for v in videos {
        if v.steps.len() < 2 {
            continue;
        }
        let mut per_step = Vec::with_capacity(v.steps.len());
        for s in &v.steps {
            let its = match items {
                PairItems::Images => step_frame_images(v, s.index, fps)?
                    .into_iter()
                    .filter(|id| features.is_none_or(|f| f.contains(id)))
                    .collect(),
                PairItems::Captions => vec![s.caption.clone()],
            };
            per_step.push((s.index, its));
        }
        let mut rng = rng_for(seed, &format!("pairs/{}", v.video_id));
        for i in 0..per_step.len() {
            for j in i + 1..per_step.len() {
                let (si, ref ii) = per_step[i];
                let (sj, ref ij) = per_step[j];
                let (Some(a), Some(b)) = (ii.choose(&mut rng), ij.choose(&mut rng)) else {
                    continue;
                };
                let gap = sj.abs_diff(si);
                for (x, y, label) in [(a, b, 1), (b, a, 0)] {
                    out.push(PairSample {
                        video_id: v.video_id.clone(),
                        item_a: x.clone(),
                        item_b: y.clone(),
                        label,
                        step_gap: gap,
                    });
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::EmptySet("pair dataset"));
    }
    out.shuffle(&mut rng_for(seed, "pairs/order"));
    Ok(out)
}

/// Estimates P(a occurs earlier than b) within a video.
pub trait PairwiseScorer: Sync {
    fn probability(&self, video_id: &str, a: &str, b: &str) -> Result<f64>;

    /// `m[i][j]` = P(items[i] earlier than items[j]); the diagonal is unused.
    fn probability_matrix(&self, video_id: &str, items: &[String]) -> Result<Vec<Vec<f64>>> {
        let n = items.len();
        let mut m = vec![vec![0.5; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    m[i][j] = self.probability(video_id, &items[i], &items[j])?;
                }
            }
        }
        Ok(m)
    }
}

/// Ground-truth comparator backed by annotated step indices. Knows every
/// sampled frame, the pre-makeup image (step 0) and every caption.
#[derive(Debug, Clone, Default)]
pub struct OracleComparator {
    steps: HashMap<String, HashMap<String, u32>>,
}

impl OracleComparator {
    pub fn from_annotations(videos: &[VideoAnnotation], fps: f64) -> Result<Self> {
        let mut steps = HashMap::new();
        for v in videos {
            let mut m = HashMap::new();
            if !v.steps.is_empty() {
                m.insert(pre_makeup_image(v, fps)?, 0);
            }
            for s in &v.steps {
                for img in step_frame_images(v, s.index, fps)? {
                    m.entry(img).or_insert(s.index);
                }
                m.entry(s.caption.clone()).or_insert(s.index);
            }
            steps.insert(v.video_id.clone(), m);
        }
        Ok(OracleComparator { steps })
    }

    pub fn step_of(&self, video_id: &str, item: &str) -> Result<u32> {
        self.steps
            .get(video_id)
            .and_then(|m| m.get(item))
            .copied()
            .ok_or_else(|| Error::UnknownItem(format!("{video_id}/{item}")))
    }
}

impl PairwiseScorer for OracleComparator {
    fn probability(&self, video_id: &str, a: &str, b: &str) -> Result<f64> {
        let (sa, sb) = (self.step_of(video_id, a)?, self.step_of(video_id, b)?);
        Ok(match sa.cmp(&sb) {
            std::cmp::Ordering::Less => 1.0,
            std::cmp::Ordering::Greater => 0.0,
            std::cmp::Ordering::Equal => 0.5,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantComparator(pub f64);

impl PairwiseScorer for ConstantComparator {
    fn probability(&self, _: &str, _: &str, _: &str) -> Result<f64> {
        Ok(self.0)
    }
}

/// Uniform pseudo-random probabilities, a deterministic hash of the
/// seed and the pair.
#[derive(Debug, Clone, Copy)]
pub struct RandomComparator {
    pub seed: u64,
}

pub(crate) fn unit_hash(seed: u64, label: &str) -> f64 {
    ((derive_seed(seed, label) >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

impl PairwiseScorer for RandomComparator {
    fn probability(&self, video_id: &str, a: &str, b: &str) -> Result<f64> {
        Ok(unit_hash(self.seed, &format!("{video_id}\u{0}{a}\u{0}{b}")))
    }
}

/// Mean probability over the ten ordered pairs implied by `perm`.
pub fn candidate_score_from_matrix(m: &[Vec<f64>], perm: &Permutation5) -> f64 {
    let o = perm.order();
    let mut sum = 0.0;
    for i in 0..ITEMS_PER_QUESTION {
        for j in i + 1..ITEMS_PER_QUESTION {
            sum += m[o[i] as usize][o[j] as usize];
        }
    }
    sum / 10.0
}

pub fn candidate_score(scorer: &dyn PairwiseScorer, video_id: &str, perm: &Permutation5, items: &[String]) -> Result<f64> {
    if items.len() != ITEMS_PER_QUESTION {
        return Err(Error::InvalidArgument(format!("expected 5 items, got {}", items.len())));
    }
    Ok(candidate_score_from_matrix(&scorer.probability_matrix(video_id, items)?, perm))
}

/// Index of the first maximum.
pub(crate) fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn select_answer_pairwise(scorer: &dyn PairwiseScorer, q: &OrderingQuestion) -> Result<u8> {
    let m = scorer.probability_matrix(&q.video_id, &q.items)?;
    let scores: Vec<f64> = q.candidates.iter().map(|c| candidate_score_from_matrix(&m, c)).collect();
    Ok(argmax_first(&scores) as u8)
}

pub fn select_answers_pairwise(scorer: &dyn PairwiseScorer, questions: &[OrderingQuestion], mode: Execution) -> Result<Choices> {
    let picks = exec::try_map(mode, questions, |q| select_answer_pairwise(scorer, q))?;
    Ok(questions.iter().map(|q| q.question_id.clone()).zip(picks).collect())
}

/// Splits pairs into `n_phases` groups by descending step gap (largest gaps
/// first) and returns the cumulative training pool of every phase. Pairs with
/// equal gaps always share a phase; pools keep the dataset order.
pub fn curriculum_schedule(dataset: &[PairSample], n_phases: usize) -> Vec<Vec<PairSample>> {
    let n_phases = n_phases.max(1);
    let n = dataset.len();
    let mut gaps: Vec<u32> = dataset.iter().map(|p| p.step_gap).collect();
    gaps.sort_unstable_by(|a, b| b.cmp(a));
    let phase_of = |g: u32| -> usize {
        let larger = gaps.partition_point(|&x| x > g);
        (n_phases * larger / n.max(1)).min(n_phases - 1)
    };
    let phases: Vec<usize> = dataset.iter().map(|p| phase_of(p.step_gap)).collect();
    (0..n_phases)
        .map(|k| {
            dataset
                .iter()
                .zip(&phases)
                .filter(|(_, &ph)| ph <= k)
                .map(|(p, _)| p.clone())
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairResult {
    pub step_gap: u32,
    pub correct: bool,
}

pub fn evaluate_pairs(scorer: &dyn PairwiseScorer, pairs: &[PairSample], mode: Execution) -> Result<Vec<PairResult>> {
    exec::try_map(mode, pairs, |p| {
        let prob = scorer.probability(&p.video_id, &p.item_a, &p.item_b)?;
        Ok(PairResult {
            step_gap: p.step_gap,
            correct: (prob > 0.5) == (p.label == 1),
        })
    })
}

pub fn pair_accuracy(results: &[PairResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptySet("pair results"));
    }
    Ok(results.iter().filter(|r| r.correct).count() as f64 / results.len() as f64)
}

/// Gaps at or above this value share one bucket.
pub const GAP_BUCKET_CAP: u32 = 5;

pub fn gap_bucket(gap: u32) -> u32 {
    gap.min(GAP_BUCKET_CAP)
}

pub fn gap_bucket_label(bucket: u32) -> String {
    if bucket >= GAP_BUCKET_CAP {
        format!(">={GAP_BUCKET_CAP}")
    } else {
        bucket.to_string()
    }
}

/// Accuracy per step-gap bucket.
pub fn stepgap_accuracy(results: &[PairResult]) -> BTreeMap<u32, f64> {
    let mut counts: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for r in results {
        let e = counts.entry(gap_bucket(r.step_gap)).or_default();
        e.0 += usize::from(r.correct);
        e.1 += 1;
    }
    counts.into_iter().map(|(g, (c, n))| (g, c as f64 / n as f64)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComparatorConfig {
    /// Hidden widths of the classifier; the output width 1 is implied.
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub text_hidden: usize,
    /// Zero the classifier output layer so the untrained model returns 0.5.
    pub zero_init_output: bool,
}

impl Default for ComparatorConfig {
    fn default() -> Self {
        ComparatorConfig {
            hidden: vec![256, 64],
            embed_dim: 64,
            text_hidden: 64,
            zero_init_output: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairwiseTrainConfig {
    pub train: TrainConfig,
    /// 1 disables the curriculum.
    pub curriculum_phases: usize,
}

impl Default for PairwiseTrainConfig {
    fn default() -> Self {
        PairwiseTrainConfig {
            train: TrainConfig::default(),
            curriculum_phases: 1,
        }
    }
}

pub enum ComparatorInput {
    Image { dim: usize },
    Text { vocab: Vocabulary },
}

#[derive(Debug, Clone)]
enum Encoder {
    Image { dim: usize },
    Text { vocab: Vocabulary, encoder: SentenceEncoder },
}

impl Encoder {
    fn output_dim(&self) -> usize {
        match self {
            Encoder::Image { dim } => *dim,
            Encoder::Text { encoder, .. } => encoder.output_dim(),
        }
    }

    fn encode(&self, g: &mut Graph, item: &str, features: Option<&FeatureStore>) -> Result<Var> {
        match self {
            Encoder::Image { dim } => {
                let f = features
                    .ok_or_else(|| Error::InvalidArgument("image comparator needs a feature store".into()))?
                    .require(item)?;
                if f.len() != *dim {
                    return Err(Error::Shape(format!("feature `{item}` has {} values, model expects {dim}", f.len())));
                }
                Ok(g.input(Tensor::row_vector(f.to_f64())))
            }
            Encoder::Text { vocab, encoder } => Ok(encoder.encode(g, &vocab.encode(item))),
        }
    }
}

/// Twin encoder plus an MLP over the concatenated pair encodings.
#[derive(Debug, Clone)]
pub struct PairwiseComparator {
    pub config: ComparatorConfig,
    encoder: Encoder,
    classifier: Mlp,
    params: ParamStore,
}

impl PairwiseComparator {
    pub fn new(config: &ComparatorConfig, input: ComparatorInput, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = rng_for(seed, "pairwise/init");
        let encoder = match input {
            ComparatorInput::Image { dim } => {
                if dim == 0 {
                    return Err(Error::InvalidArgument("feature dimension must be positive".into()));
                }
                Encoder::Image { dim }
            }
            ComparatorInput::Text { vocab } => {
                let encoder = SentenceEncoder::new(
                    &mut params,
                    "text",
                    vocab.len(),
                    config.embed_dim,
                    config.text_hidden,
                    &mut rng,
                );
                Encoder::Text { vocab, encoder }
            }
        };
        let mut widths = vec![2 * encoder.output_dim()];
        widths.extend(&config.hidden);
        widths.push(1);
        let classifier = Mlp::new(&mut params, "classifier", &widths, &mut rng);
        if config.zero_init_output {
            classifier.zero_output(&mut params);
        }
        Ok(PairwiseComparator {
            config: config.clone(),
            encoder,
            classifier,
            params,
        })
    }

    pub fn model_name(&self) -> &'static str {
        match self.encoder {
            Encoder::Image { .. } => "pairwise_image",
            Encoder::Text { .. } => "pairwise_text",
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn bind<'a>(&'a self, features: Option<&'a FeatureStore>) -> BoundComparator<'a> {
        BoundComparator { model: self, features }
    }

    pub fn to_checkpoint(&self, log: &[EpochLog]) -> Checkpoint {
        let (input_dim, vocab) = match &self.encoder {
            Encoder::Image { dim } => (*dim, serde_json::Value::Null),
            Encoder::Text { vocab, .. } => (0, serde_json::to_value(vocab).expect("vocabulary serializes")),
        };
        Checkpoint::from_params(
            self.model_name(),
            json!({"comparator": self.config, "input_dim": input_dim}),
            serde_json::to_value(log).expect("log serializes"),
            json!({ "vocabulary": vocab }),
            &self.params,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = |e: serde_json::Error| Error::Checkpoint(format!("bad pairwise header: {e}"));
        let config: ComparatorConfig = serde_json::from_value(ck.config["comparator"].clone()).map_err(bad)?;
        let input = match ck.model.as_str() {
            "pairwise_image" => ComparatorInput::Image {
                dim: ck.config["input_dim"].as_u64().unwrap_or(0) as usize,
            },
            "pairwise_text" => {
                let vocab: Vocabulary = serde_json::from_value(ck.extra["vocabulary"].clone()).map_err(bad)?;
                ComparatorInput::Text { vocab: vocab.reindex() }
            }
            other => return Err(Error::Checkpoint(format!("`{other}` is not a pairwise model"))),
        };
        let mut m = PairwiseComparator::new(&config, input, 0)?;
        ck.load_into(&mut m.params)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path, log: &[EpochLog]) -> Result<()> {
        self.to_checkpoint(log).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        PairwiseComparator::from_checkpoint(&Checkpoint::load(path)?)
    }

    fn pair_logit(&self, g: &mut Graph, a: Var, b: Var) -> Var {
        let x = g.concat_cols(&[a, b]);
        self.classifier.forward(g, x)
    }
}

pub struct BoundComparator<'a> {
    model: &'a PairwiseComparator,
    features: Option<&'a FeatureStore>,
}

impl PairwiseScorer for BoundComparator<'_> {
    fn probability(&self, _: &str, a: &str, b: &str) -> Result<f64> {
        let m = self.model;
        let mut g = Graph::new(&m.params);
        let ea = m.encoder.encode(&mut g, a, self.features)?;
        let eb = m.encoder.encode(&mut g, b, self.features)?;
        let z = m.pair_logit(&mut g, ea, eb);
        Ok(sigmoid(g.value(z).item()))
    }

    fn probability_matrix(&self, _: &str, items: &[String]) -> Result<Vec<Vec<f64>>> {
        let m = self.model;
        let n = items.len();
        let mut g = Graph::new(&m.params);
        let enc = items
            .iter()
            .map(|it| m.encoder.encode(&mut g, it, self.features))
            .collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    rows.push(g.concat_cols(&[enc[i], enc[j]]));
                }
            }
        }
        let mut out = vec![vec![0.5; n]; n];
        if rows.is_empty() {
            return Ok(out);
        }
        let x = g.concat_rows(&rows);
        let z = m.classifier.forward(&mut g, x);
        let z = g.value(z);
        let mut k = 0;
        for (i, row) in out.iter_mut().enumerate() {
            for (j, p) in row.iter_mut().enumerate() {
                if i != j {
                    *p = sigmoid(z.data()[k]);
                    k += 1;
                }
            }
        }
        Ok(out)
    }
}

/// Minimizes binary cross-entropy over `train`, optionally through the
/// step-gap curriculum. Epochs are spread evenly over the phases.
pub fn train_pairwise(
    model: &mut PairwiseComparator,
    train: &[PairSample],
    validation: &[PairSample],
    features: Option<&FeatureStore>,
    cfg: &PairwiseTrainConfig,
    mode: Execution,
) -> Result<Vec<EpochLog>> {
    if train.is_empty() {
        return Err(Error::EmptySet("pair dataset"));
    }
    let n_phases = cfg.curriculum_phases.max(1);
    let pools = curriculum_schedule(train, n_phases);
    let mut adam = train::optimizer(&cfg.train.optimizer, &model.params);
    let mut rng = rng_for(cfg.train.seed, "pairwise/train");
    let mut log = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        let phase = (epoch * n_phases / cfg.train.epochs).min(n_phases - 1);
        let (loss, samples) = {
            let PairwiseComparator {
                encoder,
                classifier,
                params,
                ..
            } = model;
            let (encoder, classifier) = (&*encoder, &*classifier);
            let loss_fn = |g: &mut Graph, p: &PairSample| -> Result<Option<Var>> {
                let a = encoder.encode(g, &p.item_a, features)?;
                let b = encoder.encode(g, &p.item_b, features)?;
                let x = g.concat_cols(&[a, b]);
                let z = classifier.forward(g, x);
                let l = g.bce_logits(z, Tensor::scalar(f64::from(p.label)));
                Ok(Some(g.sum(l)))
            };
            train::run_epoch(params, &mut adam, &pools[phase], cfg.train.batch_size, &mut rng, mode, &loss_fn)?
        };
        let val_accuracy = if validation.is_empty() {
            None
        } else {
            Some(pair_accuracy(&evaluate_pairs(&model.bind(features), validation, mode)?)?)
        };
        log::info!("pairwise epoch {epoch} phase {phase}: loss {loss:.5} over {samples} pairs, val {val_accuracy:?}");
        log.push(EpochLog {
            epoch,
            phase: (n_phases > 1).then_some(phase),
            loss,
            samples,
            val_accuracy,
        });
    }
    Ok(log)
}
