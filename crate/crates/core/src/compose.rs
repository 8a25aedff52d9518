//! Text-aware image ordering: composition triplets, a gated residual
//! composition model, greedy sorting and edit-distance answer selection.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::io::{pre_makeup_image, step_end_image, Choices, FeatureStore};
use crate::metrics::{levenshtein, VideoRanking};
use crate::model::{OrderingQuestion, Permutation5, VideoAnnotation};
use crate::nn::{Linear, SentenceEncoder, Vocabulary};
use crate::pairwise::{argmax_first, unit_hash, PairwiseScorer};
use crate::rng::rng_for;
use crate::tensor::Tensor;
use crate::train::{self, EpochLog, TrainConfig};

/// Source image, the captions of the steps that follow it, and the image
/// after the last of those steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionTriplet {
    pub video_id: String,
    pub source_image: String,
    pub captions: Vec<String>,
    pub target_image: String,
}

impl CompositionTriplet {
    pub fn text(&self) -> String {
        self.captions.join(" ")
    }
}

/// Splits the video's steps into `n_parts` random contiguous parts and emits
/// one triplet per part. `None` uses half the step count. Videos with fewer
/// steps than parts yield nothing.
pub fn build_triplets(video: &VideoAnnotation, n_parts: Option<usize>, seed: u64, fps: f64) -> Result<Vec<CompositionTriplet>> {
    let k = video.steps.len();
    let n_parts = n_parts.unwrap_or(k / 2).max(1);
    if k < n_parts {
        return Ok(Vec::new());
    }
    let mut rng = rng_for(seed, &format!("triplets/{}", video.video_id));
    let mut cuts = rand::seq::index::sample(&mut rng, k - 1, n_parts - 1).into_vec();
    cuts.iter_mut().for_each(|c| *c += 1);
    cuts.sort_unstable();
    cuts.push(k);
    let mut out = Vec::with_capacity(n_parts);
    let mut source = pre_makeup_image(video, fps)?;
    let mut start = 0;
    for end in cuts {
        let part = &video.steps[start..end];
        let target = step_end_image(video, part[part.len() - 1].index, fps)?;
        out.push(CompositionTriplet {
            video_id: video.video_id.clone(),
            source_image: source,
            captions: part.iter().map(|s| s.caption.clone()).collect(),
            target_image: target.clone(),
        });
        source = target;
        start = end;
    }
    Ok(out)
}

/// Triplets for every video; `splits` independent random splits per video.
pub fn build_triplet_set(
    videos: &[VideoAnnotation],
    n_parts: Option<usize>,
    splits: usize,
    seed: u64,
    fps: f64,
) -> Result<Vec<CompositionTriplet>> {
    let mut out = Vec::new();
    for v in videos {
        for s in 0..splits.max(1) {
            for t in build_triplets(v, n_parts, seed.wrapping_add(s as u64), fps)? {
                if !out.contains(&t) {
                    out.push(t);
                }
            }
        }
    }
    Ok(out)
}

/// Retrieval candidates of a video: the pre-makeup image and every step-end
/// image, chronologically.
pub fn retrieval_candidates(video: &VideoAnnotation, fps: f64) -> Result<Vec<String>> {
    let mut c = vec![pre_makeup_image(video, fps)?];
    for s in &video.steps {
        c.push(step_end_image(video, s.index, fps)?);
    }
    Ok(c)
}

/// Scores how well each candidate matches `source` modified by `captions`.
pub trait CompositionScorer: Sync {
    fn scores(&self, video_id: &str, source: &str, captions: &[String], candidates: &[String]) -> Result<Vec<f64>>;
}

/// Ground truth: a candidate scores minus its step distance from the last
/// caption's step (the source's step when there are no captions).
#[derive(Debug, Clone, Default)]
pub struct CompositionOracle {
    steps: HashMap<String, HashMap<String, u32>>,
}

impl CompositionOracle {
    pub fn from_annotations(videos: &[VideoAnnotation], fps: f64) -> Result<Self> {
        let mut steps = HashMap::new();
        for v in videos {
            let mut m = HashMap::new();
            if !v.steps.is_empty() {
                m.insert(pre_makeup_image(v, fps)?, 0);
            }
            for s in &v.steps {
                m.entry(step_end_image(v, s.index, fps)?).or_insert(s.index);
                m.entry(s.caption.clone()).or_insert(s.index);
            }
            steps.insert(v.video_id.clone(), m);
        }
        Ok(CompositionOracle { steps })
    }

    fn step(&self, video_id: &str, item: &str) -> Result<u32> {
        self.steps
            .get(video_id)
            .and_then(|m| m.get(item))
            .copied()
            .ok_or_else(|| Error::UnknownItem(format!("{video_id}/{item}")))
    }
}

impl CompositionScorer for CompositionOracle {
    fn scores(&self, video_id: &str, source: &str, captions: &[String], candidates: &[String]) -> Result<Vec<f64>> {
        let target = match captions.last() {
            Some(c) => self.step(video_id, c)?,
            None => self.step(video_id, source)?,
        };
        candidates
            .iter()
            .map(|c| Ok(-(self.step(video_id, c)?.abs_diff(target) as f64)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RandomComposer {
    pub seed: u64,
}

impl CompositionScorer for RandomComposer {
    fn scores(&self, video_id: &str, source: &str, captions: &[String], candidates: &[String]) -> Result<Vec<f64>> {
        let text = captions.join(" ");
        Ok(candidates
            .iter()
            .map(|c| unit_hash(self.seed, &format!("{video_id}\u{0}{source}\u{0}{text}\u{0}{c}")))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextPooling {
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositionConfig {
    pub embed_dim: usize,
    pub text_hidden: usize,
    pub pooling: TextPooling,
    /// Similarities are `logit_gain * s * cosine` with learnable `s`.
    pub logit_gain: f64,
    pub init_scale: f64,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        CompositionConfig {
            embed_dim: 64,
            text_hidden: 512,
            pooling: TextPooling::Sum,
            logit_gain: 10.0,
            init_scale: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositionTrainConfig {
    pub train: TrainConfig,
    pub n_parts: Option<usize>,
    /// Random splits per video when building training triplets.
    pub splits_per_video: usize,
}

impl Default for CompositionTrainConfig {
    fn default() -> Self {
        CompositionTrainConfig {
            train: TrainConfig::default(),
            n_parts: None,
            splits_per_video: 1,
        }
    }
}

/// `composed = phi * (1 + tanh(u A + (phi B) * u)) + relu(u * (1 + phi D)) C`
/// with `u = W t`. A zero text encoding gives `composed = phi`.
#[derive(Debug, Clone)]
pub struct CompositionModel {
    pub config: CompositionConfig,
    pub feature_dim: usize,
    vocab: Vocabulary,
    encoder: SentenceEncoder,
    text_proj: Linear,
    gate_a: ParamId,
    gate_b: ParamId,
    res_c: ParamId,
    res_d: ParamId,
    scale: ParamId,
    params: ParamStore,
}

impl CompositionModel {
    pub fn new(config: &CompositionConfig, feature_dim: usize, vocab: Vocabulary, seed: u64) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::InvalidArgument("feature dimension must be positive".into()));
        }
        let mut params = ParamStore::new();
        let mut rng = rng_for(seed, "composition/init");
        let encoder = SentenceEncoder::new(&mut params, "text", vocab.len(), config.embed_dim, config.text_hidden, &mut rng);
        let text_proj = Linear::new(&mut params, "text_proj", encoder.output_dim(), feature_dim, false, &mut rng);
        let d = feature_dim;
        let gate_a = params.add("gate.a", Tensor::glorot(d, d, &mut rng));
        let gate_b = params.add("gate.b", Tensor::glorot(d, d, &mut rng));
        let res_c = params.add("residual.c", Tensor::glorot(d, d, &mut rng));
        let res_d = params.add("residual.d", Tensor::glorot(d, d, &mut rng));
        let scale = params.add("scale", Tensor::scalar(config.init_scale));
        Ok(CompositionModel {
            config: config.clone(),
            feature_dim,
            vocab,
            encoder,
            text_proj,
            gate_a,
            gate_b,
            res_c,
            res_d,
            scale,
            params,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn text_encoding(&self, g: &mut Graph, text: &str) -> Var {
        let tokens = self.vocab.encode(text);
        match (self.config.pooling, self.encoder.token_states(g, &tokens)) {
            (_, None) => g.input(Tensor::zeros(1, self.encoder.output_dim())),
            (TextPooling::Mean, Some(s)) => g.mean_rows(s),
            (TextPooling::Sum, Some(s)) => g.sum_rows(s),
        }
    }

    /// Composition of a `1 x D` source feature with an encoded text.
    pub fn compose_with(&self, g: &mut Graph, phi: Var, t: Var) -> Var {
        let u = self.text_proj.forward(g, t);
        let (a, b, c, d) = (
            g.param(self.gate_a),
            g.param(self.gate_b),
            g.param(self.res_c),
            g.param(self.res_d),
        );
        let ua = g.matmul(u, a);
        let pb = g.matmul(phi, b);
        let pbu = g.mul(pb, u);
        let gate = g.add(ua, pbu);
        let gate = g.tanh(gate);
        let gate = g.add_scalar(gate, 1.0);
        let gated = g.mul(phi, gate);
        let pd = g.matmul(phi, d);
        let pd = g.add_scalar(pd, 1.0);
        let r = g.mul(u, pd);
        let r = g.relu(r);
        let r = g.matmul(r, c);
        g.add(gated, r)
    }

    pub fn compose(&self, g: &mut Graph, phi: Var, text: &str) -> Var {
        let t = self.text_encoding(g, text);
        self.compose_with(g, phi, t)
    }

    /// `gain * s * cos(x, each row of targets)` where `targets` holds
    /// unit-norm rows; returns `1 x n`.
    fn similarities(&self, g: &mut Graph, x: Var, unit_targets: Var) -> Var {
        let sq = g.square(x);
        let n = g.sum(sq);
        let n = g.sqrt_floor(n, 1e-12);
        let tt = g.transpose(unit_targets);
        let dots = g.matmul(x, tt);
        let k = g.value(dots).cols();
        let ones = g.input(Tensor::filled(1, k, 1.0));
        let n = g.matmul(n, ones);
        let cos = g.div_row(dots, n);
        let s = g.param(self.scale);
        let s = g.scale(s, self.config.logit_gain);
        let s = g.matmul(s, ones);
        g.mul(cos, s)
    }

    pub fn bind<'a>(&'a self, features: &'a FeatureStore) -> BoundComposer<'a> {
        BoundComposer { model: self, features }
    }

    pub fn to_checkpoint(&self, log: &[EpochLog]) -> Checkpoint {
        Checkpoint::from_params(
            "composition",
            json!({"composition": self.config, "feature_dim": self.feature_dim}),
            serde_json::to_value(log).expect("log serializes"),
            json!({"vocabulary": self.vocab}),
            &self.params,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_model("composition")?;
        let bad = |e: serde_json::Error| Error::Checkpoint(format!("bad composition header: {e}"));
        let config: CompositionConfig = serde_json::from_value(ck.config["composition"].clone()).map_err(bad)?;
        let dim = ck.config["feature_dim"].as_u64().unwrap_or(0) as usize;
        let vocab: Vocabulary = serde_json::from_value(ck.extra["vocabulary"].clone()).map_err(bad)?;
        let mut m = CompositionModel::new(&config, dim, vocab.reindex(), 0)?;
        ck.load_into(&mut m.params)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path, log: &[EpochLog]) -> Result<()> {
        self.to_checkpoint(log).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        CompositionModel::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn feature_row(features: &FeatureStore, id: &str, dim: usize) -> Result<Tensor> {
    let f = features.require(id)?;
    if f.len() != dim {
        return Err(Error::Shape(format!("feature `{id}` has {} values, model expects {dim}", f.len())));
    }
    Ok(Tensor::row_vector(f.to_f64()))
}

fn unit_rows(rows: &[Tensor]) -> Tensor {
    let cols = rows[0].cols();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        let n = r.norm_sq().sqrt().max(1e-12);
        data.extend(r.data().iter().map(|x| x / n));
    }
    Tensor::from_vec(rows.len(), cols, data)
}

pub struct BoundComposer<'a> {
    model: &'a CompositionModel,
    features: &'a FeatureStore,
}

impl CompositionScorer for BoundComposer<'_> {
    fn scores(&self, _: &str, source: &str, captions: &[String], candidates: &[String]) -> Result<Vec<f64>> {
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let m = self.model;
        let d = m.feature_dim;
        let rows = candidates
            .iter()
            .map(|c| feature_row(self.features, c, d))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new(&m.params);
        let phi = g.input(feature_row(self.features, source, d)?);
        let x = m.compose(&mut g, phi, &captions.join(" "));
        let targets = g.input(unit_rows(&rows));
        let s = m.similarities(&mut g, x, targets);
        Ok(g.value(s).data().to_vec())
    }
}

struct BatchItem<'a> {
    source: &'a Tensor,
    text: String,
    targets: &'a Tensor,
    positive: usize,
}

/// Orders triplets so that each video's triplets are adjacent, with videos
/// in random order, then cuts batches.
fn video_grouped_batches(triplets: &[CompositionTriplet], batch_size: usize, rng: &mut crate::rng::Rng) -> Vec<Vec<usize>> {
    let mut by_video: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in triplets.iter().enumerate() {
        by_video.entry(&t.video_id).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = by_video.into_values().collect();
    groups.shuffle(rng);
    for g in &mut groups {
        g.shuffle(rng);
    }
    let order: Vec<usize> = groups.into_iter().flatten().collect();
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// In-batch softmax contrastive loss: each triplet's target must beat every
/// other distinct target in its batch.
pub fn train_composition(
    model: &mut CompositionModel,
    triplets: &[CompositionTriplet],
    features: &FeatureStore,
    cfg: &TrainConfig,
    mode: Execution,
) -> Result<Vec<EpochLog>> {
    if cfg.batch_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "composition training needs batch size >= 2, got {}",
            cfg.batch_size
        )));
    }
    if triplets.is_empty() {
        return Err(Error::EmptySet("triplets"));
    }
    let d = model.feature_dim;
    let mut cache: HashMap<&str, Tensor> = HashMap::new();
    for t in triplets {
        for id in [&t.source_image, &t.target_image] {
            if !cache.contains_key(id.as_str()) {
                cache.insert(id, feature_row(features, id, d)?);
            }
        }
    }
    let mut adam = train::optimizer(&cfg.optimizer, &model.params);
    let mut rng = rng_for(cfg.seed, "composition/train");
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut used_total) = (0.0, 0);
        for batch in video_grouped_batches(triplets, cfg.batch_size, &mut rng) {
            let mut target_ids: Vec<&str> = Vec::new();
            for &i in &batch {
                if !target_ids.contains(&triplets[i].target_image.as_str()) {
                    target_ids.push(&triplets[i].target_image);
                }
            }
            if target_ids.len() < 2 {
                continue;
            }
            let rows: Vec<Tensor> = target_ids.iter().map(|id| cache[id].clone()).collect();
            let targets = unit_rows(&rows);
            let items: Vec<BatchItem> = batch
                .iter()
                .map(|&i| BatchItem {
                    source: &cache[triplets[i].source_image.as_str()],
                    text: triplets[i].text(),
                    targets: &targets,
                    positive: target_ids.iter().position(|t| *t == triplets[i].target_image).unwrap(),
                })
                .collect();
            let refs: Vec<&BatchItem> = items.iter().collect();
            let m = &*model;
            let loss_fn = |g: &mut Graph, it: &BatchItem| -> Result<Option<Var>> {
                let phi = g.input(it.source.clone());
                let x = m.compose(g, phi, &it.text);
                let t = g.input(it.targets.clone());
                let s = m.similarities(g, x, t);
                Ok(Some(cross_entropy(g, s, it.positive)))
            };
            let (grads, loss, used) = train::batch_gradients(&model.params, &refs, mode, &loss_fn)?;
            if !grads.0.iter().all(Tensor::all_finite) {
                return Err(Error::NonFinite {
                    what: "gradient".into(),
                    detail: format!("composition epoch {epoch}, batch loss {loss}"),
                });
            }
            adam.step(&mut model.params, &grads);
            loss_sum += loss * used as f64;
            used_total += used;
        }
        let loss = loss_sum / used_total.max(1) as f64;
        log::info!("composition epoch {epoch}: loss {loss:.5} over {used_total} triplets");
        log.push(EpochLog {
            epoch,
            phase: None,
            loss,
            samples: used_total,
            val_accuracy: None,
        });
    }
    Ok(log)
}

/// `-log softmax(s)[positive]` for a `1 x n` row of logits.
fn cross_entropy(g: &mut Graph, logits: Var, positive: usize) -> Var {
    let n = g.value(logits).cols();
    let mut onehot = Tensor::zeros(1, n);
    onehot.set(0, positive, -1.0);
    let lp = g.log_softmax_rows(logits);
    let pick = g.mul_const(lp, onehot);
    g.sum(pick)
}

/// Mean in-batch loss of the current model, without updating it.
pub fn composition_loss(model: &CompositionModel, batch: &[CompositionTriplet], features: &FeatureStore) -> Result<f64> {
    let d = model.feature_dim;
    let mut target_ids: Vec<&str> = Vec::new();
    for t in batch {
        if !target_ids.contains(&t.target_image.as_str()) {
            target_ids.push(&t.target_image);
        }
    }
    let rows = target_ids
        .iter()
        .map(|id| feature_row(features, id, d))
        .collect::<Result<Vec<_>>>()?;
    let targets = unit_rows(&rows);
    let mut total = 0.0;
    for t in batch {
        let mut g = Graph::new(&model.params);
        let phi = g.input(feature_row(features, &t.source_image, d)?);
        let x = model.compose(&mut g, phi, &t.text());
        let tv = g.input(targets.clone());
        let s = model.similarities(&mut g, x, tv);
        let pos = target_ids.iter().position(|id| *id == t.target_image).unwrap();
        let l = cross_entropy(&mut g, s, pos);
        total += g.value(l).item();
    }
    Ok(total / batch.len() as f64)
}

/// 0-based rank of each triplet's target among its video's candidates,
/// grouped per video. Ties rank the earlier candidate first.
pub fn evaluate_retrieval(
    scorer: &dyn CompositionScorer,
    triplets: &[CompositionTriplet],
    candidates: &BTreeMap<String, Vec<String>>,
    mode: Execution,
) -> Result<Vec<VideoRanking>> {
    let ranks = exec::try_map(mode, triplets, |t| -> Result<usize> {
        let cands = candidates
            .get(&t.video_id)
            .ok_or_else(|| Error::UnknownItem(t.video_id.clone()))?;
        let pos = cands
            .iter()
            .position(|c| *c == t.target_image)
            .ok_or_else(|| Error::UnknownItem(t.target_image.clone()))?;
        let s = scorer.scores(&t.video_id, &t.source_image, &t.captions, cands)?;
        Ok(s
            .iter()
            .enumerate()
            .filter(|&(i, &x)| x > s[pos] || (x == s[pos] && i < pos))
            .count())
    })?;
    let mut per_video: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (t, r) in triplets.iter().zip(ranks) {
        per_video.entry(&t.video_id).or_default().push(r);
    }
    Ok(per_video
        .into_iter()
        .map(|(v, r)| VideoRanking {
            video_id: v.to_string(),
            target_ranks: r,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionStart {
    /// The anchor image consumes the first caption.
    #[default]
    AfterAnchor,
    AtAnchor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopBound {
    /// Leave at least one caption for every image still to be placed.
    #[default]
    Inclusive,
    /// The literal `j < M - (N - x)` with `x` the anchor position.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct GreedyConfig {
    pub caption_start: CaptionStart,
    pub loop_bound: LoopBound,
}

impl GreedyConfig {
    fn first_caption(&self) -> usize {
        match self.caption_start {
            CaptionStart::AfterAnchor => 2,
            CaptionStart::AtAnchor => 1,
        }
    }

    /// Largest caption index (1-based) usable when placing position `p`.
    fn upper(&self, m: usize, n: usize, p: usize) -> isize {
        let (m, n, p) = (m as isize, n as isize, p as isize);
        match self.loop_bound {
            LoopBound::Inclusive => m - (n - p),
            LoopBound::Strict => m - (n - (p - 1)) - 1,
        }
    }
}

/// Orders `images` using their captions. Returns indices into `images`.
///
/// The first image is the one with the highest mean probability of
/// preceding the others. Each later image is chosen jointly with a caption
/// prefix `S_y..S_j` to maximize the composition score from the current
/// anchor; ties go to the lower `j`, then to input order.
pub fn greedy_sort(
    video_id: &str,
    images: &[String],
    captions: &[String],
    f_img: &dyn PairwiseScorer,
    f_tirg: &dyn CompositionScorer,
    cfg: &GreedyConfig,
) -> Result<Vec<usize>> {
    let (n, m) = (images.len(), captions.len());
    if n == 0 {
        return Err(Error::InvalidArgument("greedy sort needs at least one image".into()));
    }
    let mut y = cfg.first_caption();
    {
        let mut yy = y as isize;
        for p in 2..=n {
            if yy > cfg.upper(m, n, p) {
                return Err(Error::InvalidArgument(format!(
                    "{m} caption(s) cannot cover {n} images (position {p} has no feasible caption prefix)"
                )));
            }
            yy += 1;
        }
    }
    if n == 1 {
        return Ok(vec![0]);
    }
    let pm = f_img.probability_matrix(video_id, images)?;
    let mean_first: Vec<f64> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i).map(|j| pm[i][j]).sum::<f64>() / (n - 1) as f64)
        .collect();
    let first = argmax_first(&mean_first);
    let mut order = vec![first];
    let mut remaining: Vec<usize> = (0..n).filter(|&i| i != first).collect();
    for p in 2..=n {
        let hi = cfg.upper(m, n, p) as usize;
        let anchor = &images[*order.last().unwrap()];
        let cands: Vec<String> = remaining.iter().map(|&i| images[i].clone()).collect();
        let mut best: Option<(f64, usize, usize)> = None;
        for j in y..=hi {
            let s = f_tirg.scores(video_id, anchor, &captions[y - 1..j], &cands)?;
            for (k, &score) in s.iter().enumerate() {
                if !score.is_finite() {
                    return Err(Error::NonFinite {
                        what: "composition score".into(),
                        detail: format!("image {}", cands[k]),
                    });
                }
                if best.is_none_or(|(b, _, _)| score > b) {
                    best = Some((score, j, k));
                }
            }
        }
        let (_, j, k) = best.expect("feasible prefix range is non-empty");
        order.push(remaining.remove(k));
        y = j + 1;
    }
    Ok(order)
}

/// Candidate with the smallest edit distance to `predicted`; ties go to the
/// lowest index.
pub fn select_answer_by_edit_distance(predicted: &Permutation5, q: &OrderingQuestion) -> u8 {
    let d: Vec<f64> = q
        .candidates
        .iter()
        .map(|c| -(levenshtein(c.order(), predicted.order()) as f64))
        .collect();
    argmax_first(&d) as u8
}

/// Greedy-sorts every image question and selects answers by edit distance.
/// Questions must carry their ordered step captions.
pub fn select_answers_greedy(
    f_img: &dyn PairwiseScorer,
    f_tirg: &dyn CompositionScorer,
    questions: &[OrderingQuestion],
    cfg: &GreedyConfig,
    mode: Execution,
) -> Result<Choices> {
    let picks = exec::try_map(mode, questions, |q| -> Result<u8> {
        let captions = q
            .captions
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("question {} has no captions", q.question_id)))?;
        let order = greedy_sort(&q.video_id, &q.items, captions, f_img, f_tirg, cfg)?;
        let perm = Permutation5::new(
            order
                .iter()
                .map(|&i| i as u8)
                .collect::<Vec<_>>()
                .try_into()
                .map_err(|_| Error::InvalidArgument(format!("question {} does not have 5 items", q.question_id)))?,
        )?;
        Ok(select_answer_by_edit_distance(&perm, q))
    })?;
    Ok(questions.iter().map(|q| q.question_id.clone()).zip(picks).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{StepAnnotation, TemporalSpan};
    use crate::pairwise::{ConstantComparator, OracleComparator};
    use std::collections::BTreeSet;

    fn video(k: u32) -> VideoAnnotation {
        VideoAnnotation {
            video_id: "v".into(),
            duration_s: 20.0 * k as f64,
            steps: (1..=k)
                .map(|i| StepAnnotation {
                    index: i,
                    caption: format!("cap{i}"),
                    span: TemporalSpan::new(20.0 * (i - 1) as f64, 20.0 * i as f64).unwrap(),
                    areas: BTreeSet::new(),
                })
                .collect(),
        }
    }

    struct Flat;
    impl CompositionScorer for Flat {
        fn scores(&self, _: &str, _: &str, _: &[String], c: &[String]) -> Result<Vec<f64>> {
            Ok(vec![0.0; c.len()])
        }
    }

    #[test]
    fn triplets_chain_through_parts() {
        let v = video(4);
        let ts = build_triplets(&v, Some(2), 3, 10.0).unwrap();
        assert_eq!(ts.len(), 2);
        assert_eq!(ts[0].source_image, pre_makeup_image(&v, 10.0).unwrap());
        assert_eq!(ts[1].source_image, ts[0].target_image);
        assert_eq!(ts[1].target_image, step_end_image(&v, 4, 10.0).unwrap());
        let all: Vec<String> = ts.iter().flat_map(|t| t.captions.clone()).collect();
        assert_eq!(all, ["cap1", "cap2", "cap3", "cap4"]);
        assert_eq!(ts, build_triplets(&v, Some(2), 3, 10.0).unwrap());
        let singles = build_triplets(&v, Some(4), 3, 10.0).unwrap();
        assert!(singles.iter().all(|t| t.captions.len() == 1));
        assert!(build_triplets(&v, Some(5), 3, 10.0).unwrap().is_empty());
        assert_eq!(ts[0].text().split(' ').count(), ts[0].captions.len());
    }

    #[test]
    fn oracle_ranks_target_first() {
        let v = video(6);
        let o = CompositionOracle::from_annotations(&[v.clone()], 10.0).unwrap();
        let cands = retrieval_candidates(&v, 10.0).unwrap();
        for t in build_triplets(&v, Some(3), 1, 10.0).unwrap() {
            let s = o.scores("v", &t.source_image, &t.captions, &cands).unwrap();
            let best = argmax_first(&s);
            assert_eq!(cands[best], t.target_image);
        }
        let s = o.scores("v", &cands[2], &[], &cands).unwrap();
        assert_eq!(argmax_first(&s), 2);
    }

    #[test]
    fn greedy_trivial_cases() {
        let imgs: Vec<String> = (0..5).map(|i| format!("i{i}")).collect();
        let caps: Vec<String> = (0..5).map(|i| format!("c{i}")).collect();
        let one = greedy_sort("v", &imgs[..1], &caps, &ConstantComparator(0.5), &Flat, &GreedyConfig::default()).unwrap();
        assert_eq!(one, vec![0]);
        let flat = greedy_sort("v", &imgs, &caps, &ConstantComparator(0.5), &Flat, &GreedyConfig::default()).unwrap();
        assert_eq!(flat, vec![0, 1, 2, 3, 4]);
        let short = greedy_sort("v", &imgs, &caps[..4], &ConstantComparator(0.5), &Flat, &GreedyConfig::default());
        assert!(short.is_err());
        let at = GreedyConfig {
            caption_start: CaptionStart::AtAnchor,
            ..Default::default()
        };
        assert!(greedy_sort("v", &imgs, &caps[..4], &ConstantComparator(0.5), &Flat, &at).is_ok());
        let strict = GreedyConfig {
            loop_bound: LoopBound::Strict,
            ..Default::default()
        };
        assert!(greedy_sort("v", &imgs, &caps, &ConstantComparator(0.5), &Flat, &strict).is_err());
    }

    #[test]
    fn greedy_with_oracles_restores_order() {
        let v = video(5);
        let imgs: Vec<String> = v.steps.iter().map(|s| step_end_image(&v, s.index, 10.0).unwrap()).collect();
        let caps: Vec<String> = v.steps.iter().map(|s| s.caption.clone()).collect();
        let shuffled = [3usize, 0, 4, 1, 2];
        let items: Vec<String> = shuffled.iter().map(|&i| imgs[i].clone()).collect();
        let fi = OracleComparator::from_annotations(&[v.clone()], 10.0).unwrap();
        let ft = CompositionOracle::from_annotations(&[v.clone()], 10.0).unwrap();
        let order = greedy_sort("v", &items, &caps, &fi, &ft, &GreedyConfig::default()).unwrap();
        let restored: Vec<usize> = order.iter().map(|&k| shuffled[k]).collect();
        assert_eq!(restored, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn edit_distance_selection() {
        let p = |o: [u8; 5]| Permutation5::new(o).unwrap();
        let q = OrderingQuestion {
            question_id: "q".into(),
            task: crate::model::Task::ImageOrdering,
            video_id: "v".into(),
            items: (0..5).map(|i| i.to_string()).collect(),
            captions: None,
            candidates: [p([4, 3, 2, 1, 0]), p([1, 0, 2, 3, 4]), p([0, 1, 2, 4, 3]), p([0, 1, 2, 3, 4])],
            answer: Some(3),
        };
        assert_eq!(select_answer_by_edit_distance(&p([0, 1, 2, 3, 4]), &q), 3);
        // two candidates at distance 2: the lower index wins
        assert_eq!(select_answer_by_edit_distance(&p([1, 0, 2, 4, 3]), &q), 1);
    }

    #[test]
    fn zero_text_is_pass_through() {
        let vocab = Vocabulary::build(["cap1 cap2"]);
        let m = CompositionModel::new(
            &CompositionConfig {
                embed_dim: 4,
                text_hidden: 4,
                init_scale: 1.0,
                ..Default::default()
            },
            3,
            vocab,
            1,
        )
        .unwrap();
        let mut g = Graph::new(m.params());
        let phi = g.input(Tensor::row_vector(vec![0.5, -1.0, 2.0]));
        let t = g.input(Tensor::zeros(1, 8));
        let x = m.compose_with(&mut g, phi, t);
        assert_eq!(g.value(x).data(), &[0.5, -1.0, 2.0]);
        let mut f = FeatureStore::new(3).unwrap();
        for (id, v) in [("a", [0.5f32, -1.0, 2.0]), ("b", [1.0, 1.0, 0.0]), ("c", [-0.5, 1.0, -2.0])] {
            f.insert(id, crate::model::FeatureVector::new(v.to_vec()).unwrap()).unwrap();
        }
        let c: Vec<String> = ["b", "c", "a"].iter().map(|s| s.to_string()).collect();
        let s = m.bind(&f).scores("v", "a", &[], &c).unwrap();
        assert_eq!(argmax_first(&s), 2);
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::row_vector(vec![0.3, -1.2, 2.0, 0.1]));
        let r = crate::autograd::gradient_check(&s, 1e-5, 1e-6, |g| {
            let x = g.param(w);
            Ok(cross_entropy(g, x, 2))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }
}
