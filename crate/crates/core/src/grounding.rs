//! Temporal sentence grounding with semantic conditioned dynamic modulation
//! (SCDM) and its facial-area variant (SCDM+): anchors and their labels,
//! losses, training, inference and localization-based step ordering.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{sigmoid, Graph, ParamId, ParamStore, Var};
use crate::checkpoint::Checkpoint;
use crate::compose::select_answer_by_edit_distance;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::io::{Choices, FeatureStore};
use crate::metrics::{mean_iou, recall_at_k_tiou};
use crate::model::{area_indicator, OrderingQuestion, Permutation5, TemporalSpan, VideoAnnotation, FACIAL_REGION_COUNT};
use crate::nn::{Linear, SentenceEncoder, Vocabulary};
use crate::rng::rng_for;
use crate::tensor::Tensor;
use crate::train::{self, EpochLog, TrainConfig};

/// Floor applied to per-channel standard deviations during modulation.
pub const SIGMA_FLOOR: f64 = 1e-5;
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` in `loss_over`.
pub const PROB_CLAMP: f64 = 1e-7;
const FACE_CLAMP: f64 = 1e-12;

/// Temporal intersection over union; 0 for disjoint or degenerate spans.
pub fn tiou(a: &TemporalSpan, b: &TemporalSpan) -> f64 {
    let inter = a.intersection(b);
    let union = a.width() + b.width() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub over: f64,
    pub loc: f64,
    pub face: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            over: 100.0,
            loc: 10.0,
            face: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundingConfig {
    pub max_video_segments: usize,
    pub max_sentence_tokens: usize,
    pub pyramid_sizes: Vec<usize>,
    /// Anchor widths as multiples of the cell width.
    pub anchor_ratios: Vec<f64>,
    pub loss_weights: LossWeights,
    pub embed_dim: usize,
    pub text_hidden: usize,
    pub hidden: usize,
    pub attention_dim: usize,
    pub train: TrainConfig,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        GroundingConfig {
            max_video_segments: 1024,
            max_sentence_tokens: 20,
            pyramid_sizes: vec![256, 128, 64, 32, 16],
            anchor_ratios: vec![1.0, 1.5],
            loss_weights: LossWeights::default(),
            embed_dim: 300,
            text_hidden: 256,
            hidden: 512,
            attention_dim: 256,
            train: TrainConfig::default(),
        }
    }
}

impl GroundingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.pyramid_sizes.is_empty() {
            return bad("pyramid_sizes is empty".into());
        }
        let mut prev = self.max_video_segments;
        for &s in &self.pyramid_sizes {
            if s == 0 || s >= prev || !prev.is_multiple_of(s) {
                return bad(format!(
                    "pyramid size {s} must be smaller than and divide the previous size {prev}"
                ));
            }
            prev = s;
        }
        if self.anchor_ratios.is_empty() || self.anchor_ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return bad("anchor_ratios must be positive".into());
        }
        let w = self.loss_weights;
        if !(w.over > 0.0 && w.loc > 0.0 && w.face >= 0.0) {
            return bad(format!("loss weights must be positive (face may be 0), got {w:?}"));
        }
        if self.max_sentence_tokens == 0 || self.hidden == 0 || self.attention_dim == 0 {
            return bad("sentence length and widths must be positive".into());
        }
        Ok(())
    }

    fn anchors_per_cell(&self) -> usize {
        self.anchor_ratios.len()
    }

    /// Stride of each level over the level below it.
    fn strides(&self) -> Vec<usize> {
        let mut prev = self.max_video_segments;
        self.pyramid_sizes
            .iter()
            .map(|&s| {
                let st = prev / s;
                prev = s;
                st
            })
            .collect()
    }
}

// Plain reference implementations of the fusion, attention and modulation
// blocks; the model evaluates the same maps on the autograd tape.

/// `f_t = relu([s_bar, v_t] W_f + b_f)` for every segment row `v_t`.
pub fn fuse(v: &Tensor, s_bar: &[f64], w_f: &Tensor, b_f: &[f64]) -> Result<Tensor> {
    let (ds, dv) = (s_bar.len(), v.cols());
    if w_f.rows() != ds + dv || b_f.len() != w_f.cols() {
        return Err(Error::Shape(format!(
            "fusion weights {:?} do not fit sentence {ds} + video {dv}",
            w_f.shape()
        )));
    }
    let h = w_f.cols();
    let mut out = Tensor::zeros(v.rows(), h);
    for t in 0..v.rows() {
        for j in 0..h {
            let mut z = b_f[j];
            for (i, &s) in s_bar.iter().enumerate() {
                z += s * w_f.get(i, j);
            }
            for (i, &x) in v.row(t).iter().enumerate() {
                z += x * w_f.get(ds + i, j);
            }
            out.set(t, j, z.max(0.0));
        }
    }
    Ok(out)
}

/// Attention weights over sentence tokens `s` (rows) for cell feature `a`
/// and the resulting context `sum_n alpha_n s_n`.
pub fn attend(s: &Tensor, a: &[f64], w_s: &Tensor, w_a: &Tensor, b: &[f64], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = w.len();
    let mut e = Vec::with_capacity(s.rows());
    for n in 0..s.rows() {
        let mut en = 0.0;
        for j in 0..k {
            let mut z = b[j];
            for (i, &x) in s.row(n).iter().enumerate() {
                z += x * w_s.get(i, j);
            }
            for (i, &x) in a.iter().enumerate() {
                z += x * w_a.get(i, j);
            }
            en += w[j] * z.tanh();
        }
        e.push(en);
    }
    let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = e.iter().map(|x| (x - m).exp()).sum();
    let alpha: Vec<f64> = e.iter().map(|x| (x - m).exp() / z).collect();
    let mut c = vec![0.0; s.cols()];
    for (n, &al) in alpha.iter().enumerate() {
        for (cj, &x) in c.iter_mut().zip(s.row(n)) {
            *cj += al * x;
        }
    }
    (c, alpha)
}

/// Modulated feature of cell `i`: `lambda * (a_i - mu) / sigma + psi` with
/// per-channel statistics over all cells of the level and
/// `lambda = tanh(c W_l + b_l)`, `psi = tanh(c W_p + b_p)`.
pub fn modulate(cells: &Tensor, i: usize, c: &[f64], w_l: &Tensor, b_l: &[f64], w_p: &Tensor, b_p: &[f64]) -> Vec<f64> {
    let (l, h) = cells.shape();
    let affine = |w: &Tensor, b: &[f64], j: usize| -> f64 {
        let mut z = b[j];
        for (k, &x) in c.iter().enumerate() {
            z += x * w.get(k, j);
        }
        z.tanh()
    };
    (0..h)
        .map(|j| {
            let mu = (0..l).map(|r| cells.get(r, j)).sum::<f64>() / l as f64;
            let var = (0..l).map(|r| (cells.get(r, j) - mu).powi(2)).sum::<f64>() / l as f64;
            let sigma = var.sqrt().max(SIGMA_FLOOR);
            affine(w_l, b_l, j) * (cells.get(i, j) - mu) / sigma + affine(w_p, b_p, j)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub level: usize,
    pub cell: usize,
    pub ratio: usize,
    pub span: TemporalSpan,
    /// False when the anchor is centered in zero padding.
    pub valid: bool,
}

/// Every anchor of every level in head order (level, cell, ratio), for a
/// video of `n_segments` segments lasting `duration` seconds.
pub fn anchors(cfg: &GroundingConfig, n_segments: usize, duration: f64) -> Vec<Anchor> {
    let seg = duration / n_segments.max(1) as f64;
    let mut out = Vec::new();
    for (level, &l) in cfg.pyramid_sizes.iter().enumerate() {
        let cell_w = (cfg.max_video_segments / l) as f64 * seg;
        for cell in 0..l {
            let center = (cell as f64 + 0.5) * cell_w;
            for (ratio, &r) in cfg.anchor_ratios.iter().enumerate() {
                let w = r * cell_w;
                out.push(Anchor {
                    level,
                    cell,
                    ratio,
                    span: TemporalSpan {
                        start_s: center - w / 2.0,
                        end_s: center + w / 2.0,
                    },
                    valid: center < duration,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorLabel {
    pub g_over: f64,
    pub positive: bool,
    pub delta_c: f64,
    pub delta_w: f64,
}

pub fn assign_labels(anchors: &[TemporalSpan], gt: &TemporalSpan) -> Vec<AnchorLabel> {
    anchors
        .iter()
        .map(|a| {
            let g = tiou(a, gt);
            AnchorLabel {
                g_over: g,
                positive: g > 0.5,
                delta_c: (gt.center() - a.center()) / a.width(),
                delta_w: (gt.width() / a.width()).ln(),
            }
        })
        .collect()
}

fn xent(g: f64, p: f64, clamp: f64) -> f64 {
    let p = p.clamp(clamp, 1.0 - clamp);
    -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
}

fn positives(labels: &[AnchorLabel]) -> Result<usize> {
    let n = labels.iter().filter(|l| l.positive).count();
    if n == 0 {
        return Err(Error::EmptySet("positive anchors"));
    }
    Ok(n)
}

/// Soft-target cross-entropy, normalized separately over positive and
/// negative anchors.
pub fn loss_over(p_over: &[f64], labels: &[AnchorLabel]) -> Result<f64> {
    if p_over.len() != labels.len() {
        return Err(Error::Shape(format!("{} probabilities for {} labels", p_over.len(), labels.len())));
    }
    let n_pos = positives(labels)?;
    let n_neg = labels.len() - n_pos;
    if n_neg == 0 {
        return Err(Error::EmptySet("negative anchors"));
    }
    let (mut pos, mut neg) = (0.0, 0.0);
    for (&p, l) in p_over.iter().zip(labels) {
        let e = xent(l.g_over, p, PROB_CLAMP);
        if l.positive {
            pos += e;
        } else {
            neg += e;
        }
    }
    Ok(pos / n_pos as f64 + neg / n_neg as f64)
}

/// Smooth-L1 offset regression over positive anchors. `offsets[i]` is the
/// predicted `(delta_c, delta_w)` of anchor `i`.
pub fn loss_loc(offsets: &[(f64, f64)], labels: &[AnchorLabel]) -> Result<f64> {
    if offsets.len() != labels.len() {
        return Err(Error::Shape(format!("{} offsets for {} labels", offsets.len(), labels.len())));
    }
    let n_pos = positives(labels)?;
    let sum: f64 = offsets
        .iter()
        .zip(labels)
        .filter(|(_, l)| l.positive)
        .map(|(&(c, w), l)| crate::autograd::smooth_l1(c - l.delta_c) + crate::autograd::smooth_l1(w - l.delta_w))
        .sum();
    Ok(sum / n_pos as f64)
}

/// Multilabel facial-area cross-entropy summed over regions and averaged
/// over positive anchors. `face_probs[i]` belongs to anchor `i`.
pub fn loss_face(face_probs: &[[f64; FACIAL_REGION_COUNT]], labels: &[AnchorLabel], areas: &[f64; FACIAL_REGION_COUNT]) -> Result<f64> {
    if face_probs.len() != labels.len() {
        return Err(Error::Shape(format!("{} face rows for {} labels", face_probs.len(), labels.len())));
    }
    let n_pos = positives(labels)?;
    let mut sum = 0.0;
    for (probs, _) in face_probs.iter().zip(labels).filter(|(_, l)| l.positive) {
        for (&p, &g) in probs.iter().zip(areas) {
            sum += xent(g, p, FACE_CLAMP);
        }
    }
    Ok(sum / n_pos as f64)
}

pub fn loss_all(over: f64, loc: f64, face: f64, w: &LossWeights) -> f64 {
    w.over * over + w.loc * loc + w.face * face
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundingKind {
    Scdm,
    ScdmPlus,
}

impl GroundingKind {
    pub fn model_name(self) -> &'static str {
        match self {
            GroundingKind::Scdm => "scdm",
            GroundingKind::ScdmPlus => "scdmplus",
        }
    }
}

#[derive(Debug, Clone)]
struct Level {
    conv: Linear,
    lambda: Linear,
    psi: Linear,
    len: usize,
    stride: usize,
}

/// Per-level outputs of one forward pass.
pub struct LevelOut {
    /// Modulated feature map, `len x hidden`.
    pub map: Var,
    /// `len x (3 * anchors_per_cell)`: logit, delta_c, delta_w per anchor.
    pub position: Var,
    /// `len x 24` facial-area logits (SCDM+ only).
    pub face: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct GroundingModel {
    pub config: GroundingConfig,
    pub kind: GroundingKind,
    pub video_dim: usize,
    vocab: Vocabulary,
    encoder: SentenceEncoder,
    fusion: Linear,
    att_s: ParamId,
    att_a: Linear,
    att_w: ParamId,
    levels: Vec<Level>,
    position: Linear,
    face: Option<Linear>,
    params: ParamStore,
}

impl GroundingModel {
    pub fn new(config: &GroundingConfig, kind: GroundingKind, video_dim: usize, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if video_dim == 0 {
            return Err(Error::InvalidArgument("video feature dimension must be positive".into()));
        }
        let mut params = ParamStore::new();
        let mut rng = rng_for(seed, "grounding/init");
        let encoder = SentenceEncoder::new(&mut params, "text", vocab.len(), config.embed_dim, config.text_hidden, &mut rng);
        let ds = encoder.output_dim();
        let h = config.hidden;
        let fusion = Linear::new(&mut params, "fusion", ds + video_dim, h, true, &mut rng);
        let att_s = params.add("attend.ws", Tensor::glorot(ds, config.attention_dim, &mut rng));
        let att_a = Linear::new(&mut params, "attend.wa", h, config.attention_dim, true, &mut rng);
        let att_w = params.add("attend.w", Tensor::glorot(config.attention_dim, 1, &mut rng));
        let levels = config
            .pyramid_sizes
            .iter()
            .zip(config.strides())
            .enumerate()
            .map(|(k, (&len, stride))| Level {
                conv: Linear::new(&mut params, &format!("level{k}.conv"), (stride + 1) * h, h, true, &mut rng),
                lambda: Linear::new(&mut params, &format!("level{k}.lambda"), ds, h, true, &mut rng),
                psi: Linear::new(&mut params, &format!("level{k}.psi"), ds, h, true, &mut rng),
                len,
                stride,
            })
            .collect();
        let position = Linear::new(&mut params, "head.position", h, 3 * config.anchors_per_cell(), true, &mut rng);
        let face = match kind {
            GroundingKind::Scdm => None,
            GroundingKind::ScdmPlus => {
                let mut face_rng = rng_for(seed, "grounding/face");
                Some(Linear::new(&mut params, "head.face", h, FACIAL_REGION_COUNT, true, &mut face_rng))
            }
        };
        Ok(GroundingModel {
            config: config.clone(),
            kind,
            video_dim,
            vocab,
            encoder,
            fusion,
            att_s,
            att_a,
            att_w,
            levels,
            position,
            face,
            params,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Zeroes the position and face heads.
    pub fn zero_heads(&mut self) {
        for lin in std::iter::once(self.position).chain(self.face) {
            *self.params.get_mut(lin.w) = Tensor::zeros(lin.fan_in, lin.fan_out);
            if let Some(b) = lin.b {
                *self.params.get_mut(b) = Tensor::zeros(1, lin.fan_out);
            }
        }
    }

    pub fn tokens(&self, caption: &str) -> Vec<usize> {
        let mut t = self.vocab.encode(caption);
        t.truncate(self.config.max_sentence_tokens);
        if t.is_empty() {
            t.push(0);
        }
        t
    }

    /// Token states `N x ds` of a sentence.
    pub fn sentence(&self, g: &mut Graph, tokens: &[usize]) -> Var {
        self.encoder
            .token_states(g, tokens)
            .expect("token list is never empty")
    }

    /// Zero-pads or truncates segment features to `max_video_segments` rows.
    fn padded(&self, video: &Tensor) -> Tensor {
        let t = self.config.max_video_segments;
        let mut out = Tensor::zeros(t, video.cols());
        let n = video.rows().min(t);
        out.data_mut()[..n * video.cols()].copy_from_slice(&video.data()[..n * video.cols()]);
        out
    }

    pub fn fuse_graph(&self, g: &mut Graph, video: Var, s_bar: Var) -> Var {
        let ds = self.encoder.output_dim();
        let w = g.param(self.fusion.w);
        let ws = g.slice_rows(w, 0, ds);
        let wv = g.slice_rows(w, ds, self.video_dim);
        let vs = g.matmul(video, wv);
        let ss = g.matmul(s_bar, ws);
        let b = g.param(self.fusion.b.expect("fusion has a bias"));
        let sb = g.add(ss, b);
        let f = g.add_row(vs, sb);
        g.relu(f)
    }

    /// Context rows `L x ds` and attention weights `L x N` for cells `a`.
    pub fn attend_graph(&self, g: &mut Graph, sentence: Var, cells: Var) -> (Var, Var) {
        let n = g.value(sentence).rows();
        let l = g.value(cells).rows();
        let ws = g.param(self.att_s);
        let p = g.matmul(sentence, ws);
        let q = self.att_a.forward(g, cells);
        let e = g.pair_add(q, p);
        let e = g.tanh(e);
        let w = g.param(self.att_w);
        let e = g.matmul(e, w);
        let e = g.reshape(e, l, n);
        let alpha = g.softmax_rows(e);
        (g.matmul(alpha, sentence), alpha)
    }

    pub fn modulate_graph(&self, g: &mut Graph, level: usize, cells: Var, context: Var) -> Var {
        let lv = &self.levels[level];
        let mu = g.mean_rows(cells);
        let neg = g.scale(mu, -1.0);
        let diff = g.add_row(cells, neg);
        let sq = g.square(diff);
        let var = g.mean_rows(sq);
        let sigma = g.sqrt_floor(var, SIGMA_FLOOR);
        let norm = g.div_row(diff, sigma);
        let lam = lv.lambda.forward(g, context);
        let lam = g.tanh(lam);
        let psi = lv.psi.forward(g, context);
        let psi = g.tanh(psi);
        let m = g.mul(lam, norm);
        g.add(m, psi)
    }

    /// Full pyramid for one video (`segments x video_dim`) and sentence.
    pub fn forward(&self, g: &mut Graph, video: &Tensor, tokens: &[usize]) -> Result<Vec<LevelOut>> {
        if video.cols() != self.video_dim {
            return Err(Error::Shape(format!(
                "video features have {} channels, model expects {}",
                video.cols(),
                self.video_dim
            )));
        }
        let s = self.sentence(g, tokens);
        let s_bar = g.mean_rows(s);
        let v = g.input(self.padded(video));
        let mut x = self.fuse_graph(g, v, s_bar);
        let mut out = Vec::with_capacity(self.levels.len());
        for (k, lv) in self.levels.iter().enumerate() {
            let win = g.windows(x, lv.stride + 1, lv.stride, 1, lv.len);
            let a = lv.conv.forward(g, win);
            let a = g.relu(a);
            let (c, _) = self.attend_graph(g, s, a);
            let m = self.modulate_graph(g, k, a, c);
            if !g.value(m).all_finite() {
                return Err(Error::NonFinite {
                    what: "activation".into(),
                    detail: format!("pyramid level {k}"),
                });
            }
            let position = self.position.forward(g, m);
            let face = self.face.map(|f| f.forward(g, m));
            out.push(LevelOut { map: m, position, face });
            x = m;
        }
        Ok(out)
    }

    /// Position rows `(total anchors) x 3` and, for SCDM+, face rows
    /// `(total cells) x 24`, in anchor order.
    fn heads(&self, g: &mut Graph, levels: &[LevelOut]) -> (Var, Option<Var>) {
        let a = self.config.anchors_per_cell();
        let rows: Vec<Var> = levels
            .iter()
            .map(|l| {
                let n = g.value(l.position).rows();
                g.reshape(l.position, n * a, 3)
            })
            .collect();
        let pos = g.concat_rows(&rows);
        let face = self.face.map(|_| {
            let f: Vec<Var> = levels.iter().map(|l| l.face.expect("face head")).collect();
            g.concat_rows(&f)
        });
        (pos, face)
    }

    /// First global cell index of every level.
    fn cell_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.config
            .pyramid_sizes
            .iter()
            .map(|&l| {
                let o = off;
                off += l;
                o
            })
            .collect()
    }

    /// Training objective for one query, or `None` when the query has no
    /// positive or no negative anchor.
    pub fn query_loss(&self, g: &mut Graph, q: &PreparedQuery) -> Result<Option<Var>> {
        let labels: Vec<AnchorLabel> = q.labels.clone();
        let n_pos = labels.iter().filter(|l| l.positive).count();
        let n_neg = labels.len() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            return Ok(None);
        }
        let levels = self.forward(g, q.video, &q.tokens)?;
        let (pos, face) = self.heads(g, &levels);
        let rows = g.gather_rows(pos, &q.valid);
        let logits = g.slice_cols(rows, 0, 1);
        let targets = Tensor::from_vec(labels.len(), 1, labels.iter().map(|l| l.g_over).collect());
        let weights = Tensor::from_vec(
            labels.len(),
            1,
            labels
                .iter()
                .map(|l| if l.positive { 1.0 / n_pos as f64 } else { 1.0 / n_neg as f64 })
                .collect(),
        );
        let over = g.bce_logits(logits, targets);
        let over = g.mul_const(over, weights);
        let over = g.sum(over);

        let pos_idx: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.positive)
            .map(|(i, _)| i)
            .collect();
        let prow = g.gather_rows(rows, &pos_idx);
        let off = g.slice_cols(prow, 1, 2);
        let tgt = g.input(Tensor::from_vec(
            n_pos,
            2,
            pos_idx.iter().flat_map(|&i| [labels[i].delta_c, labels[i].delta_w]).collect(),
        ));
        let d = g.sub(off, tgt);
        let loc = g.smooth_l1(d);
        let loc = g.sum(loc);
        let loc = g.scale(loc, 1.0 / n_pos as f64);

        let w = self.config.loss_weights;
        let over = g.scale(over, w.over);
        let loc = g.scale(loc, w.loc);
        let mut total = g.add(over, loc);
        if let (Some(face), true) = (face, w.face > 0.0) {
            let cells: Vec<usize> = pos_idx.iter().map(|&i| q.cells[i]).collect();
            let z = g.gather_rows(face, &cells);
            let t = Tensor::from_vec(n_pos, FACIAL_REGION_COUNT, (0..n_pos).flat_map(|_| q.areas).collect());
            let fl = g.bce_logits(z, t);
            let fl = g.sum(fl);
            let fl = g.scale(fl, w.face / n_pos as f64);
            total = g.add(total, fl);
        }
        Ok(Some(total))
    }

    /// Scored anchor predictions of valid anchors, best first; ties keep
    /// anchor order.
    pub fn predict(&self, video: &Tensor, caption: &str, duration: f64) -> Result<Vec<ScoredSpan>> {
        let mut g = Graph::new(&self.params);
        let levels = self.forward(&mut g, video, &self.tokens(caption))?;
        let (pos, _) = self.heads(&mut g, &levels);
        let pos = g.value(pos);
        let anchors = anchors(&self.config, video.rows(), duration);
        let mut out: Vec<ScoredSpan> = anchors
            .iter()
            .enumerate()
            .filter(|(_, a)| a.valid)
            .map(|(i, a)| ScoredSpan {
                span: decode(&a.span, pos.get(i, 1), pos.get(i, 2), duration),
                score: sigmoid(pos.get(i, 0)),
            })
            .collect();
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(out)
    }

    pub fn to_checkpoint(&self, log: &[EpochLog]) -> Checkpoint {
        Checkpoint::from_params(
            self.kind.model_name(),
            json!({"grounding": self.config, "video_dim": self.video_dim}),
            serde_json::to_value(log).expect("log serializes"),
            json!({"vocabulary": self.vocab}),
            &self.params,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kind = match ck.model.as_str() {
            "scdm" => GroundingKind::Scdm,
            "scdmplus" => GroundingKind::ScdmPlus,
            other => return Err(Error::Checkpoint(format!("`{other}` is not a grounding model"))),
        };
        let bad = |e: serde_json::Error| Error::Checkpoint(format!("bad grounding header: {e}"));
        let config: GroundingConfig = serde_json::from_value(ck.config["grounding"].clone()).map_err(bad)?;
        let dim = ck.config["video_dim"].as_u64().unwrap_or(0) as usize;
        let vocab: Vocabulary = serde_json::from_value(ck.extra["vocabulary"].clone()).map_err(bad)?;
        let mut m = GroundingModel::new(&config, kind, dim, vocab.reindex(), 0)?;
        ck.load_into(&mut m.params)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path, log: &[EpochLog]) -> Result<()> {
        self.to_checkpoint(log).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        GroundingModel::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn bind<'a>(&'a self, videos: &'a VideoSet) -> BoundGrounding<'a> {
        BoundGrounding { model: self, videos }
    }
}

/// `center + delta_c * width`, `width * exp(delta_w)`, clamped to the video.
pub fn decode(anchor: &TemporalSpan, delta_c: f64, delta_w: f64, duration: f64) -> TemporalSpan {
    let c = anchor.center() + delta_c * anchor.width();
    let w = anchor.width() * delta_w.exp();
    TemporalSpan {
        start_s: (c - w / 2.0).clamp(0.0, duration),
        end_s: (c + w / 2.0).clamp(0.0, duration),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSpan {
    pub span: TemporalSpan,
    pub score: f64,
}

/// Id of segment `t` of a video in a segment feature store.
pub fn segment_id(video_id: &str, t: usize) -> String {
    format!("{video_id}|{t:04}")
}

/// Segment features and durations of a set of videos.
#[derive(Debug, Clone, Default)]
pub struct VideoSet {
    pub features: HashMap<String, Tensor>,
    pub durations: HashMap<String, f64>,
}

impl VideoSet {
    /// Collects consecutive segments `0..` of every annotated video.
    pub fn from_store(store: &FeatureStore, videos: &[VideoAnnotation]) -> Result<Self> {
        let mut set = VideoSet::default();
        for v in videos {
            let mut rows = Vec::new();
            while let Some(f) = store.get(&segment_id(&v.video_id, rows.len())) {
                rows.push(f.to_f64());
            }
            if rows.is_empty() {
                return Err(Error::UnknownItem(segment_id(&v.video_id, 0)));
            }
            set.features.insert(v.video_id.clone(), Tensor::from_rows(&rows));
            set.durations.insert(v.video_id.clone(), v.duration_s);
        }
        Ok(set)
    }

    pub fn get(&self, video_id: &str) -> Result<(&Tensor, f64)> {
        match (self.features.get(video_id), self.durations.get(video_id)) {
            (Some(f), Some(&d)) => Ok((f, d)),
            _ => Err(Error::UnknownItem(video_id.to_string())),
        }
    }
}

/// Predicts where a caption happens in a video.
pub trait Localizer: Sync {
    /// At most `top_k` spans, best first.
    fn localize(&self, video_id: &str, caption: &str, top_k: usize) -> Result<Vec<ScoredSpan>>;
}

pub struct BoundGrounding<'a> {
    model: &'a GroundingModel,
    videos: &'a VideoSet,
}

impl Localizer for BoundGrounding<'_> {
    fn localize(&self, video_id: &str, caption: &str, top_k: usize) -> Result<Vec<ScoredSpan>> {
        let (f, d) = self.videos.get(video_id)?;
        let mut p = self.model.predict(f, caption, d)?;
        p.truncate(top_k);
        Ok(p)
    }
}

/// Returns the annotated span of each caption.
#[derive(Debug, Clone, Default)]
pub struct OracleLocalizer {
    spans: HashMap<String, HashMap<String, TemporalSpan>>,
}

impl OracleLocalizer {
    pub fn from_annotations(videos: &[VideoAnnotation]) -> Self {
        let spans = videos
            .iter()
            .map(|v| {
                let mut m = HashMap::new();
                for s in &v.steps {
                    m.entry(s.caption.clone()).or_insert(s.span);
                }
                (v.video_id.clone(), m)
            })
            .collect();
        OracleLocalizer { spans }
    }
}

impl Localizer for OracleLocalizer {
    fn localize(&self, video_id: &str, caption: &str, _: usize) -> Result<Vec<ScoredSpan>> {
        let span = self
            .spans
            .get(video_id)
            .and_then(|m| m.get(caption))
            .ok_or_else(|| Error::UnknownItem(format!("{video_id}/{caption}")))?;
        Ok(vec![ScoredSpan { span: *span, score: 1.0 }])
    }
}

/// Sorts captions by the center of their top-1 localization; equal
/// centers keep presentation order.
pub fn order_steps_by_localization(localizer: &dyn Localizer, video_id: &str, captions: &[String]) -> Result<Permutation5> {
    let centers = captions
        .iter()
        .map(|c| {
            localizer
                .localize(video_id, c, 1)?
                .first()
                .map(|s| s.span.center())
                .ok_or(Error::EmptySet("localizations"))
        })
        .collect::<Result<Vec<f64>>>()?;
    Permutation5::sorting(&centers)
}

pub fn select_answers_localize(localizer: &dyn Localizer, questions: &[OrderingQuestion], mode: Execution) -> Result<Choices> {
    let picks = exec::try_map(mode, questions, |q| {
        let p = order_steps_by_localization(localizer, &q.video_id, &q.items)?;
        Ok(select_answer_by_edit_distance(&p, q))
    })?;
    Ok(questions.iter().map(|q| q.question_id.clone()).zip(picks).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingQuery {
    pub video_id: String,
    pub caption: String,
    pub span: TemporalSpan,
    pub areas: [f64; FACIAL_REGION_COUNT],
}

pub fn grounding_queries(videos: &[VideoAnnotation]) -> Vec<GroundingQuery> {
    videos
        .iter()
        .flat_map(|v| {
            v.steps.iter().map(|s| GroundingQuery {
                video_id: v.video_id.clone(),
                caption: s.caption.clone(),
                span: s.span,
                areas: area_indicator(&s.areas),
            })
        })
        .collect()
}

/// A query with its tokens, anchor labels and video features resolved.
pub struct PreparedQuery<'a> {
    pub video: &'a Tensor,
    pub tokens: Vec<usize>,
    /// Indices of valid anchors in head order.
    pub valid: Vec<usize>,
    /// Global cell of each valid anchor.
    pub cells: Vec<usize>,
    pub labels: Vec<AnchorLabel>,
    pub areas: [f64; FACIAL_REGION_COUNT],
}

impl GroundingModel {
    pub fn prepare<'a>(&self, q: &GroundingQuery, videos: &'a VideoSet) -> Result<PreparedQuery<'a>> {
        let (video, duration) = videos.get(&q.video_id)?;
        let all = anchors(&self.config, video.rows(), duration);
        let offsets = self.cell_offsets();
        let (valid, anchors): (Vec<usize>, Vec<&Anchor>) = all.iter().enumerate().filter(|(_, a)| a.valid).unzip();
        let spans: Vec<TemporalSpan> = anchors.iter().map(|a| a.span).collect();
        Ok(PreparedQuery {
            video,
            tokens: self.tokens(&q.caption),
            cells: anchors.iter().map(|a| offsets[a.level] + a.cell).collect(),
            valid,
            labels: assign_labels(&spans, &q.span),
            areas: q.areas,
        })
    }
}

/// Trains with the model's own training configuration. Queries without a
/// positive or negative anchor are skipped.
pub fn train_grounding(
    model: &mut GroundingModel,
    queries: &[GroundingQuery],
    videos: &VideoSet,
    mode: Execution,
) -> Result<Vec<EpochLog>> {
    if queries.is_empty() {
        return Err(Error::EmptySet("grounding queries"));
    }
    let cfg = model.config.train.clone();
    let prepared = queries
        .iter()
        .map(|q| model.prepare(q, videos))
        .collect::<Result<Vec<_>>>()?;
    let mut adam = train::optimizer(&cfg.optimizer, &model.params);
    let mut rng = rng_for(cfg.seed, "grounding/train");
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let frozen = model.clone();
        let loss_fn = |g: &mut Graph, q: &PreparedQuery| frozen.query_loss(g, q);
        let (loss, samples) = train::run_epoch(&mut model.params, &mut adam, &prepared, cfg.batch_size, &mut rng, mode, &loss_fn)?;
        log::info!("{} epoch {epoch}: loss {loss:.5} over {samples} queries", model.kind.model_name());
        log.push(EpochLog {
            epoch,
            phase: None,
            loss,
            samples,
            val_accuracy: None,
        });
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingEval {
    pub recall: BTreeMap<String, f64>,
    pub mean_iou: f64,
}

pub fn recall_key(k: usize, m: f64) -> String {
    format!("R@{k},tIoU={m}")
}

pub fn evaluate_grounding(
    localizer: &dyn Localizer,
    queries: &[GroundingQuery],
    ks: &[usize],
    ms: &[f64],
    mode: Execution,
) -> Result<GroundingEval> {
    let top = ks.iter().copied().max().unwrap_or(1);
    let preds = exec::try_map(mode, queries, |q| -> Result<Vec<TemporalSpan>> {
        Ok(localizer
            .localize(&q.video_id, &q.caption, top)?
            .into_iter()
            .map(|s| s.span)
            .collect())
    })?;
    let gts: Vec<TemporalSpan> = queries.iter().map(|q| q.span).collect();
    let mut recall = BTreeMap::new();
    for &k in ks {
        for &m in ms {
            recall.insert(recall_key(k, m), recall_at_k_tiou(&preds, &gts, k, m)?);
        }
    }
    let top1 = preds
        .iter()
        .map(|p| p.first().copied().ok_or(Error::EmptySet("localizations")))
        .collect::<Result<Vec<_>>>()?;
    Ok(GroundingEval {
        recall,
        mean_iou: mean_iou(&top1, &gts)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradient_check;
    use crate::rng::rng_for;
    use proptest::prelude::*;

    fn span(a: f64, b: f64) -> TemporalSpan {
        TemporalSpan { start_s: a, end_s: b }
    }

    fn label(g: f64, positive: bool) -> AnchorLabel {
        AnchorLabel {
            g_over: g,
            positive,
            delta_c: 0.0,
            delta_w: 0.0,
        }
    }

    #[test]
    fn tiou_fixtures() {
        assert_eq!(tiou(&span(0.0, 10.0), &span(0.0, 10.0)), 1.0);
        assert!((tiou(&span(0.0, 10.0), &span(5.0, 15.0)) - 5.0 / 15.0).abs() < 1e-15);
        assert_eq!(tiou(&span(0.0, 1.0), &span(2.0, 3.0)), 0.0);
    }

    #[test]
    fn labels_by_hand() {
        let gt = span(10.0, 20.0);
        let l = assign_labels(&[span(10.0, 20.0), span(5.0, 15.0), span(12.0, 22.0)], &gt);
        assert_eq!((l[0].g_over, l[0].positive, l[0].delta_c, l[0].delta_w), (1.0, true, 0.0, 0.0));
        // (5,15): overlap 5, union 15
        assert!((l[1].g_over - 1.0 / 3.0).abs() < 1e-15 && !l[1].positive);
        assert!((l[1].delta_c - 0.5).abs() < 1e-15);
        // (12,22): overlap 8, union 12
        assert!((l[2].g_over - 2.0 / 3.0).abs() < 1e-15 && l[2].positive);
        assert!((l[2].delta_c + 0.2).abs() < 1e-15);
        assert_eq!(l[2].delta_w, 0.0);
        // exactly 0.5 is negative: (0,10) vs (0,5)
        let half = assign_labels(&[span(0.0, 10.0)], &span(0.0, 5.0));
        assert_eq!(half[0].g_over, 0.5);
        assert!(!half[0].positive);
        assert!((half[0].delta_w - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn decode_and_clamp() {
        let s = decode(&span(10.0, 20.0), 0.5, 2f64.ln(), 100.0);
        assert!((s.start_s - 10.0).abs() < 1e-12 && (s.end_s - 30.0).abs() < 1e-12);
        let c = decode(&span(90.0, 100.0), 0.5, 0.0, 100.0);
        assert_eq!(c.end_s, 100.0);
    }

    #[test]
    fn empty_sets_are_errors() {
        assert!(matches!(loss_over(&[0.5], &[label(0.0, false)]), Err(Error::EmptySet("positive anchors"))));
        assert!(matches!(loss_over(&[0.5], &[label(1.0, true)]), Err(Error::EmptySet("negative anchors"))));
        assert!(loss_loc(&[(0.0, 0.0)], &[label(0.0, false)]).is_err());
    }

    fn tiny_config() -> GroundingConfig {
        GroundingConfig {
            max_video_segments: 8,
            max_sentence_tokens: 5,
            pyramid_sizes: vec![4, 2],
            anchor_ratios: vec![1.0, 1.5],
            embed_dim: 3,
            text_hidden: 2,
            hidden: 3,
            attention_dim: 2,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(GroundingConfig::default().validate().is_ok());
        let mut c = tiny_config();
        c.pyramid_sizes = vec![4, 3];
        assert!(c.validate().is_err());
        c.pyramid_sizes = vec![4, 4];
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.loss_weights.over = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn anchors_follow_pyramid() {
        let cfg = tiny_config();
        let a = anchors(&cfg, 8, 80.0);
        assert_eq!(a.len(), (4 + 2) * 2);
        assert_eq!(a[0].span, span(0.0, 20.0));
        assert_eq!(a[1].span, span(-5.0, 25.0));
        assert!(a.iter().all(|x| x.valid));
        // half the segments are padding
        let padded = anchors(&cfg, 4, 40.0);
        assert_eq!(padded.iter().filter(|x| x.valid).count(), 2 * 2 + 2);
    }

    #[test]
    fn graph_blocks_match_reference() {
        let mut rng = rng_for(9, "ref");
        let vocab = Vocabulary::build(["a b c d"]);
        let m = GroundingModel::new(&tiny_config(), GroundingKind::ScdmPlus, 3, vocab, 4).unwrap();
        let video = Tensor::normal(8, 3, 1.0, &mut rng);
        let tokens = [1, 3, 2];
        let p = m.params();
        let mut g = Graph::new(p);
        let s = m.sentence(&mut g, &tokens);
        let s_bar = g.mean_rows(s);
        let v = g.input(video.clone());
        let f = m.fuse_graph(&mut g, v, s_bar);
        let want = fuse(&video, g.value(s_bar).data(), p.get(m.fusion.w), p.get(m.fusion.b.unwrap()).data()).unwrap();
        for (x, y) in g.value(f).data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let cells = g.input(Tensor::normal(4, 3, 1.0, &mut rng));
        let (c, alpha) = m.attend_graph(&mut g, s, cells);
        let mm = m.modulate_graph(&mut g, 0, cells, c);
        let sv = g.value(s).clone();
        let cv = g.value(cells).clone();
        for i in 0..4 {
            let (ci, ai) = attend(
                &sv,
                cv.row(i),
                p.get(m.att_s),
                p.get(m.att_a.w),
                p.get(m.att_a.b.unwrap()).data(),
                p.get(m.att_w).data(),
            );
            assert!((ai.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (x, y) in g.value(alpha).row(i).iter().zip(&ai) {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in g.value(c).row(i).iter().zip(&ci) {
                assert!((x - y).abs() < 1e-12);
            }
            let lv = &m.levels[0];
            let mi = modulate(
                &cv,
                i,
                &ci,
                p.get(lv.lambda.w),
                p.get(lv.lambda.b.unwrap()).data(),
                p.get(lv.psi.w),
                p.get(lv.psi.b.unwrap()).data(),
            );
            for (x, y) in g.value(mm).row(i).iter().zip(&mi) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_heads_give_half_probability() {
        let vocab = Vocabulary::build(["a b"]);
        let mut m = GroundingModel::new(&tiny_config(), GroundingKind::ScdmPlus, 2, vocab, 1).unwrap();
        m.zero_heads();
        let video = Tensor::filled(8, 2, 0.3);
        let p = m.predict(&video, "a b", 80.0).unwrap();
        assert!(p.iter().all(|s| s.score == 0.5));
        // all tied: the first valid anchor wins and decodes to itself (clamped)
        assert_eq!(p[0].span, span(0.0, 20.0));
    }

    #[test]
    fn scdm_plus_gradients_match_finite_differences() {
        let vocab = Vocabulary::build(["a b c"]);
        let mut rng = rng_for(2, "gc");
        let m = GroundingModel::new(&tiny_config(), GroundingKind::ScdmPlus, 2, vocab, 8).unwrap();
        let mut videos = VideoSet::default();
        videos.features.insert("v".into(), Tensor::normal(8, 2, 1.0, &mut rng));
        videos.durations.insert("v".into(), 80.0);
        let mut areas = [0.0; FACIAL_REGION_COUNT];
        areas[3] = 1.0;
        let q = GroundingQuery {
            video_id: "v".into(),
            caption: "a c b".into(),
            span: span(12.0, 38.0),
            areas,
        };
        let pq = m.prepare(&q, &videos).unwrap();
        let r = gradient_check(m.params(), 1e-5, 1e-4, |g| Ok(m.query_loss(g, &pq)?.unwrap())).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    proptest! {
        #[test]
        fn tiou_properties(a in 0.0f64..50.0, wa in 0.1f64..30.0, b in 0.0f64..50.0, wb in 0.1f64..30.0) {
            let (x, y) = (span(a, a + wa), span(b, b + wb));
            let t = tiou(&x, &y);
            prop_assert!((0.0..=1.0).contains(&t));
            prop_assert_eq!(t, tiou(&y, &x));
            prop_assert_eq!(tiou(&x, &x), 1.0);
            if x != y {
                prop_assert!(t < 1.0);
            }
        }
    }
}
