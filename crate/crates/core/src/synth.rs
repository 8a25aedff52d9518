//! Synthetic corpora with known ground truth.
//!
//! Every video applies a random selection of step kinds. Each kind has a
//! fixed facial effect vector and a set of facial areas; its caption names
//! the kind and the areas, so captions determine effects. Face images
//! accumulate the effects of completed steps and video segments carry the
//! signature of the step they fall in.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::compose::CompositionOracle;
use crate::error::{Error, Result};
use crate::grounding::{segment_id, OracleLocalizer};
use crate::io::{pre_makeup_image, step_frame_images, FeatureStore};
use crate::model::{FacialArea, FeatureVector, StepAnnotation, TemporalSpan, VideoAnnotation, FACIAL_REGION_COUNT};
use crate::pairwise::OracleComparator;
use crate::rng::{rng_for, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_videos: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    /// Image feature dimension.
    pub feature_dim: usize,
    /// Norm of each step's effect on the face vector.
    pub effect_magnitude: f64,
    /// Expected norm of the per-image noise vector.
    pub noise_magnitude: f64,
    /// Share of every effect along a common "more makeup" direction.
    pub drift_correlation: f64,
    /// Number of distinct step kinds (caption vocabulary).
    pub n_kinds: usize,
    pub max_areas_per_kind: usize,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub video_segments: usize,
    pub video_dim: usize,
    pub video_noise: f64,
    /// Spread of the usual kind order; 0 makes kinds appear in index order.
    pub order_noise: f64,
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_videos: 40,
            min_steps: 5,
            max_steps: 9,
            feature_dim: 64,
            effect_magnitude: 4.0,
            noise_magnitude: 1.0,
            drift_correlation: 0.6,
            n_kinds: 24,
            max_areas_per_kind: 3,
            min_duration_s: 60.0,
            max_duration_s: 240.0,
            video_segments: 64,
            video_dim: 32,
            video_noise: 0.5,
            order_noise: 2.0,
            id_prefix: "syn".into(),
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("world config: {m}")));
        if !(self.effect_magnitude > 0.0) {
            return bad("effect_magnitude must be positive");
        }
        if !(self.noise_magnitude >= 0.0 && self.video_noise >= 0.0 && self.order_noise >= 0.0) {
            return bad("noise magnitudes must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.drift_correlation) {
            return bad("drift_correlation must lie in [0, 1]");
        }
        if self.min_steps == 0 || self.min_steps > self.max_steps {
            return bad("step range must satisfy 1 <= min_steps <= max_steps");
        }
        if self.max_steps > self.n_kinds {
            return bad("max_steps cannot exceed n_kinds");
        }
        if self.feature_dim < 2 || self.video_dim == 0 || self.video_segments == 0 {
            return bad("dimensions must be positive (feature_dim >= 2)");
        }
        if self.max_areas_per_kind == 0 || self.max_areas_per_kind > FACIAL_REGION_COUNT {
            return bad("max_areas_per_kind must lie in [1, 24]");
        }
        if !(self.min_duration_s > 0.0 && self.min_duration_s <= self.max_duration_s) {
            return bad("duration range must be positive and ordered");
        }
        if self.min_duration_s < self.max_steps as f64 {
            return bad("videos must last at least one second per step");
        }
        Ok(())
    }
}

/// Annotations plus image and segment features.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub annotations: Vec<VideoAnnotation>,
    pub images: FeatureStore,
    pub videos: FeatureStore,
}

/// Ground-truth stand-ins for every learned model.
pub struct Oracles {
    pub comparator: OracleComparator,
    pub composer: CompositionOracle,
    pub localizer: OracleLocalizer,
}

impl World {
    pub fn oracles(&self, fps: f64) -> Result<Oracles> {
        Ok(Oracles {
            comparator: OracleComparator::from_annotations(&self.annotations, fps)?,
            composer: CompositionOracle::from_annotations(&self.annotations, fps)?,
            localizer: OracleLocalizer::from_annotations(&self.annotations),
        })
    }
}

pub fn kind_token(kind: usize) -> String {
    format!("k{kind:02}")
}

pub fn area_token(area: FacialArea) -> String {
    format!("a{:02}", area.region_id())
}

fn caption(kind: usize, areas: &BTreeSet<FacialArea>) -> String {
    let mut s = format!("apply {} on", kind_token(kind));
    for a in areas {
        s.push(' ');
        s.push_str(&area_token(*a));
    }
    s
}

fn normal_vec(n: usize, std: f64, rng: &mut Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

fn to_vector(v: &[f64]) -> Result<FeatureVector> {
    FeatureVector::new(v.iter().map(|&x| x as f32).collect())
}

struct Kinds {
    effects: Vec<Vec<f64>>,
    signatures: Vec<Vec<f64>>,
    areas: Vec<BTreeSet<FacialArea>>,
}

fn gen_kinds(cfg: &WorldConfig) -> Result<Kinds> {
    let mut rng = rng_for(cfg.seed, "world/kinds");
    let d = cfg.feature_dim;
    let mut drift = normal_vec(d, 1.0, &mut rng);
    unit(&mut drift);
    let rho = cfg.drift_correlation;
    let mut effects = Vec::with_capacity(cfg.n_kinds);
    let mut signatures = Vec::with_capacity(cfg.n_kinds);
    let mut areas = Vec::with_capacity(cfg.n_kinds);
    for _ in 0..cfg.n_kinds {
        let mut u = normal_vec(d, 1.0, &mut rng);
        let along: f64 = u.iter().zip(&drift).map(|(a, b)| a * b).sum();
        u.iter_mut().zip(&drift).for_each(|(x, dr)| *x -= along * dr);
        unit(&mut u);
        let side = (1.0 - rho * rho).sqrt();
        effects.push(
            drift
                .iter()
                .zip(&u)
                .map(|(dr, x)| cfg.effect_magnitude * (rho * dr + side * x))
                .collect(),
        );
        let mut sig = normal_vec(cfg.video_dim, 1.0, &mut rng);
        unit(&mut sig);
        signatures.push(sig);
        let n_areas = rng.random_range(1..=cfg.max_areas_per_kind);
        let set = sample(&mut rng, FACIAL_REGION_COUNT, n_areas)
            .into_iter()
            .map(|a| FacialArea::new(a as u8))
            .collect::<Result<BTreeSet<_>>>()?;
        areas.push(set);
    }
    Ok(Kinds {
        effects,
        signatures,
        areas,
    })
}

fn gen_annotation(cfg: &WorldConfig, kinds: &Kinds, index: usize) -> Result<(VideoAnnotation, Vec<usize>)> {
    let video_id = format!("{}{:04}", cfg.id_prefix, index + 1);
    let mut rng = rng_for(cfg.seed, &format!("world/video/{video_id}"));
    let n = rng.random_range(cfg.min_steps..=cfg.max_steps);
    let mut chosen: Vec<(f64, usize)> = sample(&mut rng, cfg.n_kinds, n)
        .into_iter()
        .map(|k| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (k as f64 + cfg.order_noise * z, k)
        })
        .collect();
    chosen.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = chosen.into_iter().map(|(_, k)| k).collect();

    let duration = round1(rng.random_range(cfg.min_duration_s..=cfg.max_duration_s));
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..2.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut bounds = vec![0.0];
    let mut acc = 0.0;
    for w in &weights[..n - 1] {
        acc += w;
        bounds.push(round1(duration * acc / total));
    }
    bounds.push(duration);

    let steps = order
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            Ok(StepAnnotation {
                index: i as u32 + 1,
                caption: caption(k, &kinds.areas[k]),
                span: TemporalSpan::new(bounds[i], bounds[i + 1])?,
                areas: kinds.areas[k].clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        VideoAnnotation {
            video_id,
            duration_s: duration,
            steps,
        },
        order,
    ))
}

/// Frame number encoded in an image id.
fn frame_of(id: &str) -> u64 {
    id.rsplit('@').next().and_then(|f| f.parse().ok()).unwrap_or(0)
}

pub fn gen_world(cfg: &WorldConfig, fps: f64) -> Result<World> {
    cfg.validate()?;
    if !(fps.is_finite() && fps > 0.0) {
        return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
    }
    let kinds = gen_kinds(cfg)?;
    let mut images = FeatureStore::new(cfg.feature_dim)?;
    let mut videos = FeatureStore::new(cfg.video_dim)?;
    let mut annotations = Vec::with_capacity(cfg.n_videos);
    let img_std = cfg.noise_magnitude / (cfg.feature_dim as f64).sqrt();
    let vid_std = cfg.video_noise / (cfg.video_dim as f64).sqrt();
    for i in 0..cfg.n_videos {
        let (video, order) = gen_annotation(cfg, &kinds, i)?;
        let mut rng = rng_for(cfg.seed, &format!("world/features/{}", video.video_id));
        let base = normal_vec(cfg.feature_dim, 1.0, &mut rng);
        let noisy = |mean: &[f64], rng: &mut Rng| -> Vec<f64> {
            mean.iter().zip(normal_vec(mean.len(), img_std, rng)).map(|(m, n)| m + n).collect()
        };

        let pre = pre_makeup_image(&video, fps)?;
        images.insert(pre.clone(), to_vector(&noisy(&base, &mut rng))?)?;
        let mut done = base.clone();
        for (s, &k) in video.steps.iter().zip(&order) {
            let width = s.span.width();
            for id in step_frame_images(&video, s.index, fps)? {
                if id == pre || images.contains(&id) {
                    continue;
                }
                let t = (frame_of(&id) + 1) as f64 / fps;
                let tau = ((t - s.span.start_s) / width).clamp(0.0, 1.0);
                let mean: Vec<f64> = done.iter().zip(&kinds.effects[k]).map(|(b, e)| b + tau * e).collect();
                images.insert(id, to_vector(&noisy(&mean, &mut rng))?)?;
            }
            done.iter_mut().zip(&kinds.effects[k]).for_each(|(b, e)| *b += e);
        }

        let seg = video.duration_s / cfg.video_segments as f64;
        for t in 0..cfg.video_segments {
            let center = (t as f64 + 0.5) * seg;
            let step = video
                .steps
                .iter()
                .position(|s| center < s.span.end_s)
                .unwrap_or(video.steps.len() - 1);
            let sig = &kinds.signatures[order[step]];
            let f: Vec<f64> = sig
                .iter()
                .zip(normal_vec(cfg.video_dim, vid_std, &mut rng))
                .map(|(s, n)| s + n)
                .collect();
            videos.insert(segment_id(&video.video_id, t), to_vector(&f)?)?;
        }
        annotations.push(video);
    }
    Ok(World {
        config: cfg.clone(),
        annotations,
        images,
        videos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::step_end_image;
    use crate::model::validate_annotation;
    use crate::pairwise::PairwiseScorer;

    fn small() -> WorldConfig {
        WorldConfig {
            n_videos: 6,
            ..Default::default()
        }
    }

    #[test]
    fn annotations_are_valid_and_tile() {
        let w = gen_world(&small(), 10.0).unwrap();
        assert_eq!(w.annotations.len(), 6);
        assert_eq!(w.annotations[0].video_id, "syn0001");
        for v in &w.annotations {
            assert!(validate_annotation(v).is_empty(), "{:?}", validate_annotation(v));
            assert!((5..=9).contains(&v.steps.len()));
            assert_eq!(v.steps[0].span.start_s, 0.0);
            assert_eq!(v.steps.last().unwrap().span.end_s, v.duration_s);
            for p in v.steps.windows(2) {
                assert_eq!(p[0].span.end_s, p[1].span.start_s);
            }
            for s in &v.steps {
                assert!(s.caption.starts_with("apply k"));
                assert!(!s.areas.is_empty());
            }
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = gen_world(&small(), 10.0).unwrap();
        let b = gen_world(&small(), 10.0).unwrap();
        assert_eq!(a.annotations, b.annotations);
        assert_eq!(a.images, b.images);
        assert_eq!(a.videos, b.videos);
        let c = gen_world(&WorldConfig { seed: 1, ..small() }, 10.0).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn noiseless_trajectory_is_monotone_along_drift() {
        let cfg = WorldConfig {
            noise_magnitude: 0.0,
            drift_correlation: 1.0,
            ..small()
        };
        let w = gen_world(&cfg, 10.0).unwrap();
        let oracle = w.oracles(10.0).unwrap().comparator;
        for v in &w.annotations {
            let ends: Vec<Vec<f64>> = v
                .steps
                .iter()
                .map(|s| w.images.require(&step_end_image(v, s.index, 10.0).unwrap()).unwrap().to_f64())
                .collect();
            // with full drift correlation every effect is the same vector,
            // so consecutive differences are all equal and non-zero
            let d0: Vec<f64> = ends[1].iter().zip(&ends[0]).map(|(a, b)| a - b).collect();
            for p in ends.windows(2) {
                for ((a, b), d) in p[1].iter().zip(&p[0]).zip(&d0) {
                    assert!((a - b - d).abs() < 1e-4);
                }
            }
            let ids: Vec<String> = v.steps.iter().map(|s| step_end_image(v, s.index, 10.0).unwrap()).collect();
            for i in 0..ids.len() {
                for j in 0..ids.len() {
                    if i != j {
                        let p = oracle.probability(&v.video_id, &ids[i], &ids[j]).unwrap();
                        assert_eq!(p, if i < j { 1.0 } else { 0.0 });
                    }
                }
            }
        }
    }

    #[test]
    fn segments_cover_every_video() {
        let w = gen_world(&small(), 10.0).unwrap();
        assert_eq!(w.videos.len(), 6 * 64);
        assert!(w.videos.contains("syn0003|0063"));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(gen_world(&WorldConfig { effect_magnitude: 0.0, ..small() }, 10.0).is_err());
        assert!(gen_world(&WorldConfig { noise_magnitude: -1.0, ..small() }, 10.0).is_err());
        assert!(gen_world(&WorldConfig { max_steps: 30, ..small() }, 10.0).is_err());
    }
}
