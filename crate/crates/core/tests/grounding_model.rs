use ordervqa::autograd::{gradient_check, Graph};
use ordervqa::exec::Execution;
use ordervqa::grounding::*;
use ordervqa::model::{TemporalSpan, FACIAL_REGION_COUNT};
use ordervqa::nn::Vocabulary;
use ordervqa::rng::rng_for;
use ordervqa::synth::{gen_world, WorldConfig};
use ordervqa::tensor::Tensor;
use ordervqa::train::TrainConfig;
use rand::Rng as _;

const KINDS: [GroundingKind; 2] = [GroundingKind::Scdm, GroundingKind::ScdmPlus];

fn narrow(max_segments: usize, pyramid: Vec<usize>) -> GroundingConfig {
    GroundingConfig {
        max_video_segments: max_segments,
        max_sentence_tokens: 6,
        pyramid_sizes: pyramid,
        embed_dim: 3,
        text_hidden: 2,
        hidden: 3,
        attention_dim: 2,
        ..Default::default()
    }
}

#[test]
fn pyramid_shapes_for_1024_segments() {
    let cfg = narrow(1024, vec![256, 128, 64, 32, 16]);
    let vocab = Vocabulary::build(["apply base"]);
    for kind in KINDS {
        let m = GroundingModel::new(&cfg, kind, 4, vocab.clone(), 0).unwrap();
        let mut rng = rng_for(1, "shape");
        for segments in [1024, 512, 100] {
            let video = Tensor::normal(segments, 4, 1.0, &mut rng);
            let mut g = Graph::new(m.params());
            let out = m.forward(&mut g, &video, &m.tokens("apply base")).unwrap();
            let lens: Vec<usize> = out.iter().map(|l| g.value(l.map).rows()).collect();
            assert_eq!(lens, [256, 128, 64, 32, 16]);
            for l in &out {
                assert_eq!(g.value(l.map).cols(), cfg.hidden);
                assert_eq!(g.value(l.position).cols(), 3 * cfg.anchor_ratios.len());
                match (kind, l.face) {
                    (GroundingKind::Scdm, f) => assert!(f.is_none()),
                    (GroundingKind::ScdmPlus, f) => assert_eq!(g.value(f.unwrap()).cols(), FACIAL_REGION_COUNT),
                }
            }
        }
        assert_eq!(anchors(&cfg, 1024, 600.0).len(), (256 + 128 + 64 + 32 + 16) * 2);
    }
}

#[test]
fn wider_model_keeps_cell_counts() {
    let mut cfg = narrow(1024, vec![256, 128, 64, 32, 16]);
    let vocab = Vocabulary::build(["x y"]);
    let mut rng = rng_for(2, "shape");
    let video = Tensor::normal(1024, 2, 1.0, &mut rng);
    let base = GroundingModel::new(&cfg, GroundingKind::Scdm, 2, vocab.clone(), 0).unwrap();
    cfg.hidden *= 2;
    cfg.attention_dim *= 2;
    let wide = GroundingModel::new(&cfg, GroundingKind::Scdm, 2, vocab, 0).unwrap();
    let rows = |m: &GroundingModel| {
        let mut g = Graph::new(m.params());
        let out = m.forward(&mut g, &video, &[1, 2]).unwrap();
        out.iter().map(|l| g.value(l.position).shape()).collect::<Vec<_>>()
    };
    assert_eq!(rows(&base), rows(&wide));
}

#[test]
fn wrong_channel_count_is_rejected() {
    let cfg = narrow(16, vec![8, 4]);
    let m = GroundingModel::new(&cfg, GroundingKind::Scdm, 2, Vocabulary::build(["a"]), 0).unwrap();
    let wrong_dim = Tensor::zeros(16, 3);
    let mut g = Graph::new(m.params());
    assert!(m.forward(&mut g, &wrong_dim, &[1]).is_err());
}

struct Case {
    cfg: GroundingConfig,
    video_dim: usize,
    segments: usize,
    duration: f64,
}

fn random_cases() -> Vec<Case> {
    let mut rng = rng_for(17, "gradient cases");
    let pyramids = [vec![4, 2], vec![8, 4, 2], vec![6, 3]];
    pyramids
        .into_iter()
        .map(|p| {
            let t = p[0] * 2;
            let mut cfg = narrow(t, p);
            cfg.embed_dim = rng.random_range(2..4);
            cfg.text_hidden = rng.random_range(2..4);
            cfg.hidden = rng.random_range(2..4);
            cfg.attention_dim = rng.random_range(2..4);
            Case {
                cfg,
                video_dim: rng.random_range(1..4),
                segments: rng.random_range(t / 2 + 1..=t),
                duration: rng.random_range(40.0..120.0),
            }
        })
        .collect()
}

fn query_for(case: &Case, rng: &mut ordervqa::rng::Rng) -> (VideoSet, GroundingQuery) {
    let mut videos = VideoSet::default();
    videos.features.insert("v".into(), Tensor::normal(case.segments, case.video_dim, 1.0, rng));
    videos.durations.insert("v".into(), case.duration);
    let mut areas = [0.0; FACIAL_REGION_COUNT];
    for a in areas.iter_mut().take(5) {
        *a = f64::from(rng.random_bool(0.5));
    }
    let start = rng.random_range(0.0..case.duration * 0.5);
    let q = GroundingQuery {
        video_id: "v".into(),
        caption: "put c on b a".into(),
        span: TemporalSpan::new(start, start + case.duration * 0.3).unwrap(),
        areas,
    };
    (videos, q)
}

#[test]
fn full_objective_gradients() {
    for (i, case) in random_cases().iter().enumerate() {
        for kind in KINDS {
            let mut rng = rng_for(i as u64, "gc video");
            let m = GroundingModel::new(&case.cfg, kind, case.video_dim, Vocabulary::build(["a b c on put"]), i as u64).unwrap();
            let (videos, q) = query_for(case, &mut rng);
            let pq = m.prepare(&q, &videos).unwrap();
            let r = gradient_check(m.params(), 1e-5, 1e-4, |g| Ok(m.query_loss(g, &pq)?.expect("query has positives and negatives"))).unwrap();
            assert!(r.max_rel_error <= 1e-4, "case {i} {kind:?}: {r:?}");
            assert_eq!(r.checked, m.params().scalar_count());
        }
    }
}

#[test]
fn block_gradients() {
    for (i, case) in random_cases().iter().enumerate() {
        let mut rng = rng_for(i as u64, "blocks");
        let m = GroundingModel::new(&case.cfg, GroundingKind::ScdmPlus, case.video_dim, Vocabulary::build(["a b c"]), 3).unwrap();
        let h = case.cfg.hidden;
        let video = Tensor::normal(case.cfg.max_video_segments, case.video_dim, 1.0, &mut rng);
        let cells = Tensor::normal(case.cfg.pyramid_sizes[0], h, 1.0, &mut rng);
        let proj = Tensor::normal(h, 1, 1.0, &mut rng);
        let tokens = [1, 3, 2];
        let fusion = gradient_check(m.params(), 1e-5, 1e-4, |g| {
            let s = m.sentence(g, &tokens);
            let s_bar = g.mean_rows(s);
            let v = g.input(video.clone());
            let f = m.fuse_graph(g, v, s_bar);
            let p = g.input(proj.clone());
            let y = g.matmul(f, p);
            let y = g.tanh(y);
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(fusion.max_rel_error <= 1e-4, "fusion {i}: {fusion:?}");
        for level in 0..case.cfg.pyramid_sizes.len() {
            let cells = Tensor::normal(case.cfg.pyramid_sizes[level], h, 1.0, &mut rng);
            let r = gradient_check(m.params(), 1e-5, 1e-4, |g| {
                let s = m.sentence(g, &tokens);
                let a = g.input(cells.clone());
                let (c, _) = m.attend_graph(g, s, a);
                let mm = m.modulate_graph(g, level, a, c);
                let p = g.input(proj.clone());
                let y = g.matmul(mm, p);
                let y = g.tanh(y);
                Ok(g.sum(y))
            })
            .unwrap();
            assert!(r.max_rel_error <= 1e-4, "attention/modulation {i} level {level}: {r:?}");
        }
        let att = gradient_check(m.params(), 1e-5, 1e-4, |g| {
            let s = m.sentence(g, &tokens);
            let a = g.input(cells.clone());
            let (_, alpha) = m.attend_graph(g, s, a);
            let y = g.square(alpha);
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(att.max_rel_error <= 1e-4, "attention weights {i}: {att:?}");
    }
}

#[test]
fn scdm_equals_scdm_plus_without_face_term() {
    let world = gen_world(&WorldConfig { n_videos: 6, ..Default::default() }, 10.0).unwrap();
    let videos = VideoSet::from_store(&world.videos, &world.annotations).unwrap();
    let mut queries = grounding_queries(&world.annotations);
    for q in &mut queries {
        q.areas = [1.0; FACIAL_REGION_COUNT];
    }
    let vocab = Vocabulary::build(queries.iter().map(|q| q.caption.as_str()));
    let mut cfg = narrow(64, vec![32, 16, 8]);
    cfg.loss_weights.face = 0.0;
    cfg.train = TrainConfig {
        epochs: 2,
        batch_size: 8,
        ..Default::default()
    };
    let mut plain = GroundingModel::new(&cfg, GroundingKind::Scdm, world.config.video_dim, vocab.clone(), 5).unwrap();
    let mut plus = GroundingModel::new(&cfg, GroundingKind::ScdmPlus, world.config.video_dim, vocab, 5).unwrap();
    let shared = |a: &GroundingModel, b: &GroundingModel| {
        for (_, name, t) in a.params().iter() {
            let other = b.params().get(b.params().id(name).unwrap());
            assert_eq!(t, other, "{name}");
        }
    };
    shared(&plain, &plus);
    let la = train_grounding(&mut plain, &queries, &videos, Execution::Sequential).unwrap();
    let lb = train_grounding(&mut plus, &queries, &videos, Execution::Sequential).unwrap();
    shared(&plain, &plus);
    for (a, b) in la.iter().zip(&lb) {
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    }
    assert_eq!(plus.params().len(), plain.params().len() + 2);
}

#[test]
fn oracle_head_returns_its_anchor() {
    let cfg = narrow(8, vec![4, 2]);
    let mut m = GroundingModel::new(&cfg, GroundingKind::Scdm, 2, Vocabulary::build(["a"]), 0).unwrap();
    m.zero_heads();
    let all = anchors(&cfg, 8, 80.0);
    let p = m.predict(&Tensor::zeros(8, 2), "a", 80.0).unwrap();
    assert_eq!(p.len(), all.len());
    assert_eq!(p[0].span, TemporalSpan::new(0.0, 20.0).unwrap());
    let d = decode(&all[3].span, 0.0, 0.0, 80.0);
    assert_eq!(d, TemporalSpan::new(15.0, 45.0).unwrap());
}

#[test]
fn oracle_localizer_closes_step_order() {
    let world = gen_world(&WorldConfig { n_videos: 10, ..Default::default() }, 10.0).unwrap();
    let oracle = OracleLocalizer::from_annotations(&world.annotations);
    let queries = grounding_queries(&world.annotations);
    let e = evaluate_grounding(&oracle, &queries, &[1], &[0.5, 0.7], Execution::Parallel).unwrap();
    assert!(e.recall.values().all(|&r| r == 1.0), "{e:?}");
    assert_eq!(e.mean_iou, 1.0);
}
