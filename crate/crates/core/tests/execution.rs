use std::collections::{BTreeMap, BTreeSet};

use ordervqa::compose::*;
use ordervqa::exec::Execution;
use ordervqa::grounding::*;
use ordervqa::model::Task;
use ordervqa::nn::Vocabulary;
use ordervqa::optim::AdamConfig;
use ordervqa::pairwise::*;
use ordervqa::qgen::{gen_questions, QuestionConfig};
use ordervqa::synth::{gen_world, WorldConfig};
use ordervqa::train::TrainConfig;

const FPS: f64 = 10.0;
const MODES: [Execution; 2] = [Execution::Sequential, Execution::Parallel];

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        optimizer: AdamConfig {
            learning_rate: 1e-3,
            ..Default::default()
        },
        seed: 3,
    }
}

#[test]
fn question_generation_ignores_mode() {
    let w = gen_world(&WorldConfig { n_videos: 30, ..Default::default() }, FPS).unwrap();
    let out: Vec<_> = MODES
        .iter()
        .map(|&m| gen_questions(Task::ImageOrdering, &w.annotations, 80, 4, &BTreeSet::new(), &QuestionConfig::default(), m).unwrap())
        .collect();
    assert_eq!(out[0], out[1]);
}

#[test]
fn pairwise_training_ignores_mode() {
    let w = gen_world(&WorldConfig { n_videos: 12, ..Default::default() }, FPS).unwrap();
    let pairs = build_pair_dataset(&w.annotations, PairItems::Images, Some(&w.images), 1, FPS).unwrap();
    let cfg = PairwiseTrainConfig {
        train: train_cfg(2),
        curriculum_phases: 2,
    };
    let trained: Vec<_> = MODES
        .iter()
        .map(|&mode| {
            let mut m = PairwiseComparator::new(&ComparatorConfig::default(), ComparatorInput::Image { dim: 64 }, 0).unwrap();
            let log = train_pairwise(&mut m, &pairs, &pairs, Some(&w.images), &cfg, mode).unwrap();
            (m.params().clone(), log)
        })
        .collect();
    assert_eq!(trained[0], trained[1]);
}

#[test]
fn composition_training_ignores_mode() {
    let w = gen_world(&WorldConfig { n_videos: 10, ..Default::default() }, FPS).unwrap();
    let triplets = build_triplet_set(&w.annotations, None, 1, 2, FPS).unwrap();
    let vocab = Vocabulary::build(triplets.iter().flat_map(|t| t.captions.iter().map(String::as_str)));
    let cfg = CompositionConfig {
        text_hidden: 16,
        embed_dim: 8,
        ..Default::default()
    };
    let cands: BTreeMap<String, Vec<String>> = w
        .annotations
        .iter()
        .map(|v| (v.video_id.clone(), retrieval_candidates(v, FPS).unwrap()))
        .collect();
    let out: Vec<_> = MODES
        .iter()
        .map(|&mode| {
            let mut m = CompositionModel::new(&cfg, 64, vocab.clone(), 1).unwrap();
            let log = train_composition(&mut m, &triplets, &w.images, &train_cfg(2), mode).unwrap();
            let r = evaluate_retrieval(&m.bind(&w.images), &triplets, &cands, mode).unwrap();
            (m.params().clone(), log, r)
        })
        .collect();
    assert_eq!(out[0], out[1]);
}

#[test]
fn grounding_training_ignores_mode() {
    let w = gen_world(&WorldConfig { n_videos: 5, ..Default::default() }, FPS).unwrap();
    let videos = VideoSet::from_store(&w.videos, &w.annotations).unwrap();
    let queries = grounding_queries(&w.annotations);
    let vocab = Vocabulary::build(queries.iter().map(|q| q.caption.as_str()));
    let cfg = GroundingConfig {
        max_video_segments: 64,
        pyramid_sizes: vec![16, 8, 4],
        embed_dim: 8,
        text_hidden: 8,
        hidden: 8,
        attention_dim: 8,
        train: train_cfg(1),
        ..Default::default()
    };
    let out: Vec<_> = MODES
        .iter()
        .map(|&mode| {
            let mut m = GroundingModel::new(&cfg, GroundingKind::ScdmPlus, w.config.video_dim, vocab.clone(), 2).unwrap();
            let log = train_grounding(&mut m, &queries, &videos, mode).unwrap();
            let e = evaluate_grounding(&m.bind(&videos), &queries, &[1, 5], &[0.3, 0.5], mode).unwrap();
            (m.params().clone(), log, e)
        })
        .collect();
    assert_eq!(out[0], out[1]);
}
