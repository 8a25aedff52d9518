//! Sequential vs data-parallel execution of the three batch workloads:
//! question answering, per-sample gradients and grounding inference.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ordervqa::autograd::{Graph, ParamStore, Var};
use ordervqa::exec::Execution;
use ordervqa::grounding::{evaluate_grounding, grounding_queries, GroundingConfig, GroundingKind, GroundingModel, VideoSet};
use ordervqa::model::Task;
use ordervqa::nn::{Mlp, Vocabulary};
use ordervqa::rng::rng_for;
use ordervqa::pairwise::{build_pair_dataset, select_answers_pairwise, ComparatorConfig, ComparatorInput, PairItems, PairSample, PairwiseComparator};
use ordervqa::qgen::{gen_questions, QuestionConfig};
use ordervqa::synth::{gen_world, World, WorldConfig};
use ordervqa::tensor::Tensor;
use ordervqa::train::batch_gradients;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn world() -> World {
    gen_world(&WorldConfig { n_videos: 60, ..Default::default() }, 10.0).unwrap()
}

fn question_eval(c: &mut Criterion) {
    let w = world();
    let qs = gen_questions(Task::ImageOrdering, &w.annotations, 300, 1, &Default::default(), &QuestionConfig::default(), Execution::Sequential).unwrap();
    let m = PairwiseComparator::new(&ComparatorConfig::default(), ComparatorInput::Image { dim: 64 }, 0).unwrap();
    let scorer = m.bind(Some(&w.images));
    let mut group = c.benchmark_group("question_eval");
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| black_box(select_answers_pairwise(&scorer, &qs, mode).unwrap()))
        });
    }
    group.finish();
}

fn per_sample_gradients(c: &mut Criterion) {
    let w = world();
    let pairs = build_pair_dataset(&w.annotations, PairItems::Images, Some(&w.images), 0, 10.0).unwrap();
    let batch: Vec<&PairSample> = pairs.iter().take(256).collect();
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "classifier", &[128, 128, 64, 1], &mut rng_for(0, "bench"));
    let images = &w.images;
    let loss = |g: &mut Graph, p: &PairSample| -> ordervqa::Result<Option<Var>> {
        let a = g.input(Tensor::row_vector(images.require(&p.item_a)?.to_f64()));
        let b = g.input(Tensor::row_vector(images.require(&p.item_b)?.to_f64()));
        let x = g.concat_cols(&[a, b]);
        let z = mlp.forward(g, x);
        let l = g.bce_logits(z, Tensor::scalar(f64::from(p.label)));
        Ok(Some(g.sum(l)))
    };
    let mut group = c.benchmark_group("batch_gradients");
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| black_box(batch_gradients(&store, &batch, mode, &loss).unwrap()))
        });
    }
    group.finish();
}

fn grounding_forward(c: &mut Criterion) {
    let w = world();
    let cfg = GroundingConfig {
        max_video_segments: 64,
        pyramid_sizes: vec![32, 16, 8, 4],
        embed_dim: 32,
        text_hidden: 32,
        hidden: 64,
        attention_dim: 32,
        ..Default::default()
    };
    let vs = VideoSet::from_store(&w.videos, &w.annotations).unwrap();
    let queries = grounding_queries(&w.annotations);
    let vocab = Vocabulary::build(queries.iter().map(|q| q.caption.as_str()));
    let m = GroundingModel::new(&cfg, GroundingKind::ScdmPlus, w.config.video_dim, vocab, 0).unwrap();
    let loc = m.bind(&vs);
    let mut group = c.benchmark_group("grounding_forward");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| black_box(evaluate_grounding(&loc, &queries, &[1, 5], &[0.5], mode).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, question_eval, per_sample_gradients, grounding_forward);
criterion_main!(benches);
