use std::collections::BTreeSet;

use ordervqa::compose::{greedy_sort, select_answers_greedy, GreedyConfig};
use ordervqa::exec::Execution;
use ordervqa::grounding::select_answers_localize;
use ordervqa::metrics::multi_choice_accuracy;
use ordervqa::model::{OrderingQuestion, Permutation5, Task};
use ordervqa::pairwise::*;
use ordervqa::qgen::{answer_key, gen_questions, random_choices, QuestionConfig};
use ordervqa::synth::{gen_world, World, WorldConfig};

const FPS: f64 = 10.0;

fn world(n: usize, seed: u64) -> World {
    gen_world(&WorldConfig { n_videos: n, seed, ..Default::default() }, FPS).unwrap()
}

fn questions(w: &World, task: Task, n: usize, seed: u64) -> Vec<OrderingQuestion> {
    gen_questions(task, &w.annotations, n, seed, &BTreeSet::new(), &QuestionConfig::default(), Execution::Parallel).unwrap()
}

#[test]
fn oracles_answer_everything() {
    let w = world(60, 1);
    let o = w.oracles(FPS).unwrap();
    let img = questions(&w, Task::ImageOrdering, 200, 2);
    let step = questions(&w, Task::StepOrdering, 200, 3);
    for qs in [&img, &step] {
        let key = answer_key(qs).unwrap();
        let p = select_answers_pairwise(&o.comparator, qs, Execution::Parallel).unwrap();
        assert_eq!(multi_choice_accuracy(&p, &key).unwrap(), 1.0);
    }
    let g = select_answers_greedy(&o.comparator, &o.composer, &img, &GreedyConfig::default(), Execution::Parallel).unwrap();
    assert_eq!(multi_choice_accuracy(&g, &answer_key(&img).unwrap()).unwrap(), 1.0);
    let l = select_answers_localize(&o.localizer, &step, Execution::Parallel).unwrap();
    assert_eq!(multi_choice_accuracy(&l, &answer_key(&step).unwrap()).unwrap(), 1.0);
}

fn brute_force(scorer: &dyn PairwiseScorer, q: &OrderingQuestion) -> Permutation5 {
    let m = scorer.probability_matrix(&q.video_id, &q.items).unwrap();
    let mut best: Option<(f64, Permutation5)> = None;
    for p in Permutation5::all() {
        let s = candidate_score_from_matrix(&m, &p);
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, p));
        }
    }
    best.unwrap().1
}

#[test]
fn greedy_matches_brute_force_with_oracles() {
    let w = world(50, 4);
    let o = w.oracles(FPS).unwrap();
    let qs = questions(&w, Task::ImageOrdering, 100, 5);
    assert_eq!(Permutation5::all().len(), 120);
    for q in &qs {
        let captions = q.captions.as_ref().unwrap();
        assert_eq!((q.items.len(), captions.len()), (5, 5));
        let order = greedy_sort(&q.video_id, &q.items, captions, &o.comparator, &o.composer, &GreedyConfig::default()).unwrap();
        let order: Vec<u8> = order.iter().map(|&i| i as u8).collect();
        let bf = brute_force(&o.comparator, q);
        assert_eq!(order.as_slice(), bf.order(), "{}", q.question_id);
        assert_eq!(bf, q.candidates[q.answer.unwrap() as usize]);
    }
}

#[test]
fn random_choices_score_a_quarter() {
    let w = world(200, 6);
    let qs = questions(&w, Task::StepOrdering, 1600, 7);
    let acc = multi_choice_accuracy(&random_choices(&qs, 8), &answer_key(&qs).unwrap()).unwrap();
    assert!((acc - 0.25).abs() <= 0.03, "{acc}");
}

#[test]
fn untrained_symmetric_comparator_scores_half() {
    let w = world(40, 9);
    let pairs = build_pair_dataset(&w.annotations, PairItems::Images, Some(&w.images), 1, FPS).unwrap();
    let cfg = ComparatorConfig {
        zero_init_output: true,
        ..Default::default()
    };
    let m = PairwiseComparator::new(&cfg, ComparatorInput::Image { dim: 64 }, 3).unwrap();
    let r = evaluate_pairs(&m.bind(Some(&w.images)), &pairs, Execution::Parallel).unwrap();
    let acc = pair_accuracy(&r).unwrap();
    assert!((acc - 0.5).abs() <= 0.03, "{acc}");
    assert_eq!(pairs.iter().filter(|p| p.label == 1).count() * 2, pairs.len());
}

/// Features of later steps project further along the mean later-minus-earlier
/// difference, so a single direction separates most pairs.
#[test]
fn direction_classifier_separates_pairs() {
    let w = world(150, 10);
    let (train, test) = w.annotations.split_at(120);
    let vec_of = |id: &str| w.images.require(id).unwrap().to_f64();
    let train_pairs = build_pair_dataset(train, PairItems::Images, Some(&w.images), 1, FPS).unwrap();
    let mut dir = vec![0.0; w.images.dimension()];
    for p in &train_pairs {
        let (a, b) = (vec_of(&p.item_a), vec_of(&p.item_b));
        let sign = if p.label == 1 { 1.0 } else { -1.0 };
        for (d, (x, y)) in dir.iter_mut().zip(a.iter().zip(&b)) {
            *d += sign * (y - x);
        }
    }
    let test_pairs = build_pair_dataset(test, PairItems::Images, Some(&w.images), 2, FPS).unwrap();
    let correct = test_pairs
        .iter()
        .filter(|p| {
            let (a, b) = (vec_of(&p.item_a), vec_of(&p.item_b));
            let s: f64 = dir.iter().zip(a.iter().zip(&b)).map(|(d, (x, y))| d * (y - x)).sum();
            (s > 0.0) == (p.label == 1)
        })
        .count();
    let acc = correct as f64 / test_pairs.len() as f64;
    assert!(acc >= 0.99, "{acc}");
}

#[test]
fn curriculum_pools_grow_from_large_gaps() {
    let w = world(30, 11);
    let pairs = build_pair_dataset(&w.annotations, PairItems::Captions, None, 1, FPS).unwrap();
    let pools = curriculum_schedule(&pairs, 3);
    assert_eq!(pools.len(), 3);
    assert_eq!(pools[2].len(), pairs.len());
    assert!(pools[0].len() < pools[1].len());
    let min0 = pools[0].iter().map(|p| p.step_gap).min().unwrap();
    let max_rest = pairs.iter().filter(|p| !pools[0].contains(p)).map(|p| p.step_gap).max().unwrap();
    assert!(min0 > max_rest);
}
