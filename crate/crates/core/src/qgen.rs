//! Builds multi-choice ordering questions from annotations.
//!
//! Each question draws five distinct steps from one video, presents the
//! corresponding items in shuffled order and offers four candidate
//! orderings: the one that restores chronology plus three random shuffles.
//! Generation is a pure function of the inputs and the seed; each video uses
//! its own sub-seeded stream, so videos can be processed in parallel.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::io::{step_end_image, Choices};
use crate::model::{
    OrderingQuestion, Permutation5, Task, VideoAnnotation, CANDIDATES_PER_QUESTION, ITEMS_PER_QUESTION,
};
use crate::rng::{rng_for, Rng};

/// Default question counts per split and task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionCounts {
    pub image_validation: usize,
    pub image_test: usize,
    pub step_validation: usize,
    pub step_test: usize,
}

impl Default for QuestionCounts {
    fn default() -> Self {
        QuestionCounts {
            image_validation: 1200,
            image_test: 1500,
            step_validation: 1800,
            step_test: 3200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuestionConfig {
    /// Frame rate used to derive step-end image ids.
    pub fps: f64,
    /// Maximum questions drawn from one video; `None` means
    /// `ceil(n_questions / n_eligible_videos)`.
    pub per_video_cap: Option<usize>,
    /// Minimum difference between the indices of consecutive selected steps.
    pub min_step_spacing: u32,
    pub counts: QuestionCounts,
}

impl Default for QuestionConfig {
    fn default() -> Self {
        QuestionConfig {
            fps: 10.0,
            per_video_cap: None,
            min_step_spacing: 1,
            counts: QuestionCounts::default(),
        }
    }
}

/// Videos need strictly more than four steps.
pub const MIN_STEPS: usize = ITEMS_PER_QUESTION;

const MAX_SUBSET_ATTEMPTS: usize = 1000;

/// Chronologically ordered (step index, item) pairs of a video that can be
/// used as question items: steps whose item string is unique in the video.
fn usable_items(video: &VideoAnnotation, task: Task, fps: f64) -> Result<Vec<(u32, String)>> {
    let mut items = Vec::with_capacity(video.steps.len());
    for s in &video.steps {
        let item = match task {
            Task::ImageOrdering => step_end_image(video, s.index, fps)?,
            Task::StepOrdering => s.caption.clone(),
        };
        items.push((s.index, item));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for (_, it) in &items {
        *counts.entry(it.as_str()).or_default() += 1;
    }
    let unique: Vec<bool> = items.iter().map(|(_, it)| counts[it.as_str()] == 1).collect();
    Ok(items
        .into_iter()
        .zip(unique)
        .filter_map(|(it, u)| u.then_some(it))
        .collect())
}

fn random_permutation(rng: &mut Rng) -> Permutation5 {
    let mut o = [0u8, 1, 2, 3, 4];
    o.shuffle(rng);
    Permutation5::new(o).expect("shuffle of identity")
}

fn choose_steps(rng: &mut Rng, n_items: usize, min_spacing: u32, step_ids: &[u32]) -> Option<Vec<usize>> {
    for _ in 0..MAX_SUBSET_ATTEMPTS {
        let mut pick = rand::seq::index::sample(rng, n_items, ITEMS_PER_QUESTION).into_vec();
        pick.sort_unstable();
        if pick.windows(2).all(|w| step_ids[w[1]] - step_ids[w[0]] >= min_spacing) {
            return Some(pick);
        }
    }
    None
}

fn build_question(
    rng: &mut Rng,
    task: Task,
    video: &VideoAnnotation,
    usable: &[(u32, String)],
    qid: String,
    cfg: &QuestionConfig,
) -> Result<OrderingQuestion> {
    let step_ids: Vec<u32> = usable.iter().map(|(s, _)| *s).collect();
    let pick = choose_steps(rng, usable.len(), cfg.min_step_spacing, &step_ids).ok_or_else(|| {
        Error::Generation(format!(
            "video {}: no 5-step subset satisfies spacing {}",
            video.video_id, cfg.min_step_spacing
        ))
    })?;
    let chrono: Vec<&(u32, String)> = pick.iter().map(|&i| &usable[i]).collect();

    // presented[i] = chrono[shuffle[i]]
    let shuffle = random_permutation(rng);
    let items: Vec<String> = shuffle.order().iter().map(|&c| chrono[c as usize].1.clone()).collect();
    let mut positive = [0u8; ITEMS_PER_QUESTION];
    for (presented, &c) in shuffle.order().iter().enumerate() {
        positive[c as usize] = presented as u8;
    }
    let positive = Permutation5::new(positive)?;

    let mut all = vec![positive];
    while all.len() < CANDIDATES_PER_QUESTION {
        let p = random_permutation(rng);
        if !all.contains(&p) {
            all.push(p);
        }
    }
    all.shuffle(rng);
    let answer = all.iter().position(|p| *p == positive).unwrap() as u8;
    let candidates: [Permutation5; CANDIDATES_PER_QUESTION] = all.try_into().unwrap();

    let captions = match task {
        Task::ImageOrdering => Some(
            chrono
                .iter()
                .map(|(s, _)| video.step(*s).expect("usable steps exist").caption.clone())
                .collect(),
        ),
        Task::StepOrdering => None,
    };
    let q = OrderingQuestion {
        question_id: qid,
        task,
        video_id: video.video_id.clone(),
        items,
        captions,
        candidates,
        answer: Some(answer),
    };
    q.validate()?;
    Ok(q)
}

fn generate(
    task: Task,
    annotations: &[VideoAnnotation],
    n_questions: usize,
    seed: u64,
    excluded: &BTreeSet<String>,
    cfg: &QuestionConfig,
    mode: Execution,
) -> Result<Vec<OrderingQuestion>> {
    let mut eligible = Vec::new();
    for v in annotations {
        if excluded.contains(&v.video_id) || v.steps.len() < MIN_STEPS {
            continue;
        }
        let usable = usable_items(v, task, cfg.fps)?;
        if usable.len() >= MIN_STEPS {
            eligible.push((v, usable));
        }
    }
    if eligible.is_empty() {
        return Err(Error::Generation(format!(
            "no video with at least {MIN_STEPS} usable steps for {}",
            task.as_str()
        )));
    }
    if n_questions == 0 {
        return Ok(Vec::new());
    }
    let cap = cfg
        .per_video_cap
        .unwrap_or_else(|| n_questions.div_ceil(eligible.len()));
    if cap == 0 || cap.saturating_mul(eligible.len()) < n_questions {
        return Err(Error::Generation(format!(
            "{n_questions} questions requested but {} videos with cap {cap} allow at most {}",
            eligible.len(),
            cap.saturating_mul(eligible.len())
        )));
    }

    // Round-robin allocation over a seeded video order.
    let mut order: Vec<usize> = (0..eligible.len()).collect();
    order.shuffle(&mut rng_for(seed, task.as_str()));
    let mut per_video = vec![0usize; eligible.len()];
    for q in 0..n_questions {
        per_video[order[q % order.len()]] += 1;
    }

    let prefix = match task {
        Task::ImageOrdering => "img",
        Task::StepOrdering => "step",
    };
    let jobs: Vec<usize> = order.iter().copied().filter(|&i| per_video[i] > 0).collect();
    let batches = exec::try_map(mode, &jobs, |&i| {
        let (video, usable) = &eligible[i];
        let mut rng = rng_for(seed, &format!("{}/{}", task.as_str(), video.video_id));
        (0..per_video[i])
            .map(|j| {
                let qid = format!("{prefix}-{}-{j:03}", video.video_id);
                build_question(&mut rng, task, video, usable, qid, cfg)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(batches.into_iter().flatten().collect())
}

/// Facial image ordering questions.
pub fn gen_image_ordering(
    annotations: &[VideoAnnotation],
    n_questions: usize,
    seed: u64,
    cfg: &QuestionConfig,
) -> Result<Vec<OrderingQuestion>> {
    generate(
        Task::ImageOrdering,
        annotations,
        n_questions,
        seed,
        &BTreeSet::new(),
        cfg,
        Execution::default(),
    )
}

/// Step ordering questions, never drawing from `excluded_video_ids`.
pub fn gen_step_ordering(
    annotations: &[VideoAnnotation],
    n_questions: usize,
    seed: u64,
    excluded_video_ids: &BTreeSet<String>,
    cfg: &QuestionConfig,
) -> Result<Vec<OrderingQuestion>> {
    generate(
        Task::StepOrdering,
        annotations,
        n_questions,
        seed,
        excluded_video_ids,
        cfg,
        Execution::default(),
    )
}

/// Either task, with an explicit execution mode.
pub fn gen_questions(
    task: Task,
    annotations: &[VideoAnnotation],
    n_questions: usize,
    seed: u64,
    excluded_video_ids: &BTreeSet<String>,
    cfg: &QuestionConfig,
    mode: Execution,
) -> Result<Vec<OrderingQuestion>> {
    generate(task, annotations, n_questions, seed, excluded_video_ids, cfg, mode)
}

pub fn answer_key(questions: &[OrderingQuestion]) -> Result<Choices> {
    let mut key = BTreeMap::new();
    for q in questions {
        let a = q
            .answer
            .ok_or_else(|| Error::InvalidArgument(format!("question {} has no answer", q.question_id)))?;
        if key.insert(q.question_id.clone(), a).is_some() {
            return Err(Error::DuplicateQuestion(q.question_id.clone()));
        }
    }
    Ok(key)
}

/// Maps each presented item of `q` back to its step index using the
/// annotation.
pub fn item_steps(q: &OrderingQuestion, video: &VideoAnnotation, fps: f64) -> Result<Vec<u32>> {
    let lookup: HashMap<String, u32> = usable_items(video, q.task, fps)?
        .into_iter()
        .map(|(s, it)| (it, s))
        .collect();
    q.items
        .iter()
        .map(|it| lookup.get(it).copied().ok_or_else(|| Error::UnknownItem(it.clone())))
        .collect()
}

/// Candidate indices whose ordering yields strictly increasing step indices.
/// A well-formed question has exactly one.
pub fn chronological_candidates(q: &OrderingQuestion, video: &VideoAnnotation, fps: f64) -> Result<Vec<usize>> {
    let steps = item_steps(q, video, fps)?;
    Ok(q.candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.apply(&steps).windows(2).all(|w| w[0] < w[1]))
        .map(|(i, _)| i)
        .collect())
}

/// Uniformly random choices, for chance-level baselines.
pub fn random_choices(questions: &[OrderingQuestion], seed: u64) -> Choices {
    let mut rng = rng_for(seed, "random-choices");
    questions
        .iter()
        .map(|q| (q.question_id.clone(), rng.random_range(0..CANDIDATES_PER_QUESTION as u8)))
        .collect()
}
