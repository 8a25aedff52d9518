use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde_json::json;

use ordervqa::checkpoint::Checkpoint;
use ordervqa::compose::{
    build_triplet_set, select_answers_greedy, train_composition, CompositionModel, CompositionScorer,
};
use ordervqa::config::Config;
use ordervqa::exec::Execution;
use ordervqa::grounding::{
    grounding_queries, select_answers_localize, train_grounding, GroundingKind,
    GroundingModel, Localizer, VideoSet,
};
use ordervqa::io::{
    plan_video, questions_from_str, read_annotations, read_choices, read_features, read_questions,
    write_annotations, write_choices, write_features, write_questions, Choices, FeatureStore, Localization,
};
use ordervqa::metrics::{multi_choice_accuracy, EvalReport};
use ordervqa::model::{OrderingQuestion, Task, VideoAnnotation};
use ordervqa::nn::Vocabulary;
use ordervqa::pairwise::{
    build_pair_dataset, gap_bucket, gap_bucket_label, select_answers_pairwise, train_pairwise, ComparatorInput,
    PairItems, PairwiseComparator, PairwiseScorer,
};
use ordervqa::qgen::{answer_key, gen_questions, item_steps, random_choices};
use ordervqa::synth::gen_world;
use ordervqa::train::{EpochLog, TrainConfig};
use ordervqa::{Error, Result};

use crate::{ModelArg, StrategyArg, TaskArg, TrainOverrides};

const ANNOTATIONS: &str = "annotations.json";
const IMAGE_FEATURES: &str = "image_features.ovqf";
const VIDEO_FEATURES: &str = "video_features.ovqf";

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s
}

fn annotations(path: &Path) -> Result<Vec<VideoAnnotation>> {
    let set = read_annotations(path, false)?;
    for (video, v) in &set.violations {
        log::warn!("{video}: {v:?}");
    }
    Ok(set.videos)
}

/// Video ids named by a questions file or by a plain list, one per line.
fn excluded_ids(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    if text.trim_start().starts_with('{') {
        let (_, qs) = questions_from_str(&text)?;
        return Ok(qs.into_iter().map(|q| q.video_id).collect());
    }
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

pub fn gensynth(config: Option<&Path>, out: &Path, seed: Option<u64>, n_videos: Option<usize>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.world.seed = s;
    }
    if let Some(n) = n_videos {
        cfg.world.n_videos = n;
    }
    let world = gen_world(&cfg.world, cfg.fps())?;
    write_annotations(&out.join(ANNOTATIONS), &world.annotations)?;
    write_features(&out.join(IMAGE_FEATURES), &world.images)?;
    write_features(&out.join(VIDEO_FEATURES), &world.videos)?;
    write_text(
        &out.join("world.json"),
        &pretty(&json!({"world": world.config, "fps": cfg.fps()})),
    )?;
    log::info!(
        "wrote {} videos, {} images, {} segments to {}",
        world.annotations.len(),
        world.images.len(),
        world.videos.len(),
        out.display()
    );
    Ok(())
}

pub struct GenqArgs<'a> {
    pub task: TaskArg,
    pub annotations: &'a Path,
    pub n: usize,
    pub seed: Option<u64>,
    pub exclude: Option<&'a Path>,
    pub out: &'a Path,
    pub strip_answers: bool,
    pub key_out: Option<&'a Path>,
    pub config: Option<&'a Path>,
}

fn task_of(t: TaskArg) -> Task {
    match t {
        TaskArg::ImageOrdering => Task::ImageOrdering,
        TaskArg::StepOrdering => Task::StepOrdering,
    }
}

pub fn genq(a: GenqArgs) -> Result<()> {
    let cfg = load_config(a.config)?;
    let videos = annotations(a.annotations)?;
    let excluded = match a.exclude {
        Some(p) => excluded_ids(p)?,
        None => BTreeSet::new(),
    };
    let task = task_of(a.task);
    let seed = a.seed.unwrap_or(cfg.seed);
    let qs = gen_questions(task, &videos, a.n, seed, &excluded, &cfg.questions, Execution::default())?;
    if let Some(k) = a.key_out {
        write_choices(k, &answer_key(&qs)?)?;
    }
    let qs: Vec<OrderingQuestion> = if a.strip_answers {
        qs.iter().map(OrderingQuestion::without_answer).collect()
    } else {
        qs
    };
    write_questions(a.out, task, &qs)
}

pub fn plan_frames(annotations_path: &Path, fps: f64, out: &Path) -> Result<()> {
    let videos = annotations(annotations_path)?;
    let mut plans = Vec::new();
    for v in &videos {
        plans.extend(plan_video(v, fps)?);
    }
    let n_dup = plans.iter().filter(|p| p.duplicate_warning).count();
    if n_dup > 0 {
        log::warn!("{n_dup} clip(s) are too short for distinct frames");
    }
    write_text(out, &pretty(&json!({"fps": fps, "plans": plans})))
}

fn apply_overrides(t: &mut TrainConfig, o: &TrainOverrides, seed: Option<u64>) {
    if let Some(e) = o.epochs {
        t.epochs = e;
    }
    if let Some(b) = o.batch_size {
        t.batch_size = b;
    }
    if let Some(lr) = o.lr {
        t.optimizer.learning_rate = lr;
    }
    if let Some(s) = seed {
        t.seed = s;
    }
}

fn summarize(model: &str, log: &[EpochLog]) {
    if let Some(last) = log.last() {
        log::info!("{model}: {} epochs, final loss {:.5}", log.len(), last.loss);
    }
}

pub fn train(
    model: ModelArg,
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    exclude: Option<&Path>,
    overrides: &TrainOverrides,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let fps = cfg.fps();
    let mut videos = annotations(&data.join(ANNOTATIONS))?;
    if let Some(p) = exclude {
        let ex = excluded_ids(p)?;
        videos.retain(|v| !ex.contains(&v.video_id));
    }
    if videos.is_empty() {
        return Err(Error::EmptySet("training video"));
    }
    let mode = Execution::default();
    match model {
        ModelArg::PairwiseImage | ModelArg::PairwiseText => {
            let mut tc = cfg.pairwise.training.clone();
            apply_overrides(&mut tc.train, overrides, seed);
            let (items, features, input) = if model == ModelArg::PairwiseImage {
                let f = read_features(&data.join(IMAGE_FEATURES))?;
                let dim = f.dimension();
                (PairItems::Images, Some(f), ComparatorInput::Image { dim })
            } else {
                let vocab = Vocabulary::build(videos.iter().flat_map(|v| v.steps.iter().map(|s| s.caption.as_str())));
                (PairItems::Captions, None, ComparatorInput::Text { vocab })
            };
            let pairs = build_pair_dataset(&videos, items, features.as_ref(), cfg.seed, fps)?;
            let mut m = PairwiseComparator::new(&cfg.pairwise.comparator, input, cfg.seed)?;
            let log = train_pairwise(&mut m, &pairs, &[], features.as_ref(), &tc, mode)?;
            summarize(m.model_name(), &log);
            m.save(out, &log)
        }
        ModelArg::Composition => {
            let mut tc = cfg.composition.training.clone();
            apply_overrides(&mut tc.train, overrides, seed);
            let features = read_features(&data.join(IMAGE_FEATURES))?;
            let triplets = build_triplet_set(&videos, tc.n_parts, tc.splits_per_video, cfg.seed, fps)?;
            let vocab = Vocabulary::build(triplets.iter().flat_map(|t| t.captions.iter().map(String::as_str)));
            let mut m = CompositionModel::new(&cfg.composition.model, features.dimension(), vocab, cfg.seed)?;
            let log = train_composition(&mut m, &triplets, &features, &tc.train, mode)?;
            summarize("composition", &log);
            m.save(out, &log)
        }
        ModelArg::Scdm | ModelArg::Scdmplus => {
            let mut gc = cfg.grounding.clone();
            apply_overrides(&mut gc.train, overrides, seed);
            let store = read_features(&data.join(VIDEO_FEATURES))?;
            let vs = VideoSet::from_store(&store, &videos)?;
            let queries = grounding_queries(&videos);
            let vocab = Vocabulary::build(queries.iter().map(|q| q.caption.as_str()));
            let kind = if model == ModelArg::Scdm {
                GroundingKind::Scdm
            } else {
                GroundingKind::ScdmPlus
            };
            let mut m = GroundingModel::new(&gc, kind, store.dimension(), vocab, cfg.seed)?;
            let log = train_grounding(&mut m, &queries, &vs, mode)?;
            summarize(kind.model_name(), &log);
            m.save(out, &log)
        }
        ModelArg::Oracle | ModelArg::Random => Err(Error::InvalidArgument(format!(
            "`{}` has no parameters to train",
            if model == ModelArg::Oracle { "oracle" } else { "random" }
        ))),
    }
}

pub struct PredictArgs<'a> {
    pub model: ModelArg,
    pub ckpt: Option<&'a Path>,
    pub pairwise_ckpt: Option<&'a Path>,
    pub questions: &'a Path,
    pub features: Option<&'a Path>,
    pub data: Option<&'a Path>,
    pub strategy: StrategyArg,
    pub out: &'a Path,
    pub localizations_out: Option<&'a Path>,
    pub config: Option<&'a Path>,
    pub seed: Option<u64>,
}

impl PredictArgs<'_> {
    fn data_file(&self, name: &str, what: &str) -> Result<PathBuf> {
        self.data
            .map(|d| d.join(name))
            .ok_or_else(|| Error::InvalidArgument(format!("{what} needs --data DIR")))
    }

    /// `--features` if given, else the named file of `--data`.
    fn features(&self, name: &str) -> Result<FeatureStore> {
        match self.features {
            Some(p) => read_features(p),
            None => read_features(&self.data_file(name, "locating features")?),
        }
    }

    fn annotations(&self, what: &str) -> Result<Vec<VideoAnnotation>> {
        annotations(&self.data_file(ANNOTATIONS, what)?)
    }

    fn ckpt(&self) -> Result<&Path> {
        self.ckpt
            .ok_or_else(|| Error::InvalidArgument("this model needs --ckpt".into()))
    }
}

fn unsupported(model: ModelArg, strategy: StrategyArg) -> Error {
    Error::InvalidArgument(format!("model {model:?} cannot be used with strategy {strategy:?}"))
}

fn expect_task(task: Task, want: Task, strategy: StrategyArg) -> Result<()> {
    if task != want {
        return Err(Error::InvalidArgument(format!(
            "strategy {strategy:?} answers {} questions, got {}",
            want.as_str(),
            task.as_str()
        )));
    }
    Ok(())
}

fn write_localizations(path: &Path, localizer: &dyn Localizer, questions: &[OrderingQuestion]) -> Result<()> {
    let mut out = BTreeMap::new();
    for q in questions {
        for (i, caption) in q.items.iter().enumerate() {
            if let Some(s) = localizer.localize(&q.video_id, caption, 1)?.first() {
                out.insert(
                    format!("{}/{i}", q.question_id),
                    Localization {
                        start_s: s.span.start_s,
                        end_s: s.span.end_s,
                        score: s.score,
                    },
                );
            }
        }
    }
    write_text(path, &ordervqa::io::localizations_to_string(&out))
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let cfg = load_config(a.config)?;
    let fps = cfg.fps();
    let (task, questions) = read_questions(a.questions)?;
    let mode = Execution::default();
    let choices: Choices = match (a.strategy, a.model) {
        (_, ModelArg::Random) => random_choices(&questions, a.seed.unwrap_or(cfg.seed)),
        (StrategyArg::Pairwise, ModelArg::Oracle) => {
            let oracle = ordervqa::pairwise::OracleComparator::from_annotations(&a.annotations("the oracle")?, fps)?;
            select_answers_pairwise(&oracle, &questions, mode)?
        }
        (StrategyArg::Pairwise, ModelArg::PairwiseImage | ModelArg::PairwiseText) => {
            let m = PairwiseComparator::load(a.ckpt()?)?;
            let want = if a.model == ModelArg::PairwiseImage { "pairwise_image" } else { "pairwise_text" };
            if m.model_name() != want {
                return Err(Error::Checkpoint(format!("expected a {want} checkpoint, found {}", m.model_name())));
            }
            let features = match a.model {
                ModelArg::PairwiseImage => Some(a.features(IMAGE_FEATURES)?),
                _ => None,
            };
            let scorer = m.bind(features.as_ref());
            select_answers_pairwise(&scorer, &questions, mode)?
        }
        (StrategyArg::GreedyTirg, ModelArg::Oracle) => {
            expect_task(task, Task::ImageOrdering, a.strategy)?;
            let videos = a.annotations("the oracle")?;
            let f_img = ordervqa::pairwise::OracleComparator::from_annotations(&videos, fps)?;
            let f_tirg = ordervqa::compose::CompositionOracle::from_annotations(&videos, fps)?;
            select_answers_greedy(&f_img, &f_tirg, &questions, &cfg.composition.greedy, mode)?
        }
        (StrategyArg::GreedyTirg, ModelArg::Composition) => {
            expect_task(task, Task::ImageOrdering, a.strategy)?;
            let features = a.features(IMAGE_FEATURES)?;
            let comp = CompositionModel::load(a.ckpt()?)?;
            let pair_path = a
                .pairwise_ckpt
                .ok_or_else(|| Error::InvalidArgument("greedy_tirg needs --pairwise-ckpt".into()))?;
            let pair = PairwiseComparator::load(pair_path)?;
            let f_img: &dyn PairwiseScorer = &pair.bind(Some(&features));
            let f_tirg: &dyn CompositionScorer = &comp.bind(&features);
            select_answers_greedy(f_img, f_tirg, &questions, &cfg.composition.greedy, mode)?
        }
        (StrategyArg::LocalizeCenter, ModelArg::Oracle) => {
            expect_task(task, Task::StepOrdering, a.strategy)?;
            let loc = ordervqa::grounding::OracleLocalizer::from_annotations(&a.annotations("the oracle")?);
            if let Some(p) = a.localizations_out {
                write_localizations(p, &loc, &questions)?;
            }
            select_answers_localize(&loc, &questions, mode)?
        }
        (StrategyArg::LocalizeCenter, ModelArg::Scdm | ModelArg::Scdmplus) => {
            expect_task(task, Task::StepOrdering, a.strategy)?;
            let ck = Checkpoint::load(a.ckpt()?)?;
            ck.expect_model(if a.model == ModelArg::Scdm { "scdm" } else { "scdmplus" })?;
            let m = GroundingModel::from_checkpoint(&ck)?;
            let store = a.features(VIDEO_FEATURES)?;
            let vs = VideoSet::from_store(&store, &a.annotations("video durations")?)?;
            let loc = m.bind(&vs);
            if let Some(p) = a.localizations_out {
                write_localizations(p, &loc, &questions)?;
            }
            select_answers_localize(&loc, &questions, mode)?
        }
        (s, m) => return Err(unsupported(m, s)),
    };
    write_choices(a.out, &choices)
}

/// Accuracy per bucket of the smallest step gap between a question's items.
fn per_gap_accuracy(
    predictions: &Choices,
    key: &Choices,
    questions: &[OrderingQuestion],
    videos: &[VideoAnnotation],
    fps: f64,
) -> Result<BTreeMap<String, f64>> {
    let by_id: BTreeMap<&str, &VideoAnnotation> = videos.iter().map(|v| (v.video_id.as_str(), v)).collect();
    let mut counts: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for q in questions {
        let Some(answer) = key.get(&q.question_id) else { continue };
        let video = by_id
            .get(q.video_id.as_str())
            .ok_or_else(|| Error::UnknownItem(q.video_id.clone()))?;
        let mut steps = item_steps(q, video, fps)?;
        steps.sort_unstable();
        let gap = steps.windows(2).map(|w| w[1] - w[0]).min().unwrap_or(0);
        let e = counts.entry(gap_bucket(gap)).or_default();
        e.0 += usize::from(predictions.get(&q.question_id) == Some(answer));
        e.1 += 1;
    }
    Ok(counts
        .into_iter()
        .map(|(g, (c, n))| (gap_bucket_label(g), c as f64 / n as f64))
        .collect())
}

pub fn score(
    predictions: &Path,
    key: &Path,
    report: &Path,
    per_gap: bool,
    questions: Option<&Path>,
    annotations_path: Option<&Path>,
    fps: Option<f64>,
) -> Result<()> {
    let preds = read_choices(predictions)?;
    let key = read_choices(key)?;
    let acc = multi_choice_accuracy(&preds, &key)?;
    let qs = questions.map(read_questions).transpose()?;
    let task = qs.as_ref().map_or("multi_choice", |(t, _)| t.as_str());
    let mut r = EvalReport::new(task, key.len(), acc);
    if per_gap {
        let (Some((_, qs)), Some(ap)) = (&qs, annotations_path) else {
            return Err(Error::InvalidArgument("--per-gap needs --questions and --annotations".into()));
        };
        let videos = annotations(ap)?;
        let fps = fps.unwrap_or_else(|| Config::default().fps());
        r = r.with_per_gap(&per_gap_accuracy(&preds, &key, qs, &videos, fps)?);
    }
    write_text(report, &r.to_json())?;
    println!("{}: accuracy {:.2} over {} questions", r.task, acc * 100.0, key.len());
    Ok(())
}
