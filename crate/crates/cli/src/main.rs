//! `ordervqa`: build synthetic corpora, generate ordering questions, train
//! the baselines, predict answers and score them.
//!
//! Failures print one JSON record `{"error": kind, "message": text}` to
//! stderr and exit non-zero.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "ordervqa", version, about = "Fine-grained ordering VQA toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum TaskArg {
    ImageOrdering,
    StepOrdering,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ModelArg {
    Oracle,
    Random,
    PairwiseImage,
    PairwiseText,
    Composition,
    Scdm,
    Scdmplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum StrategyArg {
    Pairwise,
    GreedyTirg,
    LocalizeCenter,
}

/// Overrides for a model's training section.
#[derive(clap::Args, Debug, Clone, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a synthetic world: annotations, image and segment features.
    Gensynth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the world seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_videos: Option<usize>,
    },
    /// Generate multi-choice ordering questions.
    Genq {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Questions file or list of video ids (one per line) to leave out.
        #[arg(long)]
        exclude: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        strip_answers: bool,
        /// Writes the answer key ({qid: index}).
        #[arg(long)]
        key_out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Frame extraction plan for every annotated step.
    PlanFrames {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        fps: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a data directory written by `gensynth` (or laid out
    /// the same way).
    Train {
        #[arg(long, value_enum)]
        model: ModelArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Questions file or list of video ids to hold out.
        #[arg(long)]
        exclude: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Answer questions with a model and strategy.
    Predict {
        #[arg(long, value_enum)]
        model: ModelArg,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Image comparator used by the greedy strategy.
        #[arg(long)]
        pairwise_ckpt: Option<PathBuf>,
        #[arg(long)]
        questions: PathBuf,
        /// Feature file; defaults to the matching file in `--data`.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        #[arg(long)]
        out: PathBuf,
        /// Also write the top-1 localization of every caption.
        #[arg(long)]
        localizations_out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score predictions against an answer key.
    Score {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Break accuracy down by the smallest step gap between the
        /// question's items; needs --questions and --annotations.
        #[arg(long)]
        per_gap: bool,
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        fps: Option<f64>,
    },
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", serde_json::json!({"error": kind, "message": message}));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            return fail("usage", e.to_string().trim(), 2);
        }
    };
    let r = match cli.command {
        Command::Gensynth {
            config,
            out,
            seed,
            n_videos,
        } => commands::gensynth(config.as_deref(), &out, seed, n_videos),
        Command::Genq {
            task,
            annotations,
            n,
            seed,
            exclude,
            out,
            strip_answers,
            key_out,
            config,
        } => commands::genq(commands::GenqArgs {
            task,
            annotations: &annotations,
            n,
            seed,
            exclude: exclude.as_deref(),
            out: &out,
            strip_answers,
            key_out: key_out.as_deref(),
            config: config.as_deref(),
        }),
        Command::PlanFrames { annotations, fps, out } => commands::plan_frames(&annotations, fps, &out),
        Command::Train {
            model,
            config,
            data,
            out,
            seed,
            exclude,
            overrides,
        } => commands::train(model, config.as_deref(), &data, &out, seed, exclude.as_deref(), &overrides),
        Command::Predict {
            model,
            ckpt,
            pairwise_ckpt,
            questions,
            features,
            data,
            strategy,
            out,
            localizations_out,
            config,
            seed,
        } => commands::predict(commands::PredictArgs {
            model,
            ckpt: ckpt.as_deref(),
            pairwise_ckpt: pairwise_ckpt.as_deref(),
            questions: &questions,
            features: features.as_deref(),
            data: data.as_deref(),
            strategy,
            out: &out,
            localizations_out: localizations_out.as_deref(),
            config: config.as_deref(),
            seed,
        }),
        Command::Score {
            predictions,
            key,
            report,
            per_gap,
            questions,
            annotations,
            fps,
        } => commands::score(
            &predictions,
            &key,
            &report,
            per_gap,
            questions.as_deref(),
            annotations.as_deref(),
            fps,
        ),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string(), 1),
    }
}
