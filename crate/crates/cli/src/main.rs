mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::split_override;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "skelstory", version, about = "Skeleton-based story generation")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Flat TOML file of config keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Overrides `checkpoint_dir`.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CheckpointStage {
    Pre,
    Rl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExtractMode {
    Greedy,
    Sample,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct InputArgs {
    /// A single raw input sentence.
    #[arg(long)]
    input: Option<String>,
    /// One raw input sentence per line.
    #[arg(long)]
    input_file: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validates the corpora, reports statistics and writes the vocabulary.
    PrepareData {
        /// Writes the built-in toy corpus into DIR and uses it.
        #[arg(long, value_name = "DIR")]
        synthetic: Option<PathBuf>,
    },
    /// Trains the skeleton extractor on the compression corpus.
    PretrainExtractor,
    /// Trains the generative module on skeletons from the pretrained extractor.
    PretrainGenerator,
    /// Runs the reinforcement loop from the pretrained checkpoints.
    TrainRl {
        /// Runs both pretraining stages first.
        #[arg(long)]
        full: bool,
    },
    /// Generates a story for each input sentence.
    Generate {
        #[command(flatten)]
        input: InputArgs,
        /// Checkpoint stage to load; defaults to rl when present, else pre.
        #[arg(long, value_enum)]
        stage: Option<CheckpointStage>,
        /// Prints each skeleton along with its sentence.
        #[arg(long)]
        trace: bool,
    },
    /// Extracts the skeleton of each input sentence.
    Extract {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, value_enum)]
        stage: Option<CheckpointStage>,
        #[arg(long, value_enum, default_value = "greedy")]
        mode: ExtractMode,
    },
    /// Scores candidate stories against references.
    Evaluate {
        /// One candidate per line; requires --references.
        #[arg(long, requires = "references")]
        candidates: Option<PathBuf>,
        /// One line per candidate, alternative references separated by tabs.
        #[arg(long, requires = "candidates")]
        references: Option<PathBuf>,
        #[arg(long, value_enum)]
        stage: Option<CheckpointStage>,
        /// Scores with every token kept instead of dropping stop words.
        #[arg(long)]
        keep_stopwords: bool,
        /// Also writes the report to this file.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn overrides(common: &CommonArgs) -> Result<Vec<(String, String)>, CliError> {
    let mut out = common
        .set
        .iter()
        .map(|s| split_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(dir) = &common.checkpoint {
        out.push(("checkpoint_dir".into(), dir.display().to_string()));
    }
    if let Some(seed) = common.seed {
        out.push(("seed".into(), seed.to_string()));
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = overrides(&cli.common)?;
    if let Command::PrepareData {
        synthetic: Some(dir),
    } = &cli.command
    {
        commands::synthetic_paths(dir, &mut overrides);
    }
    let cfg = config::RunConfig::resolve(cli.common.config.as_deref(), &overrides)?;
    let name = match &cli.command {
        Command::PrepareData { .. } => "prepare-data",
        Command::PretrainExtractor => "pretrain-extractor",
        Command::PretrainGenerator => "pretrain-generator",
        Command::TrainRl { full: false } => "train-rl",
        Command::TrainRl { full: true } => "train-full",
        Command::Generate { .. } => "generate",
        Command::Extract { .. } => "extract",
        Command::Evaluate { .. } => "evaluate",
    };
    let run = commands::Run::start(cfg, name)?;
    match cli.command {
        Command::PrepareData { synthetic } => run.prepare_data(synthetic.as_deref()),
        Command::PretrainExtractor => run.pretrain_extractor(),
        Command::PretrainGenerator => run.pretrain_generator(),
        Command::TrainRl { full } => run.train_rl(full),
        Command::Generate {
            input,
            stage,
            trace,
        } => run.generate(&input, stage, trace),
        Command::Extract { input, stage, mode } => run.extract(&input, stage, mode),
        Command::Evaluate {
            candidates,
            references,
            stage,
            keep_stopwords,
            output,
        } => run.evaluate(
            candidates.zip(references),
            stage,
            keep_stopwords,
            output.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
