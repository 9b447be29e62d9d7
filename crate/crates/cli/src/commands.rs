//! Subcommand bodies. Every command resolves and validates all of its
//! inputs before doing any training.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde_json::json;
use skelstory::checkpoint;
use skelstory::corpus::{
    build_vocab, load_compression_corpus, load_story_corpus, tokenize, CompressionCorpus,
    EncodedPair, EncodedStory, StoryCorpus,
};
use skelstory::fixtures::write_toy_fixture;
use skelstory::metrics::{
    bleu, distinct_ngram_ratio, evaluate, EvalItem, StopWordList, TrainingIndex, DEFAULT_MAX_N,
};
use skelstory::models::{
    generate_story_traced, DecodeMode, Extractor, InputToSkeleton, SkeletonToSentence,
};
use skelstory::params::ParamSet;
use skelstory::trainer::{
    self, all_pairs, init_extractor, stage_rng, ComponentOptimizer, Generator, MetricsLog, Stage,
};
use skelstory::vocab::{TokenId, Vocabulary, EOS_STORY};

use crate::config::RunConfig;
use crate::error::{io_at, CliError};
use crate::{CheckpointStage, ExtractMode, InputArgs};

const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// Points the corpus paths at the files written by `--synthetic DIR`.
pub fn synthetic_paths(dir: &Path, overrides: &mut Vec<(String, String)>) {
    for split in SPLITS {
        overrides.push((
            format!("story_{split}"),
            dir.join(format!("story_{split}.jsonl"))
                .display()
                .to_string(),
        ));
        overrides.push((
            format!("compression_{split}"),
            dir.join(format!("compression_{split}.tsv"))
                .display()
                .to_string(),
        ));
    }
}

#[derive(Debug, Clone, Copy)]
enum Component {
    Extractor,
    InputToSkeleton,
    SkeletonToSentence,
}

impl Component {
    fn file_stem(self) -> &'static str {
        match self {
            Self::Extractor => "extractor",
            Self::InputToSkeleton => "i2s",
            Self::SkeletonToSentence => "s2s",
        }
    }
}

impl CheckpointStage {
    fn tag(self) -> &'static str {
        match self {
            Self::Pre => "pre",
            Self::Rl => "rl",
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(io_at(path))
}

fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Writes one line to stdout. A closed pipe ends output quietly.
fn emit(text: &str) -> Result<(), CliError> {
    let mut out = io::stdout().lock();
    match writeln!(out, "{text}").and_then(|()| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(CliError::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn print_json(value: &serde_json::Value) -> String {
    serde_json::to_string_pretty(value).expect("JSON values always serialize")
}

pub struct Run {
    cfg: RunConfig,
    name: &'static str,
}

impl Run {
    /// Validates the config, echoes it to stderr and, for commands that
    /// write artifacts, stores it in the checkpoint directory.
    pub fn start(cfg: RunConfig, name: &'static str) -> Result<Self, CliError> {
        cfg.training.validate()?;
        eprintln!("# resolved config ({name})\n{}", cfg.to_toml());
        let run = Self { cfg, name };
        if run.writes_artifacts() {
            let dir = &run.cfg.paths.checkpoint_dir;
            fs::create_dir_all(dir).map_err(io_at(dir))?;
            let path = dir.join(format!("{name}.config.toml"));
            fs::write(&path, run.cfg.to_toml()).map_err(io_at(&path))?;
        }
        Ok(run)
    }

    fn writes_artifacts(&self) -> bool {
        !matches!(self.name, "generate" | "extract" | "evaluate")
    }

    fn dir(&self) -> &Path {
        &self.cfg.paths.checkpoint_dir
    }

    fn checkpoint_path(&self, c: Component, stage: CheckpointStage) -> PathBuf {
        self.dir()
            .join(format!("{}.{}.skel", c.file_stem(), stage.tag()))
    }

    fn optimizer_path(&self, c: Component, stage: CheckpointStage) -> PathBuf {
        self.dir()
            .join(format!("{}.{}.opt.skel", c.file_stem(), stage.tag()))
    }

    fn vocab_path(&self) -> PathBuf {
        self.dir().join("vocab.txt")
    }

    fn load_vocab(&self) -> Result<Vocabulary, CliError> {
        let path = self.vocab_path();
        Vocabulary::load(&path).map_err(|source| CliError::Vocab { path, source })
    }

    fn load_params(&self, path: &Path) -> Result<ParamSet, CliError> {
        checkpoint::load(path).map_err(|source| CliError::Checkpoint {
            path: path.to_path_buf(),
            source,
        })
    }

    fn save_params(&self, path: &Path, params: &ParamSet) -> Result<(), CliError> {
        checkpoint::save(path, params).map_err(|source| CliError::Checkpoint {
            path: path.to_path_buf(),
            source,
        })?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    /// Loads a component and checks its vocabulary against `vocab`.
    fn load_component<T>(
        &self,
        c: Component,
        stage: CheckpointStage,
        vocab: &Vocabulary,
        build: impl FnOnce(ParamSet) -> Result<T, skelstory::models::ModelError>,
        params_of: impl Fn(&T) -> &ParamSet,
    ) -> Result<T, CliError> {
        let path = self.checkpoint_path(c, stage);
        let model = build(self.load_params(&path)?).map_err(|source| CliError::Layout {
            path: path.clone(),
            source,
        })?;
        let rows = params_of(&model)
            .find("embedding")
            .map(|id| params_of(&model).get(id).shape()[0]);
        if rows != Some(vocab.len()) {
            return Err(CliError::Data(format!(
                "{}: embedding has {} rows but the vocabulary has {} entries",
                path.display(),
                rows.unwrap_or(0),
                vocab.len()
            )));
        }
        Ok(model)
    }

    fn load_extractor(
        &self,
        stage: CheckpointStage,
        vocab: &Vocabulary,
    ) -> Result<Extractor, CliError> {
        self.load_component(
            Component::Extractor,
            stage,
            vocab,
            Extractor::from_params,
            Extractor::params,
        )
    }

    fn load_generator_parts(
        &self,
        stage: CheckpointStage,
        vocab: &Vocabulary,
    ) -> Result<(InputToSkeleton, SkeletonToSentence), CliError> {
        let i2s = self.load_component(
            Component::InputToSkeleton,
            stage,
            vocab,
            InputToSkeleton::from_params,
            InputToSkeleton::params,
        )?;
        let s2s = self.load_component(
            Component::SkeletonToSentence,
            stage,
            vocab,
            SkeletonToSentence::from_params,
            SkeletonToSentence::params,
        )?;
        Ok((i2s, s2s))
    }

    /// The requested stage, or rl when all of `components` have rl
    /// checkpoints and pre otherwise.
    fn pick_stage(
        &self,
        requested: Option<CheckpointStage>,
        components: &[Component],
    ) -> CheckpointStage {
        let stage = requested.unwrap_or_else(|| {
            if components
                .iter()
                .all(|&c| self.checkpoint_path(c, CheckpointStage::Rl).is_file())
            {
                CheckpointStage::Rl
            } else {
                CheckpointStage::Pre
            }
        });
        log::info!(
            "using {} checkpoints from {}",
            stage.tag(),
            self.dir().display()
        );
        stage
    }

    fn metrics_log(&self) -> Result<MetricsLog, CliError> {
        let path = self.cfg.metrics_log_for(self.name);
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_at(parent))?;
        }
        let file = File::create(&path).map_err(io_at(&path))?;
        let log = MetricsLog::with_sink(Box::new(file));
        Ok(if self.cfg.paths.log_wall_time {
            log.with_wall_time()
        } else {
            log
        })
    }

    fn stories(
        &self,
        path: &Path,
        vocab: &Vocabulary,
    ) -> Result<(StoryCorpus, Vec<EncodedStory>), CliError> {
        let corpus = load_story_corpus(path)?;
        let encoded = corpus
            .stories
            .iter()
            .map(|s| EncodedStory::new(s, vocab))
            .collect();
        Ok((corpus, encoded))
    }

    fn compression(&self, path: &Path, vocab: &Vocabulary) -> Result<Vec<EncodedPair>, CliError> {
        let corpus = load_compression_corpus(path)?;
        Ok(corpus
            .pairs
            .iter()
            .map(|p| EncodedPair::new(p, vocab))
            .collect())
    }

    pub fn prepare_data(&self, synthetic: Option<&Path>) -> Result<(), CliError> {
        let p = &self.cfg.paths;
        if let Some(dir) = synthetic {
            let mut rng = stage_rng(self.cfg.training.seed, Stage::SyntheticData);
            write_toy_fixture(dir, &mut rng).map_err(io_at(dir))?;
            log::info!("wrote the toy corpus to {}", dir.display());
        }
        let stories: Vec<StoryCorpus> = [&p.story_train, &p.story_valid, &p.story_test]
            .into_iter()
            .map(|path| load_story_corpus(path))
            .collect::<Result<_, _>>()?;
        let compression: Vec<CompressionCorpus> = [
            &p.compression_train,
            &p.compression_valid,
            &p.compression_test,
        ]
        .into_iter()
        .map(|path| load_compression_corpus(path))
        .collect::<Result<_, _>>()?;
        let vocab = build_vocab(
            &stories[0].stories,
            &compression[0].pairs,
            self.cfg.training.vocab,
        );
        let vocab_path = self.vocab_path();
        vocab.save(&vocab_path).map_err(|source| CliError::Vocab {
            path: vocab_path.clone(),
            source,
        })?;
        log::info!("wrote {} ({} entries)", vocab_path.display(), vocab.len());

        let mut story_report = serde_json::Map::new();
        let mut compression_report = serde_json::Map::new();
        let mut unk_rate = serde_json::Map::new();
        for ((split, s), c) in SPLITS.iter().zip(&stories).zip(&compression) {
            story_report.insert(
                split.to_string(),
                json!({
                    "stories": s.stories.len(),
                    "skipped_short": s.skipped_short,
                    "truncated_sentences": s.truncated_sentences,
                    "dropped_sentences": s.dropped_sentences,
                    "empty_sentences": s.empty_sentences,
                }),
            );
            compression_report.insert(
                split.to_string(),
                json!({
                    "pairs": c.pairs.len(),
                    "order_violations": c.order_violations,
                    "empty_compressions": c.empty_compressions,
                }),
            );
            let sentences: Vec<Vec<String>> = s
                .stories
                .iter()
                .flat_map(|e| std::iter::once(&e.input).chain(&e.targets).cloned())
                .collect();
            unk_rate.insert(format!("story_{split}"), json!(vocab.unk_rate(&sentences)));
        }
        let report = print_json(&json!({
            "story": story_report,
            "compression": compression_report,
            "vocab_size": vocab.len(),
            "unk_rate": unk_rate,
        }));
        let path = self.dir().join("data_report.json");
        fs::write(&path, format!("{report}\n")).map_err(io_at(&path))?;
        emit(&report)?;
        Ok(())
    }

    pub fn pretrain_extractor(&self) -> Result<(), CliError> {
        let mut log = self.metrics_log()?;
        self.extractor_stage(&mut log)
    }

    fn extractor_stage(&self, log: &mut MetricsLog) -> Result<(), CliError> {
        let cfg = &self.cfg.training;
        let vocab = self.load_vocab()?;
        let train = self.compression(&self.cfg.paths.compression_train, &vocab)?;
        let valid = self.compression(&self.cfg.paths.compression_valid, &vocab)?;
        let mut rng = stage_rng(cfg.seed, Stage::ExtractorPretrain);
        let mut extractor = init_extractor(cfg, vocab.len(), &mut rng);
        let mut opt = ComponentOptimizer::new(extractor.params(), cfg);
        trainer::pretrain_extractor(&mut extractor, &mut opt, &train, &valid, cfg, &mut rng, log)?;
        let pre = CheckpointStage::Pre;
        self.save_params(
            &self.checkpoint_path(Component::Extractor, pre),
            extractor.params(),
        )?;
        self.save_params(
            &self.optimizer_path(Component::Extractor, pre),
            &opt.state(extractor.params()),
        )
    }

    pub fn pretrain_generator(&self) -> Result<(), CliError> {
        let mut log = self.metrics_log()?;
        self.generator_stage(&mut log)
    }

    fn generator_stage(&self, log: &mut MetricsLog) -> Result<(), CliError> {
        let cfg = &self.cfg.training;
        let vocab = self.load_vocab()?;
        let (_, stories) = self.stories(&self.cfg.paths.story_train, &vocab)?;
        let pre = CheckpointStage::Pre;
        let extractor = self.load_extractor(pre, &vocab)?;
        let pairs = all_pairs(&stories);
        let (generator, _) =
            trainer::pretrain_generator(&extractor, &pairs, vocab.len(), cfg, log)?;
        self.save_generator(&generator, pre)
    }

    fn save_generator(
        &self,
        generator: &Generator,
        stage: CheckpointStage,
    ) -> Result<(), CliError> {
        let (i2s_state, s2s_state) = generator.state();
        self.save_params(
            &self.checkpoint_path(Component::InputToSkeleton, stage),
            generator.i2s.params(),
        )?;
        self.save_params(
            &self.optimizer_path(Component::InputToSkeleton, stage),
            &i2s_state,
        )?;
        self.save_params(
            &self.checkpoint_path(Component::SkeletonToSentence, stage),
            generator.s2s.params(),
        )?;
        self.save_params(
            &self.optimizer_path(Component::SkeletonToSentence, stage),
            &s2s_state,
        )
    }

    /// Runs the reinforcement loop from the pre checkpoints, after running
    /// both pretraining stages when `full` is set. Stages always hand over
    /// through the saved checkpoints, so a full run equals the three
    /// stage commands run in sequence.
    pub fn train_rl(&self, full: bool) -> Result<(), CliError> {
        let mut log = self.metrics_log()?;
        if full {
            self.extractor_stage(&mut log)?;
            self.generator_stage(&mut log)?;
        }
        let cfg = &self.cfg.training;
        let vocab = self.load_vocab()?;
        let (_, stories) = self.stories(&self.cfg.paths.story_train, &vocab)?;
        let pre = CheckpointStage::Pre;
        let mut extractor = self.load_extractor(pre, &vocab)?;
        let e_state = self.load_params(&self.optimizer_path(Component::Extractor, pre))?;
        let mut e_opt = ComponentOptimizer::from_state(extractor.params(), &e_state, cfg)?;
        let (i2s, s2s) = self.load_generator_parts(pre, &vocab)?;
        let i2s_state = self.load_params(&self.optimizer_path(Component::InputToSkeleton, pre))?;
        let s2s_state =
            self.load_params(&self.optimizer_path(Component::SkeletonToSentence, pre))?;
        let mut generator = Generator::with_state(i2s, s2s, &i2s_state, &s2s_state, cfg)?;

        let pairs = all_pairs(&stories);
        let mut rng = stage_rng(cfg.seed, Stage::Reinforce);
        let stats = trainer::reinforce(
            &mut extractor,
            &mut e_opt,
            &mut generator,
            &pairs,
            cfg,
            &mut rng,
            &mut log,
        )?;
        if let Some(last) = stats.last() {
            log::info!("final iteration {}: R_c {:.4}", last.iteration, last.rc);
        }
        let rl = CheckpointStage::Rl;
        self.save_params(
            &self.checkpoint_path(Component::Extractor, rl),
            extractor.params(),
        )?;
        self.save_params(
            &self.optimizer_path(Component::Extractor, rl),
            &e_opt.state(extractor.params()),
        )?;
        self.save_generator(&generator, rl)
    }

    fn inputs(&self, input: &InputArgs, vocab: &Vocabulary) -> Result<Vec<Vec<TokenId>>, CliError> {
        let raw: Vec<String> = match (&input.input, &input.input_file) {
            (Some(s), _) => vec![s.clone()],
            (None, Some(path)) => read_text(path)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(String::from)
                .collect(),
            (None, None) => {
                return Err(CliError::Usage(
                    "one of --input or --input-file is required".into(),
                ))
            }
        };
        raw.iter()
            .map(|line| {
                let mut tokens = tokenize(line);
                tokens.truncate(self.cfg.training.max_sentence_len);
                if tokens.is_empty() {
                    return Err(CliError::Data(format!("input {line:?} has no tokens")));
                }
                Ok(vocab.encode(&tokens))
            })
            .collect()
    }

    pub fn generate(
        &self,
        input: &InputArgs,
        stage: Option<CheckpointStage>,
        trace: bool,
    ) -> Result<(), CliError> {
        let vocab = self.load_vocab()?;
        let stage = self.pick_stage(
            stage,
            &[Component::InputToSkeleton, Component::SkeletonToSentence],
        );
        let (i2s, s2s) = self.load_generator_parts(stage, &vocab)?;
        let limits = self.cfg.training.limits();
        for x in self.inputs(input, &vocab)? {
            let steps = generate_story_traced(&x, &i2s, &s2s, &limits)?;
            if trace {
                let steps: Vec<_> = steps
                    .iter()
                    .map(|s| {
                        json!({
                            "skeleton": detokenize(&vocab.decode(&s.skeleton.tokens)),
                            "sentence": detokenize(&vocab.decode(&s.sentence)),
                        })
                    })
                    .collect();
                let line = json!({ "input": detokenize(&vocab.decode(&x)), "steps": steps });
                emit(&line.to_string())?;
            } else {
                let story: Vec<String> = steps
                    .iter()
                    .filter(|s| s.sentence.first() != Some(&EOS_STORY))
                    .map(|s| detokenize(&vocab.decode(&s.sentence)))
                    .collect();
                emit(&story.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn extract(
        &self,
        input: &InputArgs,
        stage: Option<CheckpointStage>,
        mode: ExtractMode,
    ) -> Result<(), CliError> {
        let vocab = self.load_vocab()?;
        let stage = self.pick_stage(stage, &[Component::Extractor]);
        let extractor = self.load_extractor(stage, &vocab)?;
        let mode = match mode {
            ExtractMode::Greedy => DecodeMode::Greedy,
            ExtractMode::Sample => DecodeMode::Sample,
        };
        let mut rng = stage_rng(self.cfg.training.seed, Stage::Generate);
        for x in self.inputs(input, &vocab)? {
            let (skeleton, _) = extractor.extract_skeleton(
                &x,
                mode,
                self.cfg.training.max_skeleton_len,
                &mut rng,
            )?;
            emit(&detokenize(&vocab.decode(&skeleton.tokens)))?;
        }
        Ok(())
    }

    pub fn evaluate(
        &self,
        files: Option<(PathBuf, PathBuf)>,
        stage: Option<CheckpointStage>,
        keep_stopwords: bool,
        output: Option<&Path>,
    ) -> Result<(), CliError> {
        let stopwords = if keep_stopwords {
            StopWordList::empty()
        } else {
            StopWordList::english_v1()
        };
        let report = match files {
            Some((candidates, references)) => {
                self.score_files(&candidates, &references, &stopwords)?
            }
            None => self.score_test_split(stage, &stopwords)?,
        };
        let text = print_json(&report);
        if let Some(path) = output {
            fs::write(path, format!("{text}\n")).map_err(io_at(path))?;
        }
        emit(&text)
    }

    fn score_files(
        &self,
        candidates: &Path,
        references: &Path,
        stopwords: &StopWordList,
    ) -> Result<serde_json::Value, CliError> {
        let cands: Vec<Vec<String>> = read_text(candidates)?.lines().map(tokenize).collect();
        let refs: Vec<Vec<Vec<String>>> = read_text(references)?
            .lines()
            .map(|l| l.split('\t').map(tokenize).collect())
            .collect();
        if cands.len() != refs.len() {
            return Err(CliError::Data(format!(
                "{} candidates but {} reference lines",
                cands.len(),
                refs.len()
            )));
        }
        let report = bleu(&cands, &refs, DEFAULT_MAX_N, stopwords)?;
        Ok(json!({
            "stopwords": stopwords.version(),
            "bleu": report.score,
            "precisions": report.precisions,
            "brevity_penalty": report.brevity_penalty,
            "candidate_length": report.candidate_length,
            "reference_length": report.reference_length,
            "distinct_1": distinct_ngram_ratio(&cands, 1),
            "distinct_2": distinct_ngram_ratio(&cands, 2),
            "distinct_3": distinct_ngram_ratio(&cands, 3),
        }))
    }

    /// Generates a story for every test input and scores it against the
    /// gold continuation, with unseen ratios measured against the training
    /// split.
    fn score_test_split(
        &self,
        stage: Option<CheckpointStage>,
        stopwords: &StopWordList,
    ) -> Result<serde_json::Value, CliError> {
        let vocab = self.load_vocab()?;
        let train = load_story_corpus(&self.cfg.paths.story_train)?;
        let (test, encoded) = self.stories(&self.cfg.paths.story_test, &vocab)?;
        let stage = self.pick_stage(
            stage,
            &[Component::InputToSkeleton, Component::SkeletonToSentence],
        );
        let (i2s, s2s) = self.load_generator_parts(stage, &vocab)?;
        let limits = self.cfg.training.limits();
        let mut items = Vec::with_capacity(test.stories.len());
        for (story, enc) in test.stories.iter().zip(&encoded) {
            let generated = generate_story_traced(&enc.input, &i2s, &s2s, &limits)?;
            let candidate = generated
                .iter()
                .filter(|s| s.sentence.first() != Some(&EOS_STORY))
                .flat_map(|s| vocab.decode(&s.sentence))
                .collect();
            items.push(EvalItem {
                input: story.input.clone(),
                candidate,
                reference: story.targets.concat(),
            });
        }
        let sentences: Vec<Vec<String>> = train
            .stories
            .iter()
            .flat_map(|e| std::iter::once(&e.input).chain(&e.targets).cloned())
            .collect();
        let index = TrainingIndex::new(&sentences, DEFAULT_MAX_N, stopwords.clone());
        let report = evaluate(&items, Some(&index), stopwords)?;
        Ok(serde_json::to_value(report).expect("reports always serialize"))
    }
}
