//! Extractor pretraining, supervised training of the generative module on
//! extracted skeletons, the combined reward, and the policy-gradient update
//! of the extractor.

use std::io::{self, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::corpus::{story_pairs, EncodedPair, EncodedStory, StoryPair};
use crate::models::{
    DecodeMode, Extractor, GenerationLimits, InputToSkeleton, ModelDims, ModelError, Seq2Seq,
    Skeleton, SkeletonToSentence, Source,
};
use crate::optim::{clip_global_norm, Adagrad};
use crate::params::{accumulate, ParamSet};
use crate::tensor::{Tensor, TensorError};
use crate::vocab::TokenId;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("metrics log: {0}")]
    Io(#[from] io::Error),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("losses must be non-negative, got R1={r1}, R2={r2}")]
    NegativeLoss { r1: f64, r2: f64 },
    #[error("batch arrays differ in length: {0:?}")]
    BatchMismatch(Vec<usize>),
    #[error("{0} is empty")]
    EmptyCorpus(&'static str),
    #[error("optimizer state does not match the model parameters")]
    OptimizerState,
    #[error("{0} parameters changed outside their owning update")]
    OwnershipViolation(&'static str),
}

pub type Result<T> = std::result::Result<T, TrainerError>;

/// Which extractor decode feeds the supervised branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkeletonSource {
    Greedy,
    #[default]
    Sample,
}

impl From<SkeletonSource> for DecodeMode {
    fn from(s: SkeletonSource) -> Self {
        match s {
            SkeletonSource::Greedy => DecodeMode::Greedy,
            SkeletonSource::Sample => DecodeMode::Sample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub hidden: usize,
    pub embedding: usize,
    /// Maximum vocabulary size, reserved ids included.
    pub vocab: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    /// Upper bound of the combined reward.
    pub reward_k: f64,
    pub generative_pretrain_epochs: usize,
    pub extractor_pretrain_epochs: usize,
    pub rl_iterations: usize,
    pub g_steps_per_iteration: usize,
    pub seed: u64,
    pub baseline_enabled: bool,
    pub baseline_decay: f64,
    pub skeleton_source: SkeletonSource,
    pub init_range: f64,
    pub adagrad_epsilon: f64,
    pub max_sentence_len: usize,
    pub max_skeleton_len: usize,
    pub max_story_sentences: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            embedding: 50,
            vocab: 20_000,
            batch: 10,
            learning_rate: 0.6,
            clip_norm: 2.0,
            reward_k: 1.0,
            generative_pretrain_epochs: 30,
            extractor_pretrain_epochs: 40,
            rl_iterations: 1000,
            g_steps_per_iteration: 1,
            seed: 1,
            baseline_enabled: false,
            baseline_decay: 0.9,
            skeleton_source: SkeletonSource::Sample,
            init_range: 0.1,
            adagrad_epsilon: 1e-8,
            max_sentence_len: 40,
            max_skeleton_len: 40,
            max_story_sentences: 6,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| {
            Err(TrainerError::InvalidConfig(format!(
                "{what} must be positive"
            )))
        };
        for (name, v) in [
            ("hidden", self.hidden),
            ("embedding", self.embedding),
            ("vocab", self.vocab),
            ("batch", self.batch),
            ("g_steps_per_iteration", self.g_steps_per_iteration),
            ("max_sentence_len", self.max_sentence_len),
            ("max_skeleton_len", self.max_skeleton_len),
            ("max_story_sentences", self.max_story_sentences),
        ] {
            if v == 0 {
                return bad(name);
            }
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("clip_norm", self.clip_norm),
            ("reward_k", self.reward_k),
            ("init_range", self.init_range),
            ("adagrad_epsilon", self.adagrad_epsilon),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name);
            }
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(TrainerError::InvalidConfig(
                "baseline_decay must be in [0, 1)".into(),
            ));
        }
        if self.vocab <= crate::vocab::RESERVED.len() {
            return Err(TrainerError::InvalidConfig(
                "vocab must exceed the reserved ids".into(),
            ));
        }
        Ok(())
    }

    pub fn dims(&self, vocab_len: usize) -> ModelDims {
        ModelDims {
            vocab: vocab_len,
            embedding: self.embedding,
            hidden: self.hidden,
        }
    }

    pub fn limits(&self) -> GenerationLimits {
        GenerationLimits {
            max_sentence_len: self.max_sentence_len,
            max_skeleton_len: self.max_skeleton_len,
            max_story_sentences: self.max_story_sentences,
        }
    }
}

/// Independent random streams per training stage, so a stage produces the
/// same result whether it runs alone or inside the full pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    ExtractorPretrain = 1,
    GenerativePretrain = 2,
    Reinforce = 3,
    Generate = 4,
    SyntheticData = 5,
}

pub fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64);
    rng
}

/// `K − √(R1·R2)`.
pub fn compute_reward(r1: f64, r2: f64, k: f64) -> Result<f64> {
    if !(r1 >= 0.0 && r2 >= 0.0) {
        return Err(TrainerError::NegativeLoss { r1, r2 });
    }
    Ok(k - (r1 * r2).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RewardRecord {
    pub r1: f64,
    pub r2: f64,
    pub rc: f64,
}

impl RewardRecord {
    pub fn new(r1: f64, r2: f64, k: f64) -> Result<Self> {
        Ok(Self {
            r1,
            r2,
            rc: compute_reward(r1, r2, k)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    ExtractorPretrain,
    GenerativePretrain,
    Reinforce,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub phase: Phase,
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub i2s_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s2s_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

impl MetricsRecord {
    pub fn new(phase: Phase, step: usize) -> Self {
        Self {
            phase,
            step,
            loss: None,
            valid_loss: None,
            i2s_loss: None,
            s2s_loss: None,
            r1: None,
            r2: None,
            rc: None,
            wall_time_s: None,
        }
    }
}

/// Collects records and optionally streams them as JSON lines. Wall time
/// is only recorded when a clock is attached, since it would make logs of
/// identical runs differ.
#[derive(Default)]
pub struct MetricsLog {
    records: Vec<MetricsRecord>,
    sink: Option<Box<dyn Write>>,
    clock: Option<Instant>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_sink(sink: Box<dyn Write>) -> Self {
        Self {
            sink: Some(sink),
            ..Self::default()
        }
    }

    pub fn with_wall_time(mut self) -> Self {
        self.clock = Some(Instant::now());
        self
    }

    pub fn push(&mut self, mut record: MetricsRecord) -> Result<()> {
        if let Some(start) = self.clock {
            record.wall_time_s = Some(start.elapsed().as_secs_f64());
        }
        if let Some(sink) = self.sink.as_mut() {
            let line = serde_json::to_string(&record).expect("records always serialize");
            writeln!(sink, "{line}")?;
            sink.flush()?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }
}

/// Adagrad plus clipping for one component.
#[derive(Debug, Clone)]
pub struct ComponentOptimizer {
    adagrad: Adagrad,
    clip_norm: f64,
}

impl ComponentOptimizer {
    pub fn new(params: &ParamSet, cfg: &TrainingConfig) -> Self {
        Self {
            adagrad: Adagrad::new(cfg.learning_rate, cfg.adagrad_epsilon, params.tensors()),
            clip_norm: cfg.clip_norm,
        }
    }

    /// Resumes from saved accumulators, stored as a parameter set with the
    /// same names and shapes as `params`.
    pub fn from_state(params: &ParamSet, state: &ParamSet, cfg: &TrainingConfig) -> Result<Self> {
        if state.names() != params.names()
            || state
                .tensors()
                .iter()
                .zip(params.tensors())
                .any(|(a, p)| a.shape() != p.shape())
        {
            return Err(TrainerError::OptimizerState);
        }
        Ok(Self {
            adagrad: Adagrad::with_accumulators(
                cfg.learning_rate,
                cfg.adagrad_epsilon,
                state.tensors().to_vec(),
            ),
            clip_norm: cfg.clip_norm,
        })
    }

    /// Accumulators under the names of `params`, for checkpointing.
    pub fn state(&self, params: &ParamSet) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, acc) in params.names().iter().zip(self.adagrad.accumulators()) {
            out.push(name.clone(), acc.clone());
        }
        out
    }

    /// Clips `grads` to the global norm and applies one Adagrad step.
    pub fn apply(&mut self, params: &mut ParamSet, mut grads: Vec<Tensor>) -> Result<()> {
        clip_global_norm(&mut grads, self.clip_norm);
        self.adagrad.step(params.tensors_mut(), &grads)?;
        Ok(())
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Mean loss and mean gradient over a batch of teacher-forced examples.
fn batch_loss_and_grads<'a>(
    model: &Seq2Seq,
    examples: impl IntoIterator<Item = (Source<'a>, &'a [TokenId])>,
) -> Result<(Vec<f64>, Vec<Tensor>)> {
    let mut total = model.params().zeros_like();
    let mut losses = Vec::new();
    let mut per: Vec<Vec<Tensor>> = Vec::new();
    for (source, target) in examples {
        let (l, g) = model.loss_and_grads(source, target)?;
        losses.push(l);
        per.push(g);
    }
    let scale = 1.0 / losses.len().max(1) as f64;
    for g in &per {
        accumulate(&mut total, g, scale);
    }
    Ok((losses, total))
}

pub fn init_extractor(cfg: &TrainingConfig, vocab_len: usize, rng: &mut ChaCha8Rng) -> Extractor {
    Extractor::new(cfg.dims(vocab_len), cfg.init_range, rng)
}

/// Per-epoch mean losses from extractor pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve {
    pub train: Vec<f64>,
    pub valid: Vec<f64>,
}

/// Maximum-likelihood training of the extractor on compression pairs.
pub fn pretrain_extractor(
    extractor: &mut Extractor,
    opt: &mut ComponentOptimizer,
    train: &[EncodedPair],
    valid: &[EncodedPair],
    cfg: &TrainingConfig,
    rng: &mut ChaCha8Rng,
    log: &mut MetricsLog,
) -> Result<LossCurve> {
    if train.is_empty() {
        return Err(TrainerError::EmptyCorpus("compression training set"));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = LossCurve {
        train: Vec::new(),
        valid: Vec::new(),
    };
    for epoch in 1..=cfg.extractor_pretrain_epochs {
        order.shuffle(rng);
        let mut epoch_losses = Vec::with_capacity(train.len());
        for chunk in order.chunks(cfg.batch) {
            let (losses, grads) = batch_loss_and_grads(
                extractor.model(),
                chunk.iter().map(|&i| {
                    (
                        Source::Sequence(&train[i].original),
                        train[i].compressed.as_slice(),
                    )
                }),
            )?;
            epoch_losses.extend(losses);
            opt.apply(extractor.params_mut(), grads)?;
        }
        let train_loss = mean(&epoch_losses);
        let mut record = MetricsRecord::new(Phase::ExtractorPretrain, epoch);
        record.loss = Some(train_loss);
        curve.train.push(train_loss);
        if !valid.is_empty() {
            let v = valid
                .iter()
                .map(|p| extractor.extractor_loss(&p.original, &p.compressed))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            record.valid_loss = Some(mean(&v));
            curve.valid.push(mean(&v));
        }
        log::info!("extractor epoch {epoch}: loss {train_loss:.4}");
        log.push(record)?;
    }
    Ok(curve)
}

/// The input-to-skeleton and skeleton-to-sentence components with their
/// optimizer state.
pub struct Generator {
    pub i2s: InputToSkeleton,
    pub s2s: SkeletonToSentence,
    i2s_opt: ComponentOptimizer,
    s2s_opt: ComponentOptimizer,
}

impl Generator {
    pub fn new(i2s: InputToSkeleton, s2s: SkeletonToSentence, cfg: &TrainingConfig) -> Self {
        let i2s_opt = ComponentOptimizer::new(i2s.params(), cfg);
        let s2s_opt = ComponentOptimizer::new(s2s.params(), cfg);
        Self {
            i2s,
            s2s,
            i2s_opt,
            s2s_opt,
        }
    }

    pub fn init(cfg: &TrainingConfig, vocab_len: usize, rng: &mut ChaCha8Rng) -> Self {
        let dims = cfg.dims(vocab_len);
        let i2s = InputToSkeleton::new(dims, cfg.init_range, rng);
        let s2s = SkeletonToSentence::new(dims, cfg.init_range, rng);
        Self::new(i2s, s2s, cfg)
    }

    /// Resumes both components with saved optimizer accumulators.
    pub fn with_state(
        i2s: InputToSkeleton,
        s2s: SkeletonToSentence,
        i2s_state: &ParamSet,
        s2s_state: &ParamSet,
        cfg: &TrainingConfig,
    ) -> Result<Self> {
        let i2s_opt = ComponentOptimizer::from_state(i2s.params(), i2s_state, cfg)?;
        let s2s_opt = ComponentOptimizer::from_state(s2s.params(), s2s_state, cfg)?;
        Ok(Self {
            i2s,
            s2s,
            i2s_opt,
            s2s_opt,
        })
    }

    /// Optimizer accumulators of the two components.
    pub fn state(&self) -> (ParamSet, ParamSet) {
        (
            self.i2s_opt.state(self.i2s.params()),
            self.s2s_opt.state(self.s2s.params()),
        )
    }

    pub fn into_parts(self) -> (InputToSkeleton, SkeletonToSentence) {
        (self.i2s, self.s2s)
    }

    /// One optimizer step per component on a batch of triples. Returns the
    /// per-example losses computed before the update.
    pub fn step(&mut self, batch: &[(&StoryPair, &Skeleton)]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (i2s_losses, i2s_grads) = batch_loss_and_grads(
            self.i2s.model(),
            batch
                .iter()
                .map(|(p, s)| (Source::Context(p.context.sentences()), s.tokens.as_slice())),
        )?;
        let (s2s_losses, s2s_grads) = batch_loss_and_grads(
            self.s2s.model(),
            batch
                .iter()
                .map(|(p, s)| (Source::Sequence(&s.tokens), p.sentence.as_slice())),
        )?;
        self.i2s_opt.apply(self.i2s.params_mut(), i2s_grads)?;
        self.s2s_opt.apply(self.s2s.params_mut(), s2s_grads)?;
        Ok((i2s_losses, s2s_losses))
    }
}

/// Skeleton of a pair's gold sentence. The story-end pair always uses the
/// fixed end skeleton and never consults the extractor.
pub fn skeleton_for(
    pair: &StoryPair,
    extractor: &Extractor,
    mode: DecodeMode,
    max_len: usize,
    rng: &mut dyn RngCore,
) -> Result<Skeleton> {
    if pair.story_end {
        return Ok(Skeleton::story_end());
    }
    Ok(extractor
        .extract_skeleton(&pair.sentence, mode, max_len, rng)?
        .0)
}

pub fn all_pairs(stories: &[EncodedStory]) -> Vec<StoryPair> {
    stories.iter().flat_map(story_pairs).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerativeEpoch {
    pub i2s_loss: f64,
    pub s2s_loss: f64,
}

/// Supervised training of the generative module on skeletons extracted
/// from gold sentences by a fixed extractor. Greedy skeletons are
/// extracted once; sampled skeletons are redrawn every epoch.
pub fn train_generative(
    generator: &mut Generator,
    extractor: &Extractor,
    pairs: &[StoryPair],
    epochs: usize,
    cfg: &TrainingConfig,
    rng: &mut ChaCha8Rng,
    log: &mut MetricsLog,
) -> Result<Vec<GenerativeEpoch>> {
    if pairs.is_empty() {
        return Err(TrainerError::EmptyCorpus("story training set"));
    }
    let fingerprint = extractor.params().fingerprint();
    let mode: DecodeMode = cfg.skeleton_source.into();
    let extract_all = |rng: &mut ChaCha8Rng| {
        pairs
            .iter()
            .map(|p| skeleton_for(p, extractor, mode, cfg.max_skeleton_len, rng))
            .collect::<Result<Vec<_>>>()
    };
    let skeletons = if mode == DecodeMode::Greedy {
        Some(extract_all(rng)?)
    } else {
        None
    };
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let epoch_skeletons = match &skeletons {
            Some(s) => s.clone(),
            None => extract_all(rng)?,
        };
        order.shuffle(rng);
        let (mut q_losses, mut d_losses) = (Vec::new(), Vec::new());
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<_> = chunk
                .iter()
                .map(|&i| (&pairs[i], &epoch_skeletons[i]))
                .collect();
            let (q, d) = generator.step(&batch)?;
            q_losses.extend(q);
            d_losses.extend(d);
        }
        let point = GenerativeEpoch {
            i2s_loss: mean(&q_losses),
            s2s_loss: mean(&d_losses),
        };
        let mut record = MetricsRecord::new(Phase::GenerativePretrain, epoch);
        record.i2s_loss = Some(point.i2s_loss);
        record.s2s_loss = Some(point.s2s_loss);
        log::info!(
            "generative epoch {epoch}: i2s {:.4} s2s {:.4}",
            point.i2s_loss,
            point.s2s_loss
        );
        log.push(record)?;
        curve.push(point);
    }
    if extractor.params().fingerprint() != fingerprint {
        return Err(TrainerError::OwnershipViolation("extractor"));
    }
    Ok(curve)
}

/// `−mean_i(rewards[i] · log_probs[i])`. Descending this surrogate ascends
/// the expected reward.
pub fn reinforce_surrogate(tape: &mut Tape, log_probs: &[Var], rewards: &[f64]) -> Result<Var> {
    if log_probs.len() != rewards.len() || log_probs.is_empty() {
        return Err(TrainerError::BatchMismatch(vec![
            log_probs.len(),
            rewards.len(),
        ]));
    }
    let mut terms = Vec::with_capacity(log_probs.len());
    for (&lp, &r) in log_probs.iter().zip(rewards) {
        let lp = if tape.shape(lp).is_empty() {
            tape.scale(lp, 1.0)?
        } else {
            tape.sum(lp)?
        };
        terms.push(tape.scale(lp, r)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.scale(total, -1.0 / log_probs.len() as f64)?)
}

/// Exponential moving average of past rewards, subtracted from rewards
/// when enabled. The first batch initializes the average to its mean.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardBaseline {
    enabled: bool,
    decay: f64,
    value: Option<f64>,
}

impl RewardBaseline {
    pub fn new(enabled: bool, decay: f64) -> Self {
        Self {
            enabled,
            decay,
            value: None,
        }
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }

    /// Sets the average directly, e.g. to a warmed-up value.
    pub fn warm(&mut self, value: f64) {
        self.value = Some(value);
    }

    /// Rewards to use in the gradient; updates the average afterwards.
    pub fn advantages(&mut self, rewards: &[f64]) -> Vec<f64> {
        if !self.enabled {
            return rewards.to_vec();
        }
        let batch_mean = mean(rewards);
        let b = *self.value.get_or_insert(batch_mean);
        self.value = Some(self.decay * b + (1.0 - self.decay) * batch_mean);
        rewards.iter().map(|r| r - b).collect()
    }
}

/// Mean over the batch of `reward · ∇log P_E(skeleton | input)`, clipped
/// and applied to the extractor by gradient ascent. Returns the gradient
/// that was applied (before clipping).
pub fn policy_gradient_step(
    extractor: &mut Extractor,
    opt: &mut ComponentOptimizer,
    inputs: &[Vec<TokenId>],
    skeletons: &[Skeleton],
    rewards: &[f64],
    baseline: &mut RewardBaseline,
) -> Result<Vec<Tensor>> {
    if inputs.len() != skeletons.len() || inputs.len() != rewards.len() || inputs.is_empty() {
        return Err(TrainerError::BatchMismatch(vec![
            inputs.len(),
            skeletons.len(),
            rewards.len(),
        ]));
    }
    let advantages = baseline.advantages(rewards);
    let scale = 1.0 / inputs.len() as f64;
    let mut total = extractor.params().zeros_like();
    for ((x, s), &a) in inputs.iter().zip(skeletons).zip(&advantages) {
        if a == 0.0 {
            continue;
        }
        let mut tape = Tape::new();
        let bound = extractor.params().bind(&mut tape);
        let lp = extractor.model().log_prob_on_tape(
            &mut tape,
            &bound,
            Source::Sequence(x),
            &s.tokens,
            s.terminated,
        )?;
        let loss = reinforce_surrogate(&mut tape, &[lp], &[a])?;
        let mut grads = tape.backward(loss)?;
        accumulate(&mut total, &bound.grads(&mut grads), scale);
    }
    let applied = total.clone();
    opt.apply(extractor.params_mut(), total)?;
    Ok(applied)
}

/// Per-iteration summary of the reinforcement loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub r1: f64,
    pub r2: f64,
    pub rc: f64,
}

/// Cycles through a shuffled index list, reshuffling at each pass.
struct BatchCursor {
    order: Vec<usize>,
    pos: usize,
}

impl BatchCursor {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// The reinforcement loop. Each iteration samples a skeleton for every
/// gold sentence in a batch, trains the generative module on the batch,
/// rewards each sample with `K − √(R1·R2)` from that training pass, and
/// updates the extractor by policy gradient.
pub fn reinforce(
    extractor: &mut Extractor,
    e_opt: &mut ComponentOptimizer,
    generator: &mut Generator,
    pairs: &[StoryPair],
    cfg: &TrainingConfig,
    rng: &mut ChaCha8Rng,
    log: &mut MetricsLog,
) -> Result<Vec<IterationStats>> {
    if !pairs.iter().any(|p| !p.story_end) {
        return Err(TrainerError::EmptyCorpus("story training set"));
    }
    let mut baseline = RewardBaseline::new(cfg.baseline_enabled, cfg.baseline_decay);
    let mut cursor = BatchCursor::new(pairs.len());
    let mut stats = Vec::with_capacity(cfg.rl_iterations);
    for iteration in 1..=cfg.rl_iterations {
        let batch = cursor.next(cfg.batch, rng);
        let sampled: Vec<Skeleton> = batch
            .iter()
            .map(|&i| {
                skeleton_for(
                    &pairs[i],
                    extractor,
                    DecodeMode::Sample,
                    cfg.max_skeleton_len,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let supervised: Vec<Skeleton> = match cfg.skeleton_source {
            SkeletonSource::Sample => sampled.clone(),
            SkeletonSource::Greedy => batch
                .iter()
                .map(|&i| {
                    skeleton_for(
                        &pairs[i],
                        extractor,
                        DecodeMode::Greedy,
                        cfg.max_skeleton_len,
                        rng,
                    )
                })
                .collect::<Result<_>>()?,
        };

        let e_print = extractor.params().fingerprint();
        let triples: Vec<_> = batch.iter().map(|&i| &pairs[i]).zip(&supervised).collect();
        let (mut q_losses, mut d_losses) = (Vec::new(), Vec::new());
        for _ in 0..cfg.g_steps_per_iteration {
            (q_losses, d_losses) = generator.step(&triples)?;
        }
        if extractor.params().fingerprint() != e_print {
            return Err(TrainerError::OwnershipViolation("extractor"));
        }

        let mut inputs = Vec::new();
        let mut skeletons = Vec::new();
        let mut records = Vec::new();
        for (k, &i) in batch.iter().enumerate() {
            let pair = &pairs[i];
            if pair.story_end {
                continue;
            }
            let (r1, r2) = if cfg.skeleton_source == SkeletonSource::Sample {
                (q_losses[k], d_losses[k])
            } else {
                (
                    generator.i2s.i2s_loss(&pair.context, &sampled[k])?,
                    generator.s2s.s2s_loss(&sampled[k], &pair.sentence)?,
                )
            };
            records.push(RewardRecord::new(r1, r2, cfg.reward_k)?);
            inputs.push(pair.sentence.clone());
            skeletons.push(sampled[k].clone());
        }
        if records.is_empty() {
            continue;
        }
        let rewards: Vec<f64> = records.iter().map(|r| r.rc).collect();
        let g_prints = (
            generator.i2s.params().fingerprint(),
            generator.s2s.params().fingerprint(),
        );
        policy_gradient_step(
            extractor,
            e_opt,
            &inputs,
            &skeletons,
            &rewards,
            &mut baseline,
        )?;
        if (
            generator.i2s.params().fingerprint(),
            generator.s2s.params().fingerprint(),
        ) != g_prints
        {
            return Err(TrainerError::OwnershipViolation("generative module"));
        }

        let it = IterationStats {
            iteration,
            r1: mean(&records.iter().map(|r| r.r1).collect::<Vec<_>>()),
            r2: mean(&records.iter().map(|r| r.r2).collect::<Vec<_>>()),
            rc: mean(&rewards),
        };
        let mut record = MetricsRecord::new(Phase::Reinforce, iteration);
        record.i2s_loss = Some(mean(&q_losses));
        record.s2s_loss = Some(mean(&d_losses));
        record.r1 = Some(it.r1);
        record.r2 = Some(it.r2);
        record.rc = Some(it.rc);
        log::debug!("iteration {iteration}: R_c {:.4}", it.rc);
        log.push(record)?;
        stats.push(it);
    }
    Ok(stats)
}

/// Generative pretraining from a fresh initialization on greedy skeletons
/// of a fixed extractor, drawing on its own random stream.
pub fn pretrain_generator(
    extractor: &Extractor,
    pairs: &[StoryPair],
    vocab_len: usize,
    cfg: &TrainingConfig,
    log: &mut MetricsLog,
) -> Result<(Generator, Vec<GenerativeEpoch>)> {
    let mut rng = stage_rng(cfg.seed, Stage::GenerativePretrain);
    let mut generator = Generator::init(cfg, vocab_len, &mut rng);
    let pre_cfg = TrainingConfig {
        skeleton_source: SkeletonSource::Greedy,
        ..cfg.clone()
    };
    let curve = train_generative(
        &mut generator,
        extractor,
        pairs,
        cfg.generative_pretrain_epochs,
        &pre_cfg,
        &mut rng,
        log,
    )?;
    Ok((generator, curve))
}

/// Every trained component plus the curves produced along the way.
pub struct TrainedModels {
    pub extractor: Extractor,
    pub i2s: InputToSkeleton,
    pub s2s: SkeletonToSentence,
    pub extractor_curve: LossCurve,
    pub generative_curve: Vec<GenerativeEpoch>,
    pub rewards: Vec<IterationStats>,
}

/// The whole pipeline: extractor pretraining, generative pretraining on
/// greedy skeletons from the pretrained extractor, then the reinforcement
/// loop. Optimizer state carries over from each pretraining stage into
/// the loop.
pub fn joint_train(
    stories: &[EncodedStory],
    compression_train: &[EncodedPair],
    compression_valid: &[EncodedPair],
    vocab_len: usize,
    cfg: &TrainingConfig,
    log: &mut MetricsLog,
) -> Result<TrainedModels> {
    cfg.validate()?;
    let mut rng = stage_rng(cfg.seed, Stage::ExtractorPretrain);
    let mut extractor = init_extractor(cfg, vocab_len, &mut rng);
    let mut e_opt = ComponentOptimizer::new(extractor.params(), cfg);
    let extractor_curve = pretrain_extractor(
        &mut extractor,
        &mut e_opt,
        compression_train,
        compression_valid,
        cfg,
        &mut rng,
        log,
    )?;

    let pairs = all_pairs(stories);
    let (mut generator, generative_curve) =
        pretrain_generator(&extractor, &pairs, vocab_len, cfg, log)?;

    let mut rng = stage_rng(cfg.seed, Stage::Reinforce);
    let rewards = reinforce(
        &mut extractor,
        &mut e_opt,
        &mut generator,
        &pairs,
        cfg,
        &mut rng,
        log,
    )?;
    let (i2s, s2s) = generator.into_parts();
    Ok(TrainedModels {
        extractor,
        i2s,
        s2s,
        extractor_curve,
        generative_curve,
        rewards,
    })
}
