//! The skeleton extractor, the input-to-skeleton and skeleton-to-sentence
//! components, and the sentence-by-sentence story loop.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::layers::{self, DecoderParams, DecoderSession, EncodedContext, LayerError, LstmParams};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::{Tensor, TensorError};
use crate::vocab::{TokenId, BOS, EOS, EOS_STORY, PAD};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("{kind:?} component cannot encode this kind of source")]
    WrongSource { kind: ComponentKind },
    #[error("parameter set does not describe a {0:?} component")]
    BadLayout(ComponentKind),
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        Self::Layer(LayerError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComponentKind {
    Extractor,
    InputToSkeleton,
    SkeletonToSentence,
}

impl ComponentKind {
    pub fn hierarchical(self) -> bool {
        self == Self::InputToSkeleton
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub embedding: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Sample,
}

/// What a component conditions on.
#[derive(Debug, Clone, Copy)]
pub enum Source<'a> {
    Sequence(&'a [TokenId]),
    Context(&'a [Vec<TokenId>]),
}

#[derive(Debug, Clone, PartialEq)]
enum Encoder {
    Flat(LstmParams),
    Hierarchical {
        word: LstmParams,
        sentence: LstmParams,
    },
}

/// Output of a free-running decode.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<TokenId>,
    /// Sum of the model's log-probabilities of the emitted tokens, plus the
    /// end symbol when `terminated`.
    pub log_prob: f64,
    pub terminated: bool,
}

/// An attentional encoder-decoder with a private embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq {
    kind: ComponentKind,
    params: ParamSet,
    embedding: ParamId,
    encoder: Encoder,
    decoder: DecoderParams,
}

impl Seq2Seq {
    pub fn new<R: Rng + ?Sized>(
        kind: ComponentKind,
        dims: ModelDims,
        init_range: f64,
        rng: &mut R,
    ) -> Self {
        let mut params = ParamSet::new();
        let embedding =
            params.push_uniform("embedding", &[dims.vocab, dims.embedding], init_range, rng);
        let encoder = if kind.hierarchical() {
            let word = LstmParams::init(
                &mut params,
                "encoder.word",
                dims.embedding,
                dims.hidden,
                init_range,
                rng,
            );
            let sentence = LstmParams::init(
                &mut params,
                "encoder.sentence",
                dims.hidden,
                dims.hidden,
                init_range,
                rng,
            );
            Encoder::Hierarchical { word, sentence }
        } else {
            Encoder::Flat(LstmParams::init(
                &mut params,
                "encoder",
                dims.embedding,
                dims.hidden,
                init_range,
                rng,
            ))
        };
        let decoder = DecoderParams::init(
            &mut params,
            "decoder",
            embedding,
            dims.hidden,
            init_range,
            rng,
        );
        Self {
            kind,
            params,
            embedding,
            encoder,
            decoder,
        }
    }

    /// Rebuilds the layout from a named parameter set (e.g. a checkpoint).
    pub fn from_params(kind: ComponentKind, params: ParamSet) -> Result<Self> {
        let bad = |_| ModelError::BadLayout(kind);
        let embedding = params
            .find("embedding")
            .ok_or(ModelError::BadLayout(kind))?;
        if params.get(embedding).shape().len() != 2 {
            return Err(ModelError::BadLayout(kind));
        }
        let emb_dim = params.get(embedding).shape()[1];
        let encoder = if kind.hierarchical() {
            let word = LstmParams::from_set(&params, "encoder.word").map_err(bad)?;
            let sentence = LstmParams::from_set(&params, "encoder.sentence").map_err(bad)?;
            if word.input != emb_dim || sentence.input != word.hidden {
                return Err(ModelError::BadLayout(kind));
            }
            Encoder::Hierarchical { word, sentence }
        } else {
            if params.find("encoder.sentence.w_ih").is_some() {
                return Err(ModelError::BadLayout(kind));
            }
            let lstm = LstmParams::from_set(&params, "encoder").map_err(bad)?;
            if lstm.input != emb_dim {
                return Err(ModelError::BadLayout(kind));
            }
            Encoder::Flat(lstm)
        };
        let decoder = DecoderParams::from_set(&params, "decoder", embedding).map_err(bad)?;
        if decoder.lstm.hidden != self_hidden(&encoder) {
            return Err(ModelError::BadLayout(kind));
        }
        let expected = if kind.hierarchical() {
            1 + 3 + 3 + 3 + 3 + 2
        } else {
            1 + 3 + 3 + 3 + 2
        };
        if params.len() != expected {
            return Err(ModelError::BadLayout(kind));
        }
        Ok(Self {
            kind,
            params,
            embedding,
            encoder,
            decoder,
        })
    }

    pub fn kind(&self) -> ComponentKind {
        self.kind
    }

    pub fn dims(&self) -> ModelDims {
        let shape = self.params.get(self.embedding).shape();
        ModelDims {
            vocab: shape[0],
            embedding: shape[1],
            hidden: self.decoder.lstm.hidden,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    pub fn encode(&self, tape: &mut Tape, bound: &Bound, source: Source) -> Result<EncodedContext> {
        match (&self.encoder, source) {
            (Encoder::Flat(p), Source::Sequence(tokens)) => {
                if tokens.is_empty() {
                    return Err(ModelError::Empty("source sequence"));
                }
                Ok(layers::encode_sequence(
                    tape,
                    bound,
                    self.embedding,
                    p,
                    tokens,
                )?)
            }
            (Encoder::Hierarchical { word, sentence }, Source::Context(sentences)) => {
                if sentences.is_empty() {
                    return Err(ModelError::Empty("story context"));
                }
                Ok(layers::hierarchical_encode(
                    tape,
                    bound,
                    self.embedding,
                    word,
                    sentence,
                    sentences,
                )?)
            }
            _ => Err(ModelError::WrongSource { kind: self.kind }),
        }
    }

    /// Log-probability vectors for each position when the decoder is fed
    /// `BOS` followed by `prefix`.
    pub fn step_log_probs(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        source: Source,
        prefix: &[TokenId],
    ) -> Result<Vec<Var>> {
        let ctx = self.encode(tape, bound, source)?;
        let mut session = DecoderSession::start(tape, bound, self.decoder, &ctx)?;
        let mut out = Vec::with_capacity(prefix.len() + 1);
        let mut prev = BOS;
        for &tok in prefix.iter().chain(std::iter::once(&EOS)) {
            out.push(session.step(tape, prev)?);
            prev = tok;
        }
        Ok(out)
    }

    /// Teacher-forced per-token mean NLL of `target` followed by the end
    /// symbol.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        source: Source,
        target: &[TokenId],
    ) -> Result<Var> {
        if target.is_empty() {
            return Err(ModelError::Empty("target sequence"));
        }
        let steps = self.step_log_probs(tape, bound, source, target)?;
        let stacked = tape.stack(&steps)?;
        let mut gold = target.to_vec();
        gold.push(EOS);
        Ok(tape.nll_loss(stacked, &gold)?)
    }

    /// Scalar `log P(tokens | source)` on the tape, optionally including the
    /// terminating end symbol.
    pub fn log_prob_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        source: Source,
        tokens: &[TokenId],
        include_eos: bool,
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(ModelError::Empty("scored sequence"));
        }
        let steps = self.step_log_probs(tape, bound, source, tokens)?;
        let mut targets = tokens.to_vec();
        if include_eos {
            targets.push(EOS);
        }
        let stacked = tape.stack(&steps[..targets.len()])?;
        let nll = tape.nll_loss(stacked, &targets)?;
        Ok(tape.scale(nll, -(targets.len() as f64))?)
    }

    pub fn loss(&self, source: Source, target: &[TokenId]) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let l = self.loss_on_tape(&mut tape, &bound, source, target)?;
        Ok(tape.scalar(l))
    }

    /// Loss value and its gradient for every parameter, in parameter order.
    pub fn loss_and_grads(&self, source: Source, target: &[TokenId]) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let l = self.loss_on_tape(&mut tape, &bound, source, target)?;
        let value = tape.scalar(l);
        let mut grads = tape.backward(l)?;
        Ok((value, bound.grads(&mut grads)))
    }

    pub fn sequence_log_prob(
        &self,
        source: Source,
        tokens: &[TokenId],
        include_eos: bool,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let lp = self.log_prob_on_tape(&mut tape, &bound, source, tokens, include_eos)?;
        Ok(tape.scalar(lp))
    }

    /// Free-running decode. Padding and `BOS` are never emitted and the end
    /// symbol is masked at the first step, so the output is nonempty.
    /// Greedy ties go to the lowest token id. Sampling uses temperature 1.
    pub fn decode(
        &self,
        source: Source,
        mode: DecodeMode,
        max_len: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Decoded> {
        assert!(max_len >= 1, "max_len must be positive");
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let ctx = self.encode(&mut tape, &bound, source)?;
        let mut session = DecoderSession::start(&mut tape, &bound, self.decoder, &ctx)?;
        let mut prev = BOS;
        let mut tokens = Vec::new();
        let mut log_prob = 0.0;
        let mut terminated = false;
        for step in 0..max_len {
            let lp_var = session.step(&mut tape, prev)?;
            let lp = tape.value(lp_var);
            let allowed = |id: TokenId| id != PAD && id != BOS && !(step == 0 && id == EOS);
            let next = match mode {
                DecodeMode::Greedy => argmax_masked(lp, allowed),
                DecodeMode::Sample => sample_masked(lp, allowed, rng),
            };
            log_prob += lp[next];
            if next == EOS {
                terminated = true;
                break;
            }
            tokens.push(next);
            prev = next;
        }
        Ok(Decoded {
            tokens,
            log_prob,
            terminated,
        })
    }
}

fn self_hidden(encoder: &Encoder) -> usize {
    match encoder {
        Encoder::Flat(p) => p.hidden,
        Encoder::Hierarchical { sentence, .. } => sentence.hidden,
    }
}

fn argmax_masked(lp: &[f64], allowed: impl Fn(TokenId) -> bool) -> TokenId {
    let mut best = None;
    for (id, &v) in lp.iter().enumerate() {
        if !allowed(id) {
            continue;
        }
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((id, v)),
        }
    }
    best.expect("vocabulary has an allowed token").0
}

fn sample_masked(lp: &[f64], allowed: impl Fn(TokenId) -> bool, rng: &mut dyn RngCore) -> TokenId {
    // Shift by the largest allowed log-prob so that masking a dominant
    // token cannot underflow every remaining probability to zero.
    let top = lp[argmax_masked(lp, &allowed)];
    let probs: Vec<f64> = lp
        .iter()
        .enumerate()
        .map(|(id, &v)| if allowed(id) { (v - top).exp() } else { 0.0 })
        .collect();
    let total: f64 = probs.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last = None;
    for (id, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last = Some(id);
        if u < p {
            return id;
        }
        u -= p;
    }
    last.expect("vocabulary has an allowed token")
}

/// Key-phrase token sequence of one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Skeleton {
    pub tokens: Vec<TokenId>,
    /// Whether the decoder emitted the end symbol (rather than hitting the
    /// length cap).
    pub terminated: bool,
}

impl Skeleton {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self {
            tokens,
            terminated: true,
        }
    }

    pub fn story_end() -> Self {
        Self::new(vec![EOS_STORY])
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Fraction of skeleton tokens that also occur in `source`.
pub fn copy_rate(skeleton: &[TokenId], source: &[TokenId]) -> f64 {
    if skeleton.is_empty() {
        return 0.0;
    }
    let hits = skeleton.iter().filter(|t| source.contains(t)).count();
    hits as f64 / skeleton.len() as f64
}

/// The source input plus every sentence produced or observed so far.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoryContext {
    sentences: Vec<Vec<TokenId>>,
}

impl StoryContext {
    pub fn new(sentences: Vec<Vec<TokenId>>) -> Result<Self> {
        if sentences.is_empty() {
            return Err(ModelError::Empty("story context"));
        }
        if sentences.iter().any(Vec::is_empty) {
            return Err(ModelError::Empty("context sentence"));
        }
        Ok(Self { sentences })
    }

    pub fn sentences(&self) -> &[Vec<TokenId>] {
        &self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn push(&mut self, sentence: Vec<TokenId>) -> Result<()> {
        if sentence.is_empty() {
            return Err(ModelError::Empty("context sentence"));
        }
        self.sentences.push(sentence);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationLimits {
    pub max_sentence_len: usize,
    pub max_skeleton_len: usize,
    pub max_story_sentences: usize,
}

impl Default for GenerationLimits {
    fn default() -> Self {
        Self {
            max_sentence_len: 40,
            max_skeleton_len: 40,
            max_story_sentences: 6,
        }
    }
}

macro_rules! component {
    ($name:ident, $kind:expr) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(Seq2Seq);

        impl $name {
            pub fn new<R: Rng + ?Sized>(dims: ModelDims, init_range: f64, rng: &mut R) -> Self {
                Self(Seq2Seq::new($kind, dims, init_range, rng))
            }

            pub fn from_params(params: ParamSet) -> Result<Self> {
                Seq2Seq::from_params($kind, params).map(Self)
            }

            pub fn model(&self) -> &Seq2Seq {
                &self.0
            }

            pub fn model_mut(&mut self) -> &mut Seq2Seq {
                &mut self.0
            }

            pub fn params(&self) -> &ParamSet {
                self.0.params()
            }

            pub fn params_mut(&mut self) -> &mut ParamSet {
                self.0.params_mut()
            }
        }
    };
}

component!(Extractor, ComponentKind::Extractor);
component!(InputToSkeleton, ComponentKind::InputToSkeleton);
component!(SkeletonToSentence, ComponentKind::SkeletonToSentence);

impl Extractor {
    /// Teacher-forced mean NLL of the compression `s` given sentence `x`.
    pub fn extractor_loss(&self, x: &[TokenId], s: &[TokenId]) -> Result<f64> {
        if x.is_empty() {
            return Err(ModelError::Empty("extractor input"));
        }
        self.0.loss(Source::Sequence(x), s)
    }

    /// Returns the skeleton and `Σ_t log P_E(s_t | x, s_<t)` under the
    /// unmasked model distribution.
    pub fn extract_skeleton(
        &self,
        x: &[TokenId],
        mode: DecodeMode,
        max_len: usize,
        rng: &mut dyn RngCore,
    ) -> Result<(Skeleton, f64)> {
        let d = self.0.decode(Source::Sequence(x), mode, max_len, rng)?;
        Ok((
            Skeleton {
                tokens: d.tokens,
                terminated: d.terminated,
            },
            d.log_prob,
        ))
    }

    /// Teacher-forced rescoring of an extracted skeleton.
    pub fn skeleton_log_prob(&self, x: &[TokenId], s: &Skeleton) -> Result<f64> {
        self.0
            .sequence_log_prob(Source::Sequence(x), &s.tokens, s.terminated)
    }
}

impl InputToSkeleton {
    pub fn i2s_loss(&self, c: &StoryContext, s: &Skeleton) -> Result<f64> {
        self.0.loss(Source::Context(c.sentences()), &s.tokens)
    }
}

impl SkeletonToSentence {
    pub fn s2s_loss(&self, s: &Skeleton, y: &[TokenId]) -> Result<f64> {
        if s.is_empty() {
            return Err(ModelError::Empty("skeleton"));
        }
        self.0.loss(Source::Sequence(&s.tokens), y)
    }
}

/// Greedy skeleton from the context, then a greedy sentence from the skeleton.
pub fn generate_sentence(
    c: &StoryContext,
    q: &InputToSkeleton,
    d: &SkeletonToSentence,
    limits: &GenerationLimits,
) -> Result<(Skeleton, Vec<TokenId>)> {
    let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
    let sk = q.model().decode(
        Source::Context(c.sentences()),
        DecodeMode::Greedy,
        limits.max_skeleton_len,
        &mut no_rng,
    )?;
    let skeleton = Skeleton {
        tokens: sk.tokens,
        terminated: sk.terminated,
    };
    let sent = d.model().decode(
        Source::Sequence(&skeleton.tokens),
        DecodeMode::Greedy,
        limits.max_sentence_len,
        &mut no_rng,
    )?;
    Ok((skeleton, sent.tokens))
}

/// One iteration of the story loop.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedStep {
    pub context_len: usize,
    pub skeleton: Skeleton,
    pub sentence: Vec<TokenId>,
}

/// Runs the story loop and reports every step, including the final one
/// that produced the story-end symbol.
pub fn generate_story_traced(
    input: &[TokenId],
    q: &InputToSkeleton,
    d: &SkeletonToSentence,
    limits: &GenerationLimits,
) -> Result<Vec<GeneratedStep>> {
    if input.is_empty() {
        return Err(ModelError::Empty("story input"));
    }
    let mut context = StoryContext::new(vec![input.to_vec()])?;
    let mut steps = Vec::new();
    let mut produced = 0;
    while produced < limits.max_story_sentences {
        let (skeleton, sentence) = generate_sentence(&context, q, d, limits)?;
        let ended = sentence.first() == Some(&EOS_STORY);
        steps.push(GeneratedStep {
            context_len: context.len(),
            skeleton,
            sentence: sentence.clone(),
        });
        if ended {
            break;
        }
        context.push(sentence)?;
        produced += 1;
    }
    Ok(steps)
}

/// Generated sentences, excluding the story-end marker.
pub fn generate_story(
    input: &[TokenId],
    q: &InputToSkeleton,
    d: &SkeletonToSentence,
    limits: &GenerationLimits,
) -> Result<Vec<Vec<TokenId>>> {
    Ok(generate_story_traced(input, q, d, limits)?
        .into_iter()
        .filter(|s| s.sentence.first() != Some(&EOS_STORY))
        .map(|s| s.sentence)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ModelDims {
        ModelDims {
            vocab: 12,
            embedding: 4,
            hidden: 5,
        }
    }

    #[test]
    fn layout_round_trips_through_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [
            ComponentKind::Extractor,
            ComponentKind::InputToSkeleton,
            ComponentKind::SkeletonToSentence,
        ] {
            let m = Seq2Seq::new(kind, dims(), 0.08, &mut rng);
            let rebuilt = Seq2Seq::from_params(kind, m.params().clone()).unwrap();
            assert_eq!(rebuilt, m);
            assert_eq!(rebuilt.dims(), dims());
        }
        let flat = Seq2Seq::new(ComponentKind::Extractor, dims(), 0.08, &mut rng);
        assert!(Seq2Seq::from_params(ComponentKind::InputToSkeleton, flat.into_params()).is_err());
    }

    #[test]
    fn wrong_source_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = Extractor::new(dims(), 0.08, &mut rng);
        let ctx = vec![vec![5, 6]];
        assert!(matches!(
            e.model().loss(Source::Context(&ctx), &[5]),
            Err(ModelError::WrongSource { .. })
        ));
        assert!(e.extractor_loss(&[], &[5]).is_err());
        assert!(e.extractor_loss(&[5], &[]).is_err());
    }

    #[test]
    fn greedy_is_deterministic_and_sampling_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = Extractor::new(dims(), 0.5, &mut rng);
        let x = [5, 6, 7, 8];
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let a = e
            .extract_skeleton(&x, DecodeMode::Greedy, 10, &mut r)
            .unwrap();
        let b = e
            .extract_skeleton(&x, DecodeMode::Greedy, 10, &mut r)
            .unwrap();
        assert_eq!(a, b);
        let s1 = e
            .extract_skeleton(
                &x,
                DecodeMode::Sample,
                10,
                &mut ChaCha8Rng::seed_from_u64(11),
            )
            .unwrap();
        let s2 = e
            .extract_skeleton(
                &x,
                DecodeMode::Sample,
                10,
                &mut ChaCha8Rng::seed_from_u64(11),
            )
            .unwrap();
        assert_eq!(s1, s2);
        assert!(!s1.0.is_empty());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_masked(&[0.0, 1.0, 1.0], |_| true), 1);
        assert_eq!(argmax_masked(&[0.0, 1.0, 1.0], |i| i != 1), 2);
    }

    #[test]
    fn story_context_validation() {
        assert!(StoryContext::new(vec![]).is_err());
        assert!(StoryContext::new(vec![vec![5], vec![]]).is_err());
        let mut c = StoryContext::new(vec![vec![5]]).unwrap();
        assert!(c.push(vec![]).is_err());
        c.push(vec![6]).unwrap();
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn copy_rate_counts_source_tokens() {
        assert_eq!(copy_rate(&[5, 6, 9], &[5, 6, 7]), 2.0 / 3.0);
        assert_eq!(copy_rate(&[], &[5]), 0.0);
    }
}
