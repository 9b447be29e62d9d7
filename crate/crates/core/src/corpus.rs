//! Tokenization, corpus loading and validation, and construction of the
//! (context, skeleton, sentence) training triples.

use std::fs;
use std::io;
use std::path::Path;

use rand::RngCore;
use serde::Deserialize;
use thiserror::Error;

use crate::models::{DecodeMode, Extractor, ModelError, Skeleton, StoryContext};
use crate::vocab::{TokenId, Vocabulary, EOS_STORY};

pub const MAX_SENTENCE_TOKENS: usize = 40;
pub const MAX_STORY_SENTENCES: usize = 6;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("line {line}: malformed story record: {reason}")]
    MalformedStory { line: usize, reason: String },
    #[error("line {line}: expected two tab-separated columns")]
    MissingField { line: usize },
}

/// Lowercases, splits on whitespace, and makes every punctuation character
/// its own token. Bracketed placeholders such as `[male]` stay whole;
/// apostrophes between letters stay inside the word.
pub fn tokenize(raw: &str) -> Vec<String> {
    let chars: Vec<char> = raw.to_lowercase().chars().collect();
    let mut out = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut Vec<String>| {
        if !word.is_empty() {
            out.push(std::mem::take(word));
        }
    };
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            flush(&mut word, &mut out);
        } else if c.is_alphanumeric()
            || (c == '\''
                && !word.is_empty()
                && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric()))
        {
            word.push(c);
        } else if c == '[' {
            let close = chars[i + 1..].iter().position(|&n| n == ']');
            match close {
                Some(len)
                    if len > 0
                        && chars[i + 1..i + 1 + len]
                            .iter()
                            .all(|n| n.is_alphanumeric() || *n == '_') =>
                {
                    flush(&mut word, &mut out);
                    out.push(chars[i..i + len + 2].iter().collect());
                    i += len + 2;
                    continue;
                }
                _ => {
                    flush(&mut word, &mut out);
                    out.push(c.to_string());
                }
            }
        } else {
            flush(&mut word, &mut out);
            out.push(c.to_string());
        }
        i += 1;
    }
    flush(&mut word, &mut out);
    out
}

/// One story split into its opening sentence and the continuation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoryExample {
    pub input: Vec<String>,
    pub targets: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StoryCorpus {
    pub stories: Vec<StoryExample>,
    /// Records with fewer than two nonempty sentences.
    pub skipped_short: usize,
    pub truncated_sentences: usize,
    /// Sentences beyond the sixth, dropped.
    pub dropped_sentences: usize,
    pub empty_sentences: usize,
}

#[derive(Deserialize)]
struct StoryRecord {
    story: Vec<String>,
}

fn read(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses line-delimited `{"story": [sentence, ...]}` records.
pub fn parse_story_corpus(text: &str) -> Result<StoryCorpus, CorpusError> {
    let mut corpus = StoryCorpus::default();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: StoryRecord =
            serde_json::from_str(line).map_err(|e| CorpusError::MalformedStory {
                line: n + 1,
                reason: e.to_string(),
            })?;
        let mut sentences = Vec::new();
        for raw in &record.story {
            let mut toks = tokenize(raw);
            if toks.is_empty() {
                corpus.empty_sentences += 1;
                continue;
            }
            if toks.len() > MAX_SENTENCE_TOKENS {
                toks.truncate(MAX_SENTENCE_TOKENS);
                corpus.truncated_sentences += 1;
            }
            sentences.push(toks);
        }
        if sentences.len() < 2 {
            corpus.skipped_short += 1;
            continue;
        }
        if sentences.len() > MAX_STORY_SENTENCES {
            corpus.dropped_sentences += sentences.len() - MAX_STORY_SENTENCES;
            sentences.truncate(MAX_STORY_SENTENCES);
        }
        let mut it = sentences.into_iter();
        let input = it.next().expect("at least two sentences");
        corpus.stories.push(StoryExample {
            input,
            targets: it.collect(),
        });
    }
    if corpus.skipped_short > 0 {
        log::warn!(
            "skipped {} stories with fewer than two sentences",
            corpus.skipped_short
        );
    }
    Ok(corpus)
}

pub fn load_story_corpus(path: &Path) -> Result<StoryCorpus, CorpusError> {
    parse_story_corpus(&read(path)?)
}

/// A sentence and an order-preserving compression of it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressionPair {
    pub original: Vec<String>,
    pub compressed: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CompressionCorpus {
    pub pairs: Vec<CompressionPair>,
    /// Compressions that are not subsequences of their original.
    pub order_violations: usize,
    pub empty_compressions: usize,
}

/// Two-pointer check that `needle` appears in `hay` in order.
pub fn is_subsequence<T: PartialEq>(needle: &[T], hay: &[T]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == n))
}

/// Parses `original<TAB>compressed` lines.
pub fn parse_compression_corpus(text: &str) -> Result<CompressionCorpus, CorpusError> {
    let mut corpus = CompressionCorpus::default();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(orig), Some(comp), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(CorpusError::MissingField { line: n + 1 });
        };
        let original = tokenize(orig);
        let compressed = tokenize(comp);
        if compressed.is_empty() || original.is_empty() {
            corpus.empty_compressions += 1;
            continue;
        }
        if !is_subsequence(&compressed, &original) {
            corpus.order_violations += 1;
            continue;
        }
        corpus.pairs.push(CompressionPair {
            original,
            compressed,
        });
    }
    if corpus.order_violations > 0 {
        log::warn!(
            "excluded {} compressions that are not subsequences",
            corpus.order_violations
        );
    }
    Ok(corpus)
}

pub fn load_compression_corpus(path: &Path) -> Result<CompressionCorpus, CorpusError> {
    parse_compression_corpus(&read(path)?)
}

/// Vocabulary over story sentences and compression pairs together.
pub fn build_vocab(
    stories: &[StoryExample],
    compression: &[CompressionPair],
    max_size: usize,
) -> Vocabulary {
    let story_sents = stories
        .iter()
        .flat_map(|s| std::iter::once(&s.input).chain(&s.targets))
        .map(Vec::as_slice);
    let comp_sents = compression
        .iter()
        .flat_map(|p| [p.original.as_slice(), p.compressed.as_slice()]);
    Vocabulary::build(story_sents.chain(comp_sents), max_size)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedStory {
    pub input: Vec<TokenId>,
    pub targets: Vec<Vec<TokenId>>,
}

impl EncodedStory {
    pub fn new(example: &StoryExample, vocab: &Vocabulary) -> Self {
        Self {
            input: vocab.encode(&example.input),
            targets: example.targets.iter().map(|t| vocab.encode(t)).collect(),
        }
    }

    pub fn sentences(&self) -> impl Iterator<Item = &Vec<TokenId>> {
        std::iter::once(&self.input).chain(&self.targets)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub original: Vec<TokenId>,
    pub compressed: Vec<TokenId>,
}

impl EncodedPair {
    pub fn new(pair: &CompressionPair, vocab: &Vocabulary) -> Self {
        Self {
            original: vocab.encode(&pair.original),
            compressed: vocab.encode(&pair.compressed),
        }
    }
}

/// A gold next sentence and the story so far.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoryPair {
    pub context: StoryContext,
    pub sentence: Vec<TokenId>,
    /// The sentence is the story-end marker; its skeleton is fixed.
    pub story_end: bool,
}

/// Every (context, next sentence) pair of a story, followed by the pair
/// whose target is the story-end marker.
pub fn story_pairs(story: &EncodedStory) -> Vec<StoryPair> {
    let mut out = Vec::with_capacity(story.targets.len() + 1);
    let mut sentences = vec![story.input.clone()];
    for t in &story.targets {
        out.push(StoryPair {
            context: StoryContext::new(sentences.clone()).expect("sentences are nonempty"),
            sentence: t.clone(),
            story_end: false,
        });
        sentences.push(t.clone());
    }
    out.push(StoryPair {
        context: StoryContext::new(sentences).expect("sentences are nonempty"),
        sentence: vec![EOS_STORY],
        story_end: true,
    });
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingTriple {
    pub context: StoryContext,
    pub skeleton: Skeleton,
    pub sentence: Vec<TokenId>,
}

/// One triple per target: the gold prefix of the story as context and the
/// extractor's skeleton of the gold target.
pub fn make_training_triples(
    story: &EncodedStory,
    extractor: &Extractor,
    mode: DecodeMode,
    max_skeleton_len: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<TrainingTriple>, ModelError> {
    story_pairs(story)
        .into_iter()
        .filter(|p| !p.story_end)
        .map(|p| {
            let (skeleton, _) =
                extractor.extract_skeleton(&p.sentence, mode, max_skeleton_len, rng)?;
            Ok(TrainingTriple {
                context: p.context,
                skeleton,
                sentence: p.sentence,
            })
        })
        .collect()
}
