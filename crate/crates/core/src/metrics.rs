//! Automatic evaluation: corpus BLEU over stop-word-filtered text, distinct
//! n-gram ratios, and the unseen ratio of an input against training data.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_MAX_N: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{candidates} candidates but {references} reference sets")]
    LengthMismatch {
        candidates: usize,
        references: usize,
    },
    #[error("max n-gram order must be at least 1")]
    ZeroOrder,
    #[error("candidate {0} has no references")]
    NoReferences(usize),
    #[error("input sentence is empty")]
    EmptyInput,
}

/// English function words removed before BLEU is computed.
const STOP_WORDS_V1: &[&str] = &[
    "a",
    "about",
    "above",
    "after",
    "again",
    "against",
    "all",
    "am",
    "an",
    "and",
    "any",
    "are",
    "as",
    "at",
    "be",
    "because",
    "been",
    "before",
    "being",
    "below",
    "between",
    "both",
    "but",
    "by",
    "can",
    "could",
    "did",
    "do",
    "does",
    "doing",
    "down",
    "during",
    "each",
    "few",
    "for",
    "from",
    "further",
    "had",
    "has",
    "have",
    "having",
    "he",
    "her",
    "here",
    "hers",
    "herself",
    "him",
    "himself",
    "his",
    "how",
    "i",
    "if",
    "in",
    "into",
    "is",
    "it",
    "it's",
    "its",
    "itself",
    "just",
    "me",
    "more",
    "most",
    "my",
    "myself",
    "no",
    "nor",
    "not",
    "now",
    "of",
    "off",
    "on",
    "once",
    "only",
    "or",
    "other",
    "our",
    "ours",
    "ourselves",
    "out",
    "over",
    "own",
    "same",
    "she",
    "should",
    "so",
    "some",
    "such",
    "than",
    "that",
    "the",
    "their",
    "theirs",
    "them",
    "themselves",
    "then",
    "there",
    "these",
    "they",
    "this",
    "those",
    "through",
    "to",
    "too",
    "under",
    "until",
    "up",
    "very",
    "was",
    "we",
    "were",
    "what",
    "when",
    "where",
    "which",
    "while",
    "who",
    "whom",
    "why",
    "will",
    "with",
    "would",
    "you",
    "your",
    "yours",
    "yourself",
    "yourselves",
    "also",
    "may",
    "might",
    "must",
    "shall",
    "us",
    "upon",
    "yet",
    "ever",
    "every",
    "many",
    "much",
    "whose",
    "whether",
    "within",
    "without",
    "onto",
    "across",
    "along",
    "among",
];

/// A fixed, versioned set of lowercase stop words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopWordList {
    version: &'static str,
    words: HashSet<String>,
}

impl Default for StopWordList {
    fn default() -> Self {
        Self::english_v1()
    }
}

impl StopWordList {
    pub fn english_v1() -> Self {
        Self {
            version: "english-v1",
            words: STOP_WORDS_V1.iter().map(|w| w.to_string()).collect(),
        }
    }

    /// No filtering at all.
    pub fn empty() -> Self {
        Self {
            version: "none",
            words: HashSet::new(),
        }
    }

    pub fn version(&self) -> &str {
        self.version
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.words.contains(&token.to_lowercase())
    }

    pub fn filter<'a, S: AsRef<str>>(&self, tokens: &'a [S]) -> Vec<&'a str> {
        tokens
            .iter()
            .map(AsRef::as_ref)
            .filter(|t| !self.contains(t))
            .collect()
    }
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BleuReport {
    /// Modified precision per order, `precisions[n - 1]` for order n.
    pub precisions: Vec<f64>,
    /// Clipped n-gram matches per order.
    pub matches: Vec<usize>,
    /// Candidate n-gram totals per order.
    pub totals: Vec<usize>,
    pub candidate_length: usize,
    pub reference_length: usize,
    pub brevity_penalty: f64,
    pub score: f64,
}

fn assemble(matches: Vec<usize>, totals: Vec<usize>, bp: f64, c: usize, r: usize) -> BleuReport {
    let precisions: Vec<f64> = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / precisions.len() as f64;
        bp * mean_log.exp()
    };
    BleuReport {
        precisions,
        matches,
        totals,
        candidate_length: c,
        reference_length: r,
        brevity_penalty: bp,
        score,
    }
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Corpus-level BLEU with uniform weights up to `max_n`.
///
/// Each candidate may have several references; n-gram counts are clipped by
/// the maximum count in any single reference, and the reference length is
/// the one closest to the candidate (shorter wins ties). There is no
/// smoothing: any zero precision makes the score 0, and so does an empty
/// candidate side, whose precisions are all 0.
pub fn bleu<S: AsRef<str>>(
    candidates: &[Vec<S>],
    references: &[Vec<Vec<S>>],
    max_n: usize,
    stopwords: &StopWordList,
) -> Result<BleuReport, MetricsError> {
    if candidates.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if max_n == 0 {
        return Err(MetricsError::ZeroOrder);
    }
    let mut matches = vec![0; max_n];
    let mut totals = vec![0; max_n];
    let (mut c_len, mut r_len) = (0, 0);
    for (i, (cand, refs)) in candidates.iter().zip(references).enumerate() {
        if refs.is_empty() {
            return Err(MetricsError::NoReferences(i));
        }
        let cand = stopwords.filter(cand);
        let refs: Vec<Vec<&str>> = refs.iter().map(|r| stopwords.filter(r)).collect();
        c_len += cand.len();
        r_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("at least one reference");
        for n in 1..=max_n {
            let mut max_ref: HashMap<&[&str], usize> = HashMap::new();
            for r in &refs {
                for (g, k) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in ngram_counts(&cand, n) {
                matches[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0));
                totals[n - 1] += k;
            }
        }
    }
    let bp = if c_len == 0 {
        log::warn!("no candidate tokens remain after stop-word filtering; BLEU is 0");
        0.0
    } else {
        brevity_penalty(c_len, r_len)
    };
    Ok(assemble(matches, totals, bp, c_len, r_len))
}

/// Percentage of distinct n-grams among all n-gram occurrences. N-grams
/// do not cross sequence boundaries. Returns 0 when no sequence is long
/// enough to hold an n-gram.
pub fn distinct_ngram_ratio<T: Hash + Eq>(sequences: &[Vec<T>], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut distinct: HashSet<&[T]> = HashSet::new();
    let mut total = 0usize;
    for s in sequences {
        for w in s.windows(n) {
            distinct.insert(w);
            total += 1;
        }
    }
    if total == 0 {
        log::warn!("no {n}-grams in {} sequences", sequences.len());
        return 0.0;
    }
    100.0 * distinct.len() as f64 / total as f64
}

/// Pooled n-gram counts over a whole training split, used as a single
/// reference bag.
#[derive(Debug, Clone)]
pub struct TrainingIndex {
    max_n: usize,
    counts: Vec<HashMap<Vec<String>, usize>>,
    stopwords: StopWordList,
}

impl TrainingIndex {
    pub fn new<S: AsRef<str>>(sentences: &[Vec<S>], max_n: usize, stopwords: StopWordList) -> Self {
        let mut counts = vec![HashMap::new(); max_n];
        for s in sentences {
            let s = stopwords.filter(s);
            for (n, table) in counts.iter_mut().enumerate() {
                for (g, k) in ngram_counts(&s, n + 1) {
                    *table
                        .entry(g.iter().map(|t| t.to_string()).collect())
                        .or_insert(0) += k;
                }
            }
        }
        Self {
            max_n,
            counts,
            stopwords,
        }
    }

    /// `1 − BLEU(input, training bag)` with the brevity penalty fixed at 1
    /// (the pooled bag has no meaningful length) and orders capped at the
    /// filtered input length. An input made only of stop words has nothing
    /// unseen and scores 0.
    pub fn unseen_ratio<S: AsRef<str>>(&self, input: &[S]) -> Result<f64, MetricsError> {
        if input.is_empty() {
            return Err(MetricsError::EmptyInput);
        }
        let cand = self.stopwords.filter(input);
        if cand.is_empty() {
            return Ok(0.0);
        }
        let orders = self.max_n.min(cand.len());
        let mut matches = vec![0; orders];
        let mut totals = vec![0; orders];
        for n in 1..=orders {
            for (g, k) in ngram_counts(&cand, n) {
                let key: Vec<String> = g.iter().map(|t| t.to_string()).collect();
                let avail = self.counts[n - 1].get(&key).copied().unwrap_or(0);
                matches[n - 1] += k.min(avail);
                totals[n - 1] += k;
            }
        }
        let report = assemble(matches, totals, 1.0, cand.len(), cand.len());
        Ok(1.0 - report.score)
    }
}

/// BLEU of a subset of the evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bucket {
    pub label: String,
    pub count: usize,
    pub bleu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub stopwords: String,
    pub bleu: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
    pub distinct_3: f64,
    pub mean_unseen_ratio: Option<f64>,
    pub by_input_length: Vec<Bucket>,
    pub by_unseen_ratio: Vec<Bucket>,
}

/// One evaluated story: its input, generated text, and gold continuation,
/// each flattened to a single token sequence.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub input: Vec<String>,
    pub candidate: Vec<String>,
    pub reference: Vec<String>,
}

const LENGTH_EDGES: [usize; 4] = [5, 10, 15, 20];
const UNSEEN_EDGES: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

fn bucket_bleu(items: &[&EvalItem], stopwords: &StopWordList) -> Option<f64> {
    let cands: Vec<Vec<String>> = items.iter().map(|i| i.candidate.clone()).collect();
    let refs: Vec<Vec<Vec<String>>> = items.iter().map(|i| vec![i.reference.clone()]).collect();
    bleu(&cands, &refs, DEFAULT_MAX_N, stopwords)
        .ok()
        .map(|r| r.score)
}

fn length_label(i: usize) -> String {
    match i {
        0 => format!("1-{}", LENGTH_EDGES[0]),
        i if i < LENGTH_EDGES.len() => format!("{}-{}", LENGTH_EDGES[i - 1] + 1, LENGTH_EDGES[i]),
        _ => format!("{}+", LENGTH_EDGES[LENGTH_EDGES.len() - 1] + 1),
    }
}

fn unseen_label(i: usize) -> String {
    let lo = if i == 0 { 0.0 } else { UNSEEN_EDGES[i - 1] };
    let hi = UNSEEN_EDGES.get(i).copied().unwrap_or(1.0);
    format!("{lo:.1}-{hi:.1}")
}

/// Full report: corpus BLEU, distinct-1/2/3 over candidates, and BLEU
/// bucketed by input length and (when a training index is given) by the
/// input's unseen ratio.
pub fn evaluate(
    items: &[EvalItem],
    index: Option<&TrainingIndex>,
    stopwords: &StopWordList,
) -> Result<EvaluationReport, MetricsError> {
    let cands: Vec<Vec<String>> = items.iter().map(|i| i.candidate.clone()).collect();
    let refs: Vec<Vec<Vec<String>>> = items.iter().map(|i| vec![i.reference.clone()]).collect();
    let overall = bleu(&cands, &refs, DEFAULT_MAX_N, stopwords)?;

    let mut by_len: Vec<Vec<&EvalItem>> = vec![Vec::new(); LENGTH_EDGES.len() + 1];
    for item in items {
        let b = LENGTH_EDGES
            .iter()
            .position(|&e| item.input.len() <= e)
            .unwrap_or(LENGTH_EDGES.len());
        by_len[b].push(item);
    }
    let by_input_length = by_len
        .iter()
        .enumerate()
        .map(|(i, b)| Bucket {
            label: length_label(i),
            count: b.len(),
            bleu: bucket_bleu(b, stopwords),
        })
        .collect();

    let (mean_unseen_ratio, by_unseen_ratio) = match index {
        None => (None, Vec::new()),
        Some(index) => {
            let mut by_unseen: Vec<Vec<&EvalItem>> = vec![Vec::new(); UNSEEN_EDGES.len() + 1];
            let mut sum = 0.0;
            let mut n = 0usize;
            for item in items.iter().filter(|i| !i.input.is_empty()) {
                let u = index.unseen_ratio(&item.input)?;
                sum += u;
                n += 1;
                let b = UNSEEN_EDGES
                    .iter()
                    .position(|&e| u < e)
                    .unwrap_or(UNSEEN_EDGES.len());
                by_unseen[b].push(item);
            }
            let buckets = by_unseen
                .iter()
                .enumerate()
                .map(|(i, b)| Bucket {
                    label: unseen_label(i),
                    count: b.len(),
                    bleu: bucket_bleu(b, stopwords),
                })
                .collect();
            ((n > 0).then(|| sum / n as f64), buckets)
        }
    };

    Ok(EvaluationReport {
        stopwords: stopwords.version().to_string(),
        bleu: overall.score,
        precisions: overall.precisions,
        brevity_penalty: overall.brevity_penalty,
        distinct_1: distinct_ngram_ratio(&cands, 1),
        distinct_2: distinct_ngram_ratio(&cands, 2),
        distinct_3: distinct_ngram_ratio(&cands, 3),
        mean_unseen_ratio,
        by_input_length,
        by_unseen_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn stop_word_list_is_pinned() {
        let s = StopWordList::english_v1();
        assert!(s.len() >= 140 && s.len() <= 160, "{}", s.len());
        assert!(s.contains("the") && s.contains("a") && !s.contains("cat"));
    }

    #[test]
    fn short_candidate_brevity() {
        let r = bleu(
            &[t("cat sat")],
            &[vec![t("cat sat mat")]],
            2,
            &StopWordList::empty(),
        )
        .unwrap();
        assert_eq!(r.precisions, vec![1.0, 1.0]);
        assert!((r.score - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn identity_and_zero_overlap() {
        let c = vec![t("dog barked loudly today")];
        let r = bleu(&c, &[vec![c[0].clone()]], 4, &StopWordList::english_v1()).unwrap();
        assert_eq!(r.score, 1.0);
        let z = bleu(
            &c,
            &[vec![t("cat purred softly again")]],
            4,
            &StopWordList::empty(),
        )
        .unwrap();
        assert_eq!(z.score, 0.0);
    }

    #[test]
    fn mismatch_rejected() {
        assert!(matches!(
            bleu(&[t("a")], &[], 4, &StopWordList::empty()),
            Err(MetricsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn distinct_examples() {
        assert!((distinct_ngram_ratio(&[vec!["x"; 100]], 1) - 1.0).abs() < 1e-12);
        assert_eq!(distinct_ngram_ratio(&[t("a b c d")], 1), 100.0);
        assert!((distinct_ngram_ratio(&[t("a b a b")], 2) - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(distinct_ngram_ratio(&[t("a")], 2), 0.0);
    }

    #[test]
    fn unseen_extremes() {
        let train = vec![t("dog chased ball park"), t("cat slept sofa")];
        let idx = TrainingIndex::new(&train, 4, StopWordList::english_v1());
        assert_eq!(
            idx.unseen_ratio(&t("the dog chased the ball")).unwrap(),
            0.0
        );
        assert_eq!(idx.unseen_ratio(&t("zebra danced")).unwrap(), 1.0);
        assert!(matches!(
            idx.unseen_ratio::<String>(&[]),
            Err(MetricsError::EmptyInput)
        ));
    }
}
