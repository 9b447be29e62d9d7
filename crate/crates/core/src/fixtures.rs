//! Deterministic toy corpora: a small templated story set with a matching
//! compression corpus, and a synthetic task whose sentences carry marked
//! key tokens.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{is_subsequence, tokenize, CompressionPair, StoryExample};

const CHARACTERS: [&str; 10] = [
    "anna", "ben", "carla", "dev", "ella", "finn", "gina", "hugo", "iris", "jack",
];
const PLACES: [&str; 7] = [
    "park", "beach", "market", "forest", "school", "museum", "garden",
];
const OBJECTS: [&str; 6] = ["kite", "shell", "apple", "feather", "book", "coin"];
const FEELINGS: [&str; 3] = ["happy", "proud", "tired"];

/// Sentence split sizes of the toy story fixture.
pub const STORY_SPLITS: [usize; 3] = [50, 10, 10];
/// Pair counts of the toy compression fixture.
pub const COMPRESSION_SPLITS: [usize; 3] = [200, 20, 20];

const FUNCTION_WORDS: [&str; 10] = [
    "the", "a", "to", "at", "went", "saw", "took", "was", "home", ".",
];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Raw sentences of the story for one character and place. Even-indexed
/// characters get three sentences, odd-indexed ones four.
pub fn toy_story(character: usize, place: usize) -> Vec<String> {
    let c = capitalize(CHARACTERS[character]);
    let p = PLACES[place];
    let o = OBJECTS[(character + place) % OBJECTS.len()];
    let mut story = vec![
        format!("{c} went to the {p}."),
        format!("{c} saw a {o} at the {p}."),
        format!("{c} took the {o} home."),
    ];
    if character % 2 == 1 {
        story.push(format!(
            "{c} was {}.",
            FEELINGS[(character + place) % FEELINGS.len()]
        ));
    }
    story
}

/// All 70 toy stories in a fixed order, split 50/10/10.
pub fn toy_story_splits() -> [Vec<Vec<String>>; 3] {
    let mut all = Vec::new();
    for p in 0..PLACES.len() {
        for c in 0..CHARACTERS.len() {
            all.push(toy_story(c, p));
        }
    }
    let mut valid = all.split_off(STORY_SPLITS[0]);
    let test = valid.split_off(STORY_SPLITS[1]);
    [all, valid, test]
}

/// Drops function words and punctuation, keeping order.
pub fn content_compression(sentence: &str) -> String {
    tokenize(sentence)
        .into_iter()
        .filter(|t| !FUNCTION_WORDS.contains(&t.as_str()))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Compression pairs over random template sentences, split 200/20/20.
pub fn toy_compression_splits<R: Rng + ?Sized>(rng: &mut R) -> [Vec<(String, String)>; 3] {
    let mut make = |n: usize| {
        (0..n)
            .map(|_| {
                let c = rng.gen_range(0..CHARACTERS.len());
                let p = rng.gen_range(0..PLACES.len());
                let story = toy_story(c, p);
                let s = story[rng.gen_range(0..story.len())].clone();
                let compressed = content_compression(&s);
                (s, compressed)
            })
            .collect::<Vec<_>>()
    };
    [
        make(COMPRESSION_SPLITS[0]),
        make(COMPRESSION_SPLITS[1]),
        make(COMPRESSION_SPLITS[2]),
    ]
}

pub fn story_jsonl(stories: &[Vec<String>]) -> String {
    let mut out = String::new();
    for s in stories {
        let line = serde_json::json!({ "story": s });
        writeln!(out, "{line}").expect("writing to a String");
    }
    out
}

pub fn compression_tsv(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(o, c)| format!("{o}\t{c}\n")).collect()
}

/// Swaps two tokens of each compression so that it is no longer an
/// order-preserving subsequence of its original. Pairs where no swap
/// achieves that are written unchanged. Returns the mutated TSV and the
/// number of mutated lines.
pub fn inject_order_violations<R: Rng + ?Sized>(
    pairs: &[(String, String)],
    rng: &mut R,
) -> (String, usize) {
    let mut out = String::new();
    let mut injected = 0;
    for (o, c) in pairs {
        let original = tokenize(o);
        let mut toks = tokenize(c);
        if toks.len() >= 2 {
            for _ in 0..32 {
                let i = rng.gen_range(0..toks.len());
                let j = rng.gen_range(0..toks.len());
                toks.swap(i, j);
                if !is_subsequence(&toks, &original) {
                    injected += 1;
                    break;
                }
                toks.swap(i, j);
            }
        }
        writeln!(out, "{o}\t{}", toks.join(" ")).expect("writing to a String");
    }
    (out, injected)
}

/// Writes the toy fixture files under `dir` with the standard names.
pub fn write_toy_fixture<R: Rng + ?Sized>(dir: &Path, rng: &mut R) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let stories = toy_story_splits();
    let compression = toy_compression_splits(rng);
    for (split, s) in ["train", "valid", "test"].iter().zip(&stories) {
        fs::write(dir.join(format!("story_{split}.jsonl")), story_jsonl(s))?;
    }
    for (split, c) in ["train", "valid", "test"].iter().zip(&compression) {
        fs::write(
            dir.join(format!("compression_{split}.tsv")),
            compression_tsv(c),
        )?;
    }
    Ok(())
}

/// Synthetic corpus where each sentence is `[f, a, g, b]` for key tokens
/// `a`, `b` and random filler tokens `f`, `g`. Every sentence of a story
/// repeats the same keys, so the context predicts exactly the keys. Each compression keeps a single token, more often
/// the leading filler than the first key, so a pretrained extractor
/// mostly skips the keys.
#[derive(Debug, Clone)]
pub struct MarkedTask {
    pub stories: Vec<StoryExample>,
    pub compression: Vec<CompressionPair>,
    pub keys: HashSet<String>,
}

pub const MARKED_KEYS: usize = 8;
pub const MARKED_FILLERS: usize = 32;

fn key(i: usize) -> String {
    format!("k{}", i % MARKED_KEYS)
}

fn marked_sentence<R: Rng + ?Sized>(a: usize, b: usize, rng: &mut R) -> Vec<String> {
    vec![
        format!("f{}", rng.gen_range(0..MARKED_FILLERS)),
        key(a),
        format!("f{}", rng.gen_range(0..MARKED_FILLERS)),
        key(b),
    ]
}

/// Probability that a compression keeps the first key rather than the
/// leading filler.
const KEY_KEPT: f64 = 0.45;

pub fn marked_task<R: Rng + ?Sized>(
    stories: usize,
    story_len: usize,
    pairs: usize,
    rng: &mut R,
) -> MarkedTask {
    let mut out = Vec::with_capacity(stories);
    for _ in 0..stories {
        let a = rng.gen_range(0..MARKED_KEYS);
        let mut b = rng.gen_range(0..MARKED_KEYS);
        while b == a {
            b = rng.gen_range(0..MARKED_KEYS);
        }
        let sentences: Vec<Vec<String>> =
            (0..story_len).map(|_| marked_sentence(a, b, rng)).collect();
        let mut it = sentences.into_iter();
        out.push(StoryExample {
            input: it.next().expect("story_len is positive"),
            targets: it.collect(),
        });
    }
    let compression = (0..pairs)
        .map(|_| {
            let mut ids: Vec<usize> = (0..MARKED_KEYS).collect();
            ids.shuffle(rng);
            let original = marked_sentence(ids[0], ids[1], rng);
            let compressed = if rng.gen_bool(KEY_KEPT) {
                vec![original[1].clone()]
            } else {
                vec![original[0].clone()]
            };
            CompressionPair {
                original,
                compressed,
            }
        })
        .collect();
    MarkedTask {
        stories: out,
        compression,
        keys: (0..MARKED_KEYS).map(key).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_compression_corpus, parse_story_corpus};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn toy_splits_have_fixed_sizes_and_parse() {
        let splits = toy_story_splits();
        for (s, n) in splits.iter().zip(STORY_SPLITS) {
            assert_eq!(s.len(), n);
            assert_eq!(
                parse_story_corpus(&story_jsonl(s)).unwrap().stories.len(),
                n
            );
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = toy_compression_splits(&mut rng);
        let parsed = parse_compression_corpus(&compression_tsv(&c[0])).unwrap();
        assert_eq!(parsed.pairs.len(), COMPRESSION_SPLITS[0]);
        assert_eq!(parsed.order_violations, 0);
    }

    #[test]
    fn injected_violations_break_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = toy_compression_splits(&mut rng);
        let (tsv, injected) = inject_order_violations(&c[0], &mut rng);
        let parsed = parse_compression_corpus(&tsv).unwrap();
        assert!(injected > 0);
        assert_eq!(parsed.order_violations, injected);
    }

    #[test]
    fn marked_keys_persist() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = marked_task(3, 4, 10, &mut rng);
        let s = &t.stories[0];
        assert_eq!(s.targets.len(), 3);
        assert_eq!(
            (&s.targets[2][1], &s.targets[2][3]),
            (&s.input[1], &s.input[3])
        );
        assert!(t.keys.contains(&s.input[1]) && !t.keys.contains(&s.input[0]));
        for p in &t.compression {
            assert_eq!(p.compressed.len(), 1);
            assert!(is_subsequence(&p.compressed, &p.original));
        }
    }
}
