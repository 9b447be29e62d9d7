//! Hand-computed BLEU cases and an independent brute-force BLEU.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use skelstory::metrics::{bleu, StopWordList};

pub fn t(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

pub struct Case {
    pub name: &'static str,
    pub candidates: Vec<&'static str>,
    pub references: Vec<Vec<&'static str>>,
    pub max_n: usize,
    pub stopwords: bool,
    pub expected: f64,
}

pub fn curated() -> Vec<Case> {
    vec![
        Case {
            name: "short candidate, perfect precision",
            candidates: vec!["cat sat"],
            references: vec![vec!["cat sat mat"]],
            max_n: 2,
            stopwords: false,
            expected: (1.0f64 - 1.5).exp(),
        },
        Case {
            name: "identity",
            candidates: vec!["w x y z"],
            references: vec![vec!["w x y z"]],
            max_n: 4,
            stopwords: false,
            expected: 1.0,
        },
        Case {
            name: "no overlap",
            candidates: vec!["w x y z"],
            references: vec![vec!["p q r s"]],
            max_n: 4,
            stopwords: false,
            expected: 0.0,
        },
        Case {
            name: "repeated unigram is clipped",
            candidates: vec!["the the the the"],
            references: vec![vec!["the cat"]],
            max_n: 1,
            stopwords: false,
            expected: 0.25,
        },
        Case {
            name: "clipping uses the best single reference",
            candidates: vec!["x x y"],
            references: vec![vec!["x y", "x x z"]],
            max_n: 1,
            stopwords: false,
            expected: 1.0,
        },
        Case {
            name: "equidistant reference lengths prefer the shorter",
            candidates: vec!["p q r"],
            references: vec![vec!["p q", "p q r s"]],
            max_n: 1,
            stopwords: false,
            expected: 1.0,
        },
        Case {
            name: "stop words are removed first",
            candidates: vec!["the cat sat on the mat"],
            references: vec![vec!["a cat sat on a mat"]],
            max_n: 3,
            stopwords: true,
            expected: 1.0,
        },
        Case {
            name: "corpus-level pooling",
            candidates: vec!["a1 b1", "c1 d1"],
            references: vec![vec!["a1 b1"], vec!["c1 e1"]],
            max_n: 2,
            stopwords: false,
            expected: (0.75f64 * 0.5).sqrt(),
        },
        Case {
            name: "geometric mean of partial precisions",
            candidates: vec!["w x y z"],
            references: vec![vec!["w x y q"]],
            max_n: 3,
            stopwords: false,
            expected: (0.75f64 * (2.0 / 3.0) * 0.5).powf(1.0 / 3.0),
        },
        Case {
            name: "brevity penalty on a half-length candidate",
            candidates: vec!["w x"],
            references: vec![vec!["w x y z"]],
            max_n: 2,
            stopwords: false,
            expected: (-1.0f64).exp(),
        },
    ]
}

/// Straightforward reimplementation: n-grams as owned vectors, counted by
/// linear search.
pub struct BruteForce {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub c: usize,
    pub r: usize,
    pub score: f64,
}

fn grams(seq: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    if seq.len() >= n {
        for i in 0..=seq.len() - n {
            out.push(seq[i..i + n].to_vec());
        }
    }
    out
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

pub fn brute_force(
    cands: &[Vec<String>],
    refs: &[Vec<Vec<String>>],
    max_n: usize,
    sw: &StopWordList,
) -> BruteForce {
    let keep = |s: &Vec<String>| -> Vec<String> {
        s.iter().filter(|w| !sw.contains(w)).cloned().collect()
    };
    let mut matches = vec![0; max_n];
    let mut totals = vec![0; max_n];
    let (mut c, mut r) = (0, 0);
    for (cand, rs) in cands.iter().zip(refs) {
        let cand = keep(cand);
        let rs: Vec<Vec<String>> = rs.iter().map(keep).collect();
        c += cand.len();
        let mut best = rs[0].len();
        for x in &rs {
            let (d, bd) = (x.len().abs_diff(cand.len()), best.abs_diff(cand.len()));
            if d < bd || (d == bd && x.len() < best) {
                best = x.len();
            }
        }
        r += best;
        for n in 1..=max_n {
            let cg = grams(&cand, n);
            let mut seen: Vec<Vec<String>> = Vec::new();
            for g in &cg {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g.clone());
                let in_cand = count(&cg, g);
                let in_ref = rs.iter().map(|x| count(&grams(x, n), g)).max().unwrap();
                matches[n - 1] += in_cand.min(in_ref);
            }
            totals[n - 1] += cg.len();
        }
    }
    let ps: Vec<f64> = (0..max_n)
        .map(|i| {
            if totals[i] == 0 {
                0.0
            } else {
                matches[i] as f64 / totals[i] as f64
            }
        })
        .collect();
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let score = if ps.contains(&0.0) {
        0.0
    } else {
        bp * (ps.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64).exp()
    };
    BruteForce {
        matches,
        totals,
        c,
        r,
        score,
    }
}

pub fn random_sentence(rng: &mut ChaCha8Rng) -> Vec<String> {
    const WORDS: [&str; 7] = ["cat", "dog", "mat", "sat", "ran", "the", "a"];
    let len = rng.gen_range(0..9);
    (0..len)
        .map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string())
        .collect()
}

/// Computes a curated case; returns the score and the expected value.
pub fn run_case(c: &Case) -> (f64, f64) {
    let cands: Vec<Vec<String>> = c.candidates.iter().map(|s| t(s)).collect();
    let refs: Vec<Vec<Vec<String>>> = c
        .references
        .iter()
        .map(|rs| rs.iter().map(|s| t(s)).collect())
        .collect();
    let sw = if c.stopwords {
        StopWordList::english_v1()
    } else {
        StopWordList::empty()
    };
    (bleu(&cands, &refs, c.max_n, &sw).unwrap().score, c.expected)
}

/// Compares the implementation with the brute force on `count` random
/// corpora. Returns the number of exact agreements and of nonzero scores.
pub fn random_agreement(rng: &mut ChaCha8Rng, count: usize) -> (usize, usize) {
    let sw = StopWordList::english_v1();
    let (mut agree, mut nonzero) = (0, 0);
    for _ in 0..count {
        let items = rng.gen_range(1..6);
        let cands: Vec<Vec<String>> = (0..items).map(|_| random_sentence(rng)).collect();
        let refs: Vec<Vec<Vec<String>>> = (0..items)
            .map(|_| {
                (0..rng.gen_range(1..4))
                    .map(|_| random_sentence(rng))
                    .collect()
            })
            .collect();
        let max_n = rng.gen_range(1..5);
        let got = bleu(&cands, &refs, max_n, &sw).unwrap();
        let want = brute_force(&cands, &refs, max_n, &sw);
        if got.matches == want.matches
            && got.totals == want.totals
            && (got.candidate_length, got.reference_length) == (want.c, want.r)
            && got.score == want.score
        {
            agree += 1;
        }
        if got.score > 0.0 {
            nonzero += 1;
        }
    }
    (agree, nonzero)
}
