//! Token ↔ id mapping shared by every model component.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
/// Ends a sentence or a skeleton.
pub const EOS: TokenId = 3;
/// Emitted as a whole sentence to end a story.
pub const EOS_STORY: TokenId = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<unk>", "<s>", "</s>", "</story>"];
pub const DEFAULT_MAX_SIZE: usize = 20_000;

const HEADER: &str = "# reserved ids: 0=<pad> 1=<unk> 2=<s> 3=</s> 4=</story>; the token on line n after this header has id n+5";

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocabulary io: {0}")]
    Io(#[from] io::Error),
    #[error("vocabulary file has no header line")]
    MissingHeader,
    #[error("vocabulary line {line}: {reason}")]
    BadEntry { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, ids }
    }

    /// Keeps the most frequent tokens, ties broken lexicographically, so
    /// that the total size including reserved ids is at most `max_size`.
    pub fn build<'a, I, S>(sentences: I, max_size: usize) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for sentence in sentences {
            for tok in sentence {
                let tok = tok.as_ref();
                if !RESERVED.contains(&tok) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let room = max_size.saturating_sub(RESERVED.len());
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(room).map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens
            .get(id)
            .map(String::as_str)
            .unwrap_or(RESERVED[UNK])
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Fraction of tokens that encode to UNK.
    pub fn unk_rate<S: AsRef<str>>(&self, sentences: &[Vec<S>]) -> f64 {
        let total: usize = sentences.iter().map(Vec::len).sum();
        if total == 0 {
            return 0.0;
        }
        let unk = sentences
            .iter()
            .flatten()
            .filter(|t| !self.contains(t.as_ref()))
            .count();
        unk as f64 / total as f64
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for t in &self.tokens[RESERVED.len()..] {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, VocabError> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.starts_with('#') => {}
            _ => return Err(VocabError::MissingHeader),
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (n, line) in lines.enumerate() {
            let file_line = n + 2;
            if line.is_empty() || line.contains(char::is_whitespace) {
                return Err(VocabError::BadEntry {
                    line: file_line,
                    reason: format!("invalid token {line:?}"),
                });
            }
            if RESERVED.contains(&line) {
                return Err(VocabError::BadEntry {
                    line: file_line,
                    reason: format!("reserved token {line:?} listed"),
                });
            }
            if let Some(prev) = seen.insert(line, file_line) {
                return Err(VocabError::BadEntry {
                    line: file_line,
                    reason: format!("duplicate of line {prev}"),
                });
            }
            tokens.push(line.to_string());
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        Self::parse(&fs::read_to_string(path)?)
    }
}
