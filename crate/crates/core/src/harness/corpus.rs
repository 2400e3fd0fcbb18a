//! Corpus loading, tokenization and prompt extraction.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::prob::{ProbError, TokenId, Vocabulary};

/// Name of the bundled reference text.
pub const BUILTIN_REFERENCE: &str = "builtin:reference";

/// The bundled reference text.
pub const REFERENCE_TEXT: &str = include_str!("../../fixtures/reference.txt");

/// Every `HOLDOUT_EVERY`-th line is held out for prompts.
pub const HOLDOUT_EVERY: usize = 10;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("symbol {0:?} is not in the corpus vocabulary")]
    UnknownSymbol(char),
    #[error(transparent)]
    Vocabulary(#[from] ProbError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tokenizer {
    /// One token per byte; `V = 256`.
    Byte,
    /// One token per distinct character, ids in sorted character order.
    Char,
}

impl Tokenizer {
    pub fn as_str(&self) -> &'static str {
        match self {
            Tokenizer::Byte => "byte",
            Tokenizer::Char => "char",
        }
    }
}

impl fmt::Display for Tokenizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tokenizer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "byte" => Ok(Tokenizer::Byte),
            "char" => Ok(Tokenizer::Char),
            _ => Err("expected byte|char".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub tokens: Vec<TokenId>,
    pub vocab: Vocabulary,
    pub tokenizer: Tokenizer,
    chars: Vec<char>,
}

pub fn load_corpus(path: &Path, tokenizer: Tokenizer) -> Result<Corpus, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    corpus_from_text(&text, tokenizer)
}

/// Load `builtin:reference` or a file path.
pub fn load_source(source: &str, tokenizer: Tokenizer) -> Result<Corpus, CorpusError> {
    if source == BUILTIN_REFERENCE {
        corpus_from_text(REFERENCE_TEXT, tokenizer)
    } else {
        load_corpus(Path::new(source), tokenizer)
    }
}

pub fn corpus_from_text(text: &str, tokenizer: Tokenizer) -> Result<Corpus, CorpusError> {
    if text.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    match tokenizer {
        Tokenizer::Byte => Ok(Corpus {
            tokens: text.bytes().map(|b| TokenId(u32::from(b))).collect(),
            vocab: Vocabulary::new(256)?,
            tokenizer,
            chars: Vec::new(),
        }),
        Tokenizer::Char => {
            let mut chars: Vec<char> = text.chars().collect();
            chars.sort_unstable();
            chars.dedup();
            let vocab = Vocabulary::with_symbols(chars.iter().map(|c| c.to_string()).collect())?;
            let mut corpus = Corpus {
                tokens: Vec::new(),
                vocab,
                tokenizer,
                chars,
            };
            corpus.tokens = corpus.encode(text)?;
            Ok(corpus)
        }
    }
}

impl Corpus {
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, CorpusError> {
        match self.tokenizer {
            Tokenizer::Byte => Ok(text.bytes().map(|b| TokenId(u32::from(b))).collect()),
            Tokenizer::Char => text
                .chars()
                .map(|c| {
                    self.chars
                        .binary_search(&c)
                        .map(|i| TokenId(i as u32))
                        .map_err(|_| CorpusError::UnknownSymbol(c))
                })
                .collect(),
        }
    }

    pub fn decode(&self, tokens: &[TokenId]) -> String {
        match self.tokenizer {
            Tokenizer::Byte => {
                let bytes: Vec<u8> = tokens.iter().map(|t| t.0 as u8).collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
            Tokenizer::Char => self.vocab.render(tokens),
        }
    }

    fn newline(&self) -> Option<TokenId> {
        match self.tokenizer {
            Tokenizer::Byte => Some(TokenId(u32::from(b'\n'))),
            Tokenizer::Char => self.chars.binary_search(&'\n').ok().map(|i| TokenId(i as u32)),
        }
    }

    /// Non-empty lines.
    pub fn lines(&self) -> Vec<&[TokenId]> {
        match self.newline() {
            Some(nl) => self.tokens.split(|&t| t == nl).filter(|l| !l.is_empty()).collect(),
            None => vec![&self.tokens[..]],
        }
    }

    /// Training tokens: every line not held out, newline-joined.
    pub fn training_tokens(&self) -> Vec<TokenId> {
        let lines = self.lines();
        if lines.len() < 2 {
            return self.tokens.clone();
        }
        let nl = self.newline();
        let mut out = Vec::with_capacity(self.tokens.len());
        for (i, line) in lines.iter().enumerate() {
            if i % HOLDOUT_EVERY == 0 {
                continue;
            }
            out.extend_from_slice(line);
            out.extend(nl);
        }
        out
    }

    /// Held-out lines (every `HOLDOUT_EVERY`-th, starting with the first).
    pub fn heldout_lines(&self) -> Vec<&[TokenId]> {
        let lines = self.lines();
        if lines.len() < 2 {
            return lines;
        }
        lines.into_iter().step_by(HOLDOUT_EVERY).collect()
    }

    /// Prompts: the leading `fraction` of each held-out line with at least
    /// two tokens. `max = 0` keeps all of them.
    pub fn prompts(&self, fraction: f64, max: usize) -> Vec<Vec<TokenId>> {
        let mut out: Vec<Vec<TokenId>> = self
            .heldout_lines()
            .into_iter()
            .filter(|l| l.len() >= 2)
            .map(|l| {
                let cut = ((l.len() as f64 * fraction) as usize).clamp(1, l.len() - 1);
                l[..cut].to_vec()
            })
            .collect();
        if max > 0 {
            out.truncate(max);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_ids_follow_sorted_order() {
        let c = corpus_from_text("abcabc", Tokenizer::Char).unwrap();
        assert_eq!(c.vocab.size(), 3);
        assert_eq!(c.tokens, [0, 1, 2, 0, 1, 2].map(TokenId));
        assert_eq!(c.decode(&c.tokens), "abcabc");
        let c = corpus_from_text("cab", Tokenizer::Char).unwrap();
        assert_eq!(c.tokens, [2, 0, 1].map(TokenId));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(
            corpus_from_text("", Tokenizer::Char),
            Err(CorpusError::EmptyCorpus)
        ));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.txt");
        std::fs::write(&p, "").unwrap();
        assert!(matches!(
            load_corpus(&p, Tokenizer::Byte),
            Err(CorpusError::EmptyCorpus)
        ));
        assert!(matches!(
            load_corpus(&dir.path().join("missing"), Tokenizer::Byte),
            Err(CorpusError::Io { .. })
        ));
    }

    #[test]
    fn byte_vocab_is_fixed() {
        for text in ["a", "hello world", "\u{e9}t\u{e9}"] {
            let c = corpus_from_text(text, Tokenizer::Byte).unwrap();
            assert_eq!(c.vocab.size(), 256);
            assert_eq!(c.tokens.len(), text.len());
            assert_eq!(c.decode(&c.tokens), text);
        }
    }

    #[test]
    fn encode_rejects_unseen_chars() {
        let c = corpus_from_text("ab", Tokenizer::Char).unwrap();
        assert!(matches!(c.encode("abz"), Err(CorpusError::UnknownSymbol('z'))));
    }

    #[test]
    fn holdout_and_prompts() {
        let text: String = (0..25).map(|i| format!("line number {i}\n")).collect();
        let c = corpus_from_text(&text, Tokenizer::Char).unwrap();
        assert_eq!(c.lines().len(), 25);
        let held = c.heldout_lines();
        assert_eq!(held.len(), 3);
        assert_eq!(c.decode(held[1]), "line number 10");
        let train = c.decode(&c.training_tokens());
        assert!(!train.contains("number 0\n") && !train.contains("number 20\n"));
        assert!(train.contains("number 11\n"));
        let prompts = c.prompts(0.5, 0);
        assert_eq!(prompts.len(), 3);
        assert_eq!(c.decode(&prompts[0]), "line n");
        assert_eq!(c.prompts(0.5, 2).len(), 2);
    }

    #[test]
    fn builtin_reference_loads() {
        let c = load_source(BUILTIN_REFERENCE, Tokenizer::Char).unwrap();
        assert!(c.tokens.len() > 1000);
        assert!(!c.prompts(0.5, 0).is_empty());
    }
}
