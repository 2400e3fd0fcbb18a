use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::prob::{Distribution, TokenId};

type RawCounts = HashMap<Box<[TokenId]>, HashMap<TokenId, u32>>;

/// Order and additive smoothing for an n-gram model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NGramSpec {
    pub order: usize,
    pub smoothing: f64,
}

impl NGramSpec {
    pub const DEFAULT_SMOOTHING: f64 = 0.1;

    pub fn new(order: usize) -> Self {
        Self {
            order,
            smoothing: Self::DEFAULT_SMOOTHING,
        }
    }

    pub fn with_smoothing(mut self, smoothing: f64) -> Self {
        self.smoothing = smoothing;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    /// Sorted by token id.
    counts: Vec<(TokenId, u32)>,
}

/// Additive-smoothed n-gram model with backoff to shorter contexts.
///
/// `tables[j]` holds counts for contexts of exactly `j` tokens; `tables[0]`
/// is the unigram. A context is looked up at the longest usable length
/// (`order - 1`, or shorter near the start of a sequence) and backs off one
/// token at a time until a seen context is found.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    spec: NGramSpec,
    vocab_size: usize,
    fingerprint: u64,
    tables: Vec<HashMap<Box<[TokenId]>, ContextCounts>>,
}

/// FNV-1a over the little-endian token ids.
pub fn corpus_fingerprint(corpus: &[TokenId]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for t in corpus {
        for b in t.0.to_le_bytes() {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

pub fn train_ngram(corpus: &[TokenId], spec: NGramSpec, vocab_size: usize) -> Result<NGramModel, ModelError> {
    if spec.order == 0 {
        return Err(ModelError::InvalidSpec("n-gram order must be >= 1".into()));
    }
    if !(spec.smoothing.is_finite() && spec.smoothing >= 0.0) {
        return Err(ModelError::InvalidSpec(format!(
            "smoothing must be finite and >= 0, got {}",
            spec.smoothing
        )));
    }
    if vocab_size < 2 {
        return Err(ModelError::InvalidSpec(format!(
            "vocabulary size must be >= 2, got {vocab_size}"
        )));
    }
    if corpus.len() < spec.order {
        return Err(ModelError::CorpusTooShort {
            len: corpus.len(),
            order: spec.order,
        });
    }
    if let Some(bad) = corpus.iter().find(|t| t.index() >= vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            token: *bad,
            vocab_size,
        });
    }

    let mut raw: Vec<RawCounts> = vec![HashMap::new(); spec.order];
    for (i, &next) in corpus.iter().enumerate() {
        for (len, table) in raw.iter_mut().enumerate() {
            if len > i {
                break;
            }
            let key: Box<[TokenId]> = corpus[i - len..i].into();
            *table.entry(key).or_default().entry(next).or_default() += 1;
        }
    }

    let tables = raw
        .into_iter()
        .map(|table| {
            table
                .into_iter()
                .map(|(ctx, counts)| {
                    let mut counts: Vec<(TokenId, u32)> = counts.into_iter().collect();
                    counts.sort_unstable_by_key(|&(t, _)| t);
                    let total = counts.iter().map(|&(_, c)| u64::from(c)).sum();
                    (ctx, ContextCounts { total, counts })
                })
                .collect()
        })
        .collect();

    Ok(NGramModel {
        spec,
        vocab_size,
        fingerprint: corpus_fingerprint(corpus),
        tables,
    })
}

impl NGramModel {
    pub fn spec(&self) -> NGramSpec {
        self.spec
    }

    pub fn order(&self) -> usize {
        self.spec.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Number of distinct contexts stored, all orders.
    pub fn context_count(&self) -> usize {
        self.tables.iter().map(HashMap::len).sum()
    }

    fn smoothed(&self, counts: &ContextCounts) -> Distribution {
        let alpha = self.spec.smoothing;
        let denom = counts.total as f64 + alpha * self.vocab_size as f64;
        let mut probs = vec![alpha / denom; self.vocab_size];
        for &(t, c) in &counts.counts {
            probs[t.index()] = (f64::from(c) + alpha) / denom;
        }
        Distribution::from_normalized_unchecked(probs)
    }

    /// Length of the context actually used for `ctx` after backoff.
    pub fn matched_context_len(&self, ctx: &[TokenId]) -> usize {
        let longest = ctx.len().min(self.spec.order - 1);
        (0..=longest)
            .rev()
            .find(|&len| {
                self.tables[len]
                    .get(&ctx[ctx.len() - len..])
                    .is_some_and(|c| c.total > 0)
            })
            .unwrap_or(0)
    }

    pub fn dist(&self, ctx: &[TokenId]) -> Distribution {
        let len = self.matched_context_len(ctx);
        let counts = &self.tables[len][&ctx[ctx.len() - len..]];
        self.smoothed(counts)
    }

    /// The smoothed unigram.
    pub fn unigram(&self) -> Distribution {
        self.smoothed(&self.tables[0][&[][..]])
    }

    pub(crate) fn to_dump(&self) -> NGramDump {
        let tables = self
            .tables
            .iter()
            .map(|table| {
                let mut rows: Vec<NGramRow> = table
                    .iter()
                    .map(|(ctx, c)| NGramRow {
                        context: ctx.iter().map(|t| t.0).collect(),
                        counts: c.counts.iter().map(|&(t, n)| [t.0, n]).collect(),
                    })
                    .collect();
                rows.sort_unstable_by(|a, b| a.context.cmp(&b.context));
                rows
            })
            .collect();
        NGramDump {
            order: self.spec.order,
            smoothing: self.spec.smoothing,
            vocab_size: self.vocab_size,
            fingerprint: format!("{:016x}", self.fingerprint),
            tables,
        }
    }

    pub(crate) fn from_dump(dump: NGramDump) -> Result<Self, ModelError> {
        let spec = NGramSpec {
            order: dump.order,
            smoothing: dump.smoothing,
        };
        if spec.order == 0 || dump.tables.len() != spec.order {
            return Err(ModelError::InvalidSpec(format!(
                "n-gram dump has {} tables for order {}",
                dump.tables.len(),
                spec.order
            )));
        }
        if !(spec.smoothing.is_finite() && spec.smoothing >= 0.0) || dump.vocab_size < 2 {
            return Err(ModelError::InvalidSpec("bad smoothing or vocabulary".into()));
        }
        let fingerprint = u64::from_str_radix(&dump.fingerprint, 16)
            .map_err(|e| ModelError::InvalidSpec(format!("bad fingerprint: {e}")))?;
        let mut tables = Vec::with_capacity(spec.order);
        for (len, rows) in dump.tables.into_iter().enumerate() {
            let mut table = HashMap::with_capacity(rows.len());
            for row in rows {
                if row.context.len() != len {
                    return Err(ModelError::InvalidSpec(format!(
                        "context of length {} in table {len}",
                        row.context.len()
                    )));
                }
                let mut counts = Vec::with_capacity(row.counts.len());
                for [t, n] in row.counts {
                    let token = TokenId(t);
                    if token.index() >= dump.vocab_size {
                        return Err(ModelError::TokenOutOfRange {
                            token,
                            vocab_size: dump.vocab_size,
                        });
                    }
                    counts.push((token, n));
                }
                counts.sort_unstable_by_key(|&(t, _)| t);
                let total = counts.iter().map(|&(_, c)| u64::from(c)).sum();
                let ctx: Box<[TokenId]> = row.context.into_iter().map(TokenId).collect();
                table.insert(ctx, ContextCounts { total, counts });
            }
            tables.push(table);
        }
        if tables[0].get(&[][..]).is_none_or(|c| c.total == 0) {
            return Err(ModelError::InvalidSpec("n-gram dump has no unigram counts".into()));
        }
        Ok(Self {
            spec,
            vocab_size: dump.vocab_size,
            fingerprint,
            tables,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct NGramRow {
    pub context: Vec<u32>,
    /// `[token, count]` pairs.
    pub counts: Vec<[u32; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct NGramDump {
    pub order: usize,
    pub smoothing: f64,
    pub vocab_size: usize,
    pub fingerprint: String,
    pub tables: Vec<Vec<NGramRow>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(s: &[u32]) -> Vec<TokenId> {
        s.iter().map(|&t| TokenId(t)).collect()
    }

    #[test]
    fn bigram_by_hand() {
        // "abab": bigrams a->b twice, b->a once
        let corpus = ids(&[0, 1, 0, 1]);
        let m = train_ngram(&corpus, NGramSpec::new(2).with_smoothing(0.0), 2).unwrap();
        assert_eq!(m.dist(&ids(&[0])).probs(), &[0.0, 1.0]);
        assert_eq!(m.dist(&ids(&[1])).probs(), &[1.0, 0.0]);
    }

    #[test]
    fn unigram_hand_count_on_20_tokens() {
        // counts: 0 x8, 1 x5, 2 x4, 3 x3 (V = 5, token 4 unseen)
        let corpus = ids(&[0, 1, 0, 2, 0, 3, 1, 0, 2, 0, 1, 3, 0, 2, 1, 0, 3, 2, 1, 0]);
        assert_eq!(corpus.len(), 20);
        let m = train_ngram(&corpus, NGramSpec::new(1).with_smoothing(0.5), 5).unwrap();
        let denom = 20.0 + 0.5 * 5.0;
        let want = [8.5 / denom, 5.5 / denom, 4.5 / denom, 3.5 / denom, 0.5 / denom];
        for (got, want) in m.dist(&ids(&[3, 3])).probs().iter().zip(want) {
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(m.dist(&[]), m.unigram());
    }

    #[test]
    fn repeated_token_additive_formula() {
        let n = 7;
        let corpus = vec![TokenId(0); n];
        let m = train_ngram(&corpus, NGramSpec::new(1).with_smoothing(1.0), 2).unwrap();
        let nf = n as f64;
        let d = m.dist(&[]);
        assert!((d.probs()[0] - (nf + 1.0) / (nf + 2.0)).abs() < 1e-15);
        assert!((d.probs()[1] - 1.0 / (nf + 2.0)).abs() < 1e-15);
    }

    #[test]
    fn unseen_context_backs_off_to_lower_order() {
        let corpus = ids(&[0, 1, 2, 0, 1, 2, 1, 1, 0, 2]);
        let tri = train_ngram(&corpus, NGramSpec::new(3), 4).unwrap();
        let bi = train_ngram(&corpus, NGramSpec::new(2), 4).unwrap();
        // (2, 2) never occurs, so the trigram falls back to the bigram on [2]
        let ctx = ids(&[2, 2]);
        assert_eq!(tri.matched_context_len(&ctx), 1);
        assert_eq!(tri.dist(&ctx), bi.dist(&ctx));
        // token 3 never occurs at all: both back off to the unigram
        let ctx = ids(&[3, 3]);
        assert_eq!(tri.matched_context_len(&ctx), 0);
        assert_eq!(tri.dist(&ctx), tri.unigram());
    }

    #[test]
    fn short_context_uses_available_history() {
        let corpus = ids(&[0, 1, 2, 0, 1, 2]);
        let m = train_ngram(&corpus, NGramSpec::new(4), 3).unwrap();
        assert_eq!(m.matched_context_len(&ids(&[0])), 1);
        assert_eq!(m.matched_context_len(&ids(&[0, 1])), 2);
        assert_eq!(m.matched_context_len(&ids(&[2, 0, 1])), 3);
    }

    #[test]
    fn errors() {
        let corpus = ids(&[0, 1]);
        assert!(matches!(
            train_ngram(&corpus, NGramSpec::new(3), 2),
            Err(ModelError::CorpusTooShort { len: 2, order: 3 })
        ));
        assert!(matches!(
            train_ngram(&corpus, NGramSpec::new(0), 2),
            Err(ModelError::InvalidSpec(_))
        ));
        assert!(matches!(
            train_ngram(&ids(&[0, 5]), NGramSpec::new(1), 2),
            Err(ModelError::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn dump_round_trip() {
        let corpus = ids(&[0, 1, 2, 0, 1, 2, 1, 1, 0, 2]);
        let m = train_ngram(&corpus, NGramSpec::new(3), 4).unwrap();
        let back = NGramModel::from_dump(m.to_dump()).unwrap();
        assert_eq!(back, m);
    }
}
