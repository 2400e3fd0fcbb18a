//! Vocabulary, token ids, contexts and probability-vector arithmetic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RandomStream;

/// Absolute tolerance for "sums to one".
pub const PROB_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbError {
    #[error("all weights are zero; nothing to normalize")]
    AllZero,
    #[error("weight {index} is invalid ({value})")]
    InvalidWeight { index: usize, value: f64 },
    #[error("probabilities sum to {sum}, expected 1")]
    NotNormalized { sum: f64 },
    #[error("vocabulary needs at least 2 symbols, got {0}")]
    VocabularyTooSmall(usize),
    #[error("distribution over {got} tokens, expected {expected}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("temperature must be finite and non-negative, got {0}")]
    BadTemperature(f64),
}

/// Index into a vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

impl From<usize> for TokenId {
    fn from(v: usize) -> Self {
        TokenId(v as u32)
    }
}

impl std::fmt::Display for TokenId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A finite vocabulary, optionally with display symbols.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    symbols: Option<Vec<String>>,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self, ProbError> {
        if size < 2 {
            return Err(ProbError::VocabularyTooSmall(size));
        }
        Ok(Self { size, symbols: None })
    }

    pub fn with_symbols(symbols: Vec<String>) -> Result<Self, ProbError> {
        let size = symbols.len();
        if size < 2 {
            return Err(ProbError::VocabularyTooSmall(size));
        }
        Ok(Self {
            size,
            symbols: Some(symbols),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn contains(&self, token: TokenId) -> bool {
        token.index() < self.size
    }

    pub fn symbol(&self, token: TokenId) -> Option<&str> {
        self.symbols
            .as_ref()
            .and_then(|s| s.get(token.index()))
            .map(String::as_str)
    }

    pub fn symbols(&self) -> Option<&[String]> {
        self.symbols.as_deref()
    }

    /// Render a token sequence with the symbol table, falling back to `<id>`.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|t| match self.symbol(*t) {
                Some(s) => s.to_owned(),
                None => format!("<{}>", t.0),
            })
            .collect()
    }
}

/// Prompt plus committed tokens. Only grows.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Context {
    tokens: Vec<TokenId>,
}

impl Context {
    pub fn new(prompt: Vec<TokenId>) -> Self {
        Self { tokens: prompt }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn commit(&mut self, tokens: &[TokenId]) {
        self.tokens.extend_from_slice(tokens);
    }

    /// `self + extra` as a fresh vector, for scoring hypothetical continuations.
    pub fn extended(&self, extra: &[TokenId]) -> Vec<TokenId> {
        let mut v = Vec::with_capacity(self.tokens.len() + extra.len());
        v.extend_from_slice(&self.tokens);
        v.extend_from_slice(extra);
        v
    }
}

/// A normalized probability vector over a vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Distribution {
    probs: Vec<f64>,
}

impl TryFrom<Vec<f64>> for Distribution {
    type Error = ProbError;

    fn try_from(probs: Vec<f64>) -> Result<Self, Self::Error> {
        Distribution::new(probs)
    }
}

impl From<Distribution> for Vec<f64> {
    fn from(d: Distribution) -> Self {
        d.probs
    }
}

fn check_weights(weights: &[f64]) -> Result<f64, ProbError> {
    let mut sum = 0.0;
    for (index, &value) in weights.iter().enumerate() {
        if !(value.is_finite() && value >= 0.0) {
            return Err(ProbError::InvalidWeight { index, value });
        }
        sum += value;
    }
    Ok(sum)
}

impl Distribution {
    /// Validate an already-normalized vector.
    pub fn new(probs: Vec<f64>) -> Result<Self, ProbError> {
        if probs.len() < 2 {
            return Err(ProbError::VocabularyTooSmall(probs.len()));
        }
        let sum = check_weights(&probs)?;
        if (sum - 1.0).abs() > PROB_TOLERANCE {
            return Err(ProbError::NotNormalized { sum });
        }
        Ok(Self { probs })
    }

    /// Point mass at `token`.
    pub fn one_hot(size: usize, token: TokenId) -> Self {
        assert!(size >= 2 && token.index() < size);
        let mut probs = vec![0.0; size];
        probs[token.index()] = 1.0;
        Self { probs }
    }

    pub fn uniform(size: usize) -> Self {
        assert!(size >= 2);
        Self {
            probs: vec![1.0 / size as f64; size],
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    #[inline]
    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token.index()]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Most probable token; lowest index wins ties.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        TokenId(best as u32)
    }

    pub fn max_prob(&self) -> f64 {
        self.probs[self.argmax().index()]
    }

    /// Token ids ordered by descending probability, ties by ascending id.
    pub fn ranked(&self) -> Vec<TokenId> {
        let mut ids: Vec<usize> = (0..self.probs.len()).collect();
        ids.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]).then(a.cmp(&b)));
        ids.into_iter().map(|i| TokenId(i as u32)).collect()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
    }

    pub fn l1_distance(&self, other: &Distribution) -> f64 {
        self.probs.iter().zip(&other.probs).map(|(a, b)| (a - b).abs()).sum()
    }

    /// Build from already-normalized values produced by trusted arithmetic.
    pub(crate) fn from_normalized_unchecked(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        Self { probs }
    }
}

/// Scale non-negative weights to sum to one.
pub fn normalize(weights: &[f64]) -> Result<Distribution, ProbError> {
    if weights.len() < 2 {
        return Err(ProbError::VocabularyTooSmall(weights.len()));
    }
    let sum = check_weights(weights)?;
    if sum <= 0.0 {
        return Err(ProbError::AllZero);
    }
    Ok(Distribution {
        probs: weights.iter().map(|w| w / sum).collect(),
    })
}

/// Temperature shaping on probabilities.
///
/// `T = 1` is the identity, `T = 0` is the argmax one-hot, anything else is
/// `p^(1/T)` renormalized.
pub fn apply_temperature(dist: &Distribution, temperature: f64) -> Result<Distribution, ProbError> {
    if !(temperature.is_finite() && temperature >= 0.0) {
        return Err(ProbError::BadTemperature(temperature));
    }
    if temperature == 0.0 {
        return Ok(Distribution::one_hot(dist.len(), dist.argmax()));
    }
    if temperature == 1.0 {
        return Ok(dist.clone());
    }
    // Work relative to the max so p^(1/T) cannot underflow to all zeros.
    let max = dist.max_prob();
    let inv = 1.0 / temperature;
    let weights: Vec<f64> = dist
        .probs
        .iter()
        .map(|&p| if p > 0.0 { (p / max).powf(inv) } else { 0.0 })
        .collect();
    normalize(&weights)
}

/// Inverse-CDF draw over ascending token ids. Consumes exactly one uniform.
pub fn sample(dist: &Distribution, rng: &mut RandomStream) -> TokenId {
    sample_with_uniform(dist, rng.uniform())
}

/// Inverse-CDF lookup for a given `u` in `[0, 1)`.
pub fn sample_with_uniform(dist: &Distribution, u: f64) -> TokenId {
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, &p) in dist.probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            cumulative += p;
            if u < cumulative {
                return TokenId(i as u32);
            }
        }
    }
    // rounding left cumulative slightly below 1
    TokenId(last_positive as u32)
}

/// Largest minus second-largest probability.
pub fn top2_margin(dist: &Distribution) -> f64 {
    let mut first = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &p in &dist.probs {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    (first - second).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&[2.0, 2.0, 0.0]).unwrap().probs(), &[0.5, 0.5, 0.0]);
        assert_eq!(normalize(&[1.0, 3.0]).unwrap().probs(), &[0.25, 0.75]);
        assert_eq!(normalize(&[0.0, 0.0, 0.0]), Err(ProbError::AllZero));
    }

    #[test]
    fn normalize_rejects_negative_and_nan() {
        assert!(matches!(
            normalize(&[1.0, -0.5]),
            Err(ProbError::InvalidWeight { index: 1, .. })
        ));
        assert!(normalize(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn distribution_validation() {
        assert!(Distribution::new(vec![0.3, 0.7]).is_ok());
        assert!(matches!(
            Distribution::new(vec![0.3, 0.6]),
            Err(ProbError::NotNormalized { .. })
        ));
        assert_eq!(Distribution::new(vec![1.0]), Err(ProbError::VocabularyTooSmall(1)));
        assert!(Vocabulary::new(1).is_err());
        assert_eq!(Vocabulary::new(2).unwrap().size(), 2);
    }

    #[test]
    fn temperature_examples() {
        let d = Distribution::new(vec![0.3, 0.4, 0.3]).unwrap();
        assert_eq!(apply_temperature(&d, 1.0).unwrap(), d);
        assert_eq!(apply_temperature(&d, 0.0).unwrap().probs(), &[0.0, 1.0, 0.0]);
        let d = Distribution::new(vec![0.8, 0.2]).unwrap();
        let t = apply_temperature(&d, 0.5).unwrap();
        assert!(close(t.probs(), &[0.64 / 0.68, 0.04 / 0.68], 1e-12));
        assert!((t.probs()[0] - 0.9412).abs() < 1e-4);
        assert!(apply_temperature(&d, -1.0).is_err());
    }

    #[test]
    fn greedy_ties_take_lowest_index() {
        let d = Distribution::new(vec![0.4, 0.2, 0.4]).unwrap();
        assert_eq!(d.argmax(), TokenId(0));
        assert_eq!(apply_temperature(&d, 0.0).unwrap().argmax(), TokenId(0));
    }

    #[test]
    fn sample_examples() {
        let d = Distribution::one_hot(4, TokenId(2));
        let mut rng = RandomStream::new(1, "s");
        for _ in 0..20 {
            assert_eq!(sample(&d, &mut rng), TokenId(2));
        }
        let half = Distribution::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(sample_with_uniform(&half, 0.25), TokenId(0));
        assert_eq!(sample_with_uniform(&half, 0.75), TokenId(1));
    }

    #[test]
    fn sample_consumes_one_uniform() {
        let d = Distribution::new(vec![0.3, 0.7]).unwrap();
        let mut rng = RandomStream::new(9, "s");
        sample(&d, &mut rng);
        sample(&d, &mut rng);
        assert_eq!(rng.drawn(), 2);
    }

    #[test]
    fn sample_never_lands_on_zero_mass() {
        let d = Distribution::new(vec![0.5, 0.5, 0.0]).unwrap();
        assert_eq!(sample_with_uniform(&d, 0.999_999_999_999), TokenId(1));
    }

    #[test]
    fn sample_frequencies_match() {
        let d = Distribution::new(vec![0.3, 0.7]).unwrap();
        let mut rng = RandomStream::new(2024, "mc");
        let n = 100_000;
        let mut counts = [0usize; 2];
        for _ in 0..n {
            counts[sample(&d, &mut rng).index()] += 1;
        }
        let l1: f64 = counts
            .iter()
            .zip(d.probs())
            .map(|(&c, &p)| (c as f64 / n as f64 - p).abs())
            .sum();
        assert!(l1 <= 0.01, "l1 = {l1}");
    }

    #[test]
    fn margin_examples() {
        let d = Distribution::new(vec![0.8, 0.15, 0.05]).unwrap();
        assert!((top2_margin(&d) - 0.65).abs() < 1e-12);
        let d = Distribution::new(vec![0.5, 0.5, 0.0]).unwrap();
        assert_eq!(top2_margin(&d), 0.0);
        assert_eq!(top2_margin(&Distribution::one_hot(3, TokenId(1))), 1.0);
    }

    #[test]
    fn ranked_orders_by_probability_then_id() {
        let d = Distribution::new(vec![0.2, 0.4, 0.2, 0.2]).unwrap();
        assert_eq!(d.ranked(), vec![TokenId(1), TokenId(0), TokenId(2), TokenId(3)]);
    }

    #[test]
    fn context_is_append_only() {
        let mut ctx = Context::new(vec![TokenId(1)]);
        ctx.commit(&[TokenId(2), TokenId(3)]);
        assert_eq!(ctx.tokens(), &[TokenId(1), TokenId(2), TokenId(3)]);
        assert_eq!(ctx.extended(&[TokenId(0)]).len(), 4);
        assert_eq!(ctx.len(), 3);
    }

    #[test]
    fn vocabulary_render() {
        let v = Vocabulary::with_symbols(vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(v.render(&[TokenId(1), TokenId(0)]), "ba");
        assert!(v.contains(TokenId(1)));
        assert!(!v.contains(TokenId(2)));
    }

    fn weights() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..10.0, 2..12).prop_filter("not all zero", |w| w.iter().any(|&x| x > 1e-6))
    }

    proptest! {
        #[test]
        fn normalize_idempotent(w in weights()) {
            let d = normalize(&w).unwrap();
            let again = normalize(d.probs()).unwrap();
            prop_assert!(close(d.probs(), again.probs(), 1e-12));
            prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() <= PROB_TOLERANCE);
        }

        #[test]
        fn temperature_keeps_argmax(w in weights(), t in 0.01f64..5.0) {
            let d = normalize(&w).unwrap();
            let shaped = apply_temperature(&d, t).unwrap();
            prop_assert_eq!(shaped.argmax(), d.argmax());
        }

        #[test]
        fn margin_non_increasing_in_temperature(
            w in weights(),
            t1 in 0.05f64..1.0,
            t2 in 0.05f64..1.0,
        ) {
            let d = normalize(&w).unwrap();
            let top = d.max_prob();
            prop_assume!(d.probs().iter().filter(|&&p| p == top).count() == 1);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let m_lo = top2_margin(&apply_temperature(&d, lo).unwrap());
            let m_hi = top2_margin(&apply_temperature(&d, hi).unwrap());
            prop_assert!(m_hi <= m_lo + 1e-9, "T={lo}: {m_lo}, T={hi}: {m_hi}");
        }

        #[test]
        fn sampling_reproducible(w in weights(), seed in any::<u64>()) {
            let d = normalize(&w).unwrap();
            let mut a = RandomStream::new(seed, "p");
            let mut b = RandomStream::new(seed, "p");
            for _ in 0..16 {
                prop_assert_eq!(sample(&d, &mut a), sample(&d, &mut b));
            }
        }
    }
}
