//! Conditional next-token oracles playing drafter, proxy or target.
//!
//! A [`ModelKind`] is an immutable, pure function from context to
//! [`Distribution`]. A [`ModelOracle`] wraps one behind an `Arc` together with
//! its own forward-pass counter; [`ModelOracle::handle`] gives a fresh counter
//! over the same model so concurrent runs never mix their call counts.

mod ngram;
mod proxy;
mod table;

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ngram::{corpus_fingerprint, train_ngram, NGramModel, NGramSpec};
pub use proxy::{NoiseKind, PerturbedModel, ProxyDerivation};
pub use table::TableModel;

use crate::prob::{Distribution, TokenId};

pub const MODEL_FORMAT: &str = "trispec-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("corpus has {len} tokens, order {order} needs at least {order}")]
    CorpusTooShort { len: usize, order: usize },
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("token {token} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: TokenId, vocab_size: usize },
    #[error("unsupported model file: {0}")]
    UnsupportedFormat(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Table(TableModel),
    NGram(NGramModel),
    Perturbed(PerturbedModel),
}

impl ModelKind {
    pub fn vocab_size(&self) -> usize {
        match self {
            ModelKind::Table(m) => m.vocab_size(),
            ModelKind::NGram(m) => m.vocab_size(),
            ModelKind::Perturbed(m) => m.vocab_size(),
        }
    }

    pub fn dist(&self, ctx: &[TokenId]) -> Distribution {
        match self {
            ModelKind::Table(m) => m.dist(ctx),
            ModelKind::NGram(m) => m.dist(ctx),
            ModelKind::Perturbed(m) => m.dist(ctx),
        }
    }

    /// Corpus unigram, when the model has one.
    pub fn unigram(&self) -> Option<Distribution> {
        match self {
            ModelKind::NGram(m) => Some(m.unigram()),
            ModelKind::Perturbed(m) => m.base().unigram(),
            ModelKind::Table(_) => None,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            ModelKind::Table(_) => "table".into(),
            ModelKind::NGram(m) => format!("ngram(order={})", m.order()),
            ModelKind::Perturbed(m) => {
                format!("perturbed(eps={}, {})", m.epsilon(), m.base().describe())
            }
        }
    }

    pub(crate) fn to_dump(&self) -> ModelDump {
        match self {
            ModelKind::Table(m) => ModelDump::Table(m.to_dump()),
            ModelKind::NGram(m) => ModelDump::Ngram(m.to_dump()),
            ModelKind::Perturbed(m) => ModelDump::Perturbed {
                epsilon: m.epsilon(),
                noise: m.noise_kind(),
                base: Box::new(m.base().to_dump()),
            },
        }
    }

    pub(crate) fn from_dump(dump: ModelDump) -> Result<Self, ModelError> {
        Ok(match dump {
            ModelDump::Table(t) => ModelKind::Table(TableModel::from_dump(t)?),
            ModelDump::Ngram(n) => ModelKind::NGram(NGramModel::from_dump(n)?),
            ModelDump::Perturbed { epsilon, noise, base } => {
                if !(0.0..=1.0).contains(&epsilon) {
                    return Err(ModelError::InvalidSpec(format!("epsilon {epsilon} outside [0, 1]")));
                }
                let base = Arc::new(ModelKind::from_dump(*base)?);
                ModelKind::Perturbed(PerturbedModel::new(base, ProxyDerivation { epsilon, noise }))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub(crate) enum ModelDump {
    Table(table::TableDump),
    Ngram(ngram::NGramDump),
    Perturbed {
        epsilon: f64,
        noise: NoiseKind,
        base: Box<ModelDump>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ModelFile {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub model: ModelDump,
}

/// A model plus a forward-pass counter.
#[derive(Debug)]
pub struct ModelOracle {
    name: String,
    kind: Arc<ModelKind>,
    calls: AtomicU64,
}

impl ModelOracle {
    pub fn new(name: impl Into<String>, kind: ModelKind) -> Self {
        Self::from_shared(name, Arc::new(kind))
    }

    pub fn from_shared(name: impl Into<String>, kind: Arc<ModelKind>) -> Self {
        Self {
            name: name.into(),
            kind,
            calls: AtomicU64::new(0),
        }
    }

    pub fn table(name: impl Into<String>, model: TableModel) -> Self {
        Self::new(name, ModelKind::Table(model))
    }

    pub fn ngram(name: impl Into<String>, model: NGramModel) -> Self {
        Self::new(name, ModelKind::NGram(model))
    }

    /// Same model, fresh counter.
    pub fn handle(&self) -> Self {
        Self::from_shared(self.name.clone(), Arc::clone(&self.kind))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn shared_kind(&self) -> Arc<ModelKind> {
        Arc::clone(&self.kind)
    }

    pub fn vocab_size(&self) -> usize {
        self.kind.vocab_size()
    }

    /// Forward passes so far.
    pub fn invocations(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn count(&self) {
        self.calls.fetch_add(1, Ordering::Relaxed);
    }

    /// One forward pass at the tip of `ctx`.
    pub fn next_dist(&self, ctx: &[TokenId]) -> Distribution {
        self.count();
        self.kind.dist(ctx)
    }

    /// One parallel pass over `drafted`: `drafted.len() + 1` distributions,
    /// position `i` conditioned on `ctx + drafted[..i]`.
    pub fn batch_score(&self, ctx: &[TokenId], drafted: &[TokenId]) -> Vec<Distribution> {
        self.count();
        let mut buf = Vec::with_capacity(ctx.len() + drafted.len());
        buf.extend_from_slice(ctx);
        let mut out = Vec::with_capacity(drafted.len() + 1);
        out.push(self.kind.dist(&buf));
        for &t in drafted {
            buf.push(t);
            out.push(self.kind.dist(&buf));
        }
        out
    }

    /// One parallel pass over arbitrary contexts (flattened tree scoring).
    pub fn score_contexts(&self, contexts: &[Vec<TokenId>]) -> Vec<Distribution> {
        self.count();
        contexts.iter().map(|c| self.kind.dist(c)).collect()
    }

    /// Uncounted lookup for probes and test oracles.
    pub fn peek(&self, ctx: &[TokenId]) -> Distribution {
        self.kind.dist(ctx)
    }

    /// Mixture proxy over this model, with its own counter.
    pub fn derive_proxy(&self, name: impl Into<String>, deriv: ProxyDerivation) -> Self {
        let model = PerturbedModel::new(Arc::clone(&self.kind), deriv);
        Self::new(name, ModelKind::Perturbed(model))
    }

    /// Structured model file, for embedding in larger documents.
    pub fn to_value(&self) -> Result<serde_json::Value, ModelError> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_FORMAT_VERSION,
            name: self.name.clone(),
            model: self.kind.to_dump(),
        };
        Ok(serde_json::to_value(&file)?)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self, ModelError> {
        Self::from_file(serde_json::from_value(value)?)
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        Ok(serde_json::to_string(&self.to_value()?)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        Self::from_file(serde_json::from_str(text)?)
    }

    fn from_file(file: ModelFile) -> Result<Self, ModelError> {
        if file.format != MODEL_FORMAT || file.version != MODEL_FORMAT_VERSION {
            return Err(ModelError::UnsupportedFormat(format!(
                "{} v{}",
                file.format, file.version
            )));
        }
        Ok(Self::new(file.name, ModelKind::from_dump(file.model)?))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
