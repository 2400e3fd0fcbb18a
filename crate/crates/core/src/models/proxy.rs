use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::ModelKind;
use crate::prob::{Distribution, TokenId};

/// What the proxy mixes into the target distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Uniform,
    /// Corpus unigram of the base model; falls back to uniform for bases
    /// without one.
    Unigram,
}

impl std::str::FromStr for NoiseKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(NoiseKind::Uniform),
            "unigram" => Ok(NoiseKind::Unigram),
            other => Err(format!("unknown noise kind '{other}' (uniform|unigram)")),
        }
    }
}

/// Divergence knob for deriving a proxy from a target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyDerivation {
    pub epsilon: f64,
    pub noise: NoiseKind,
}

impl ProxyDerivation {
    pub fn new(epsilon: f64, noise: NoiseKind) -> Self {
        Self { epsilon, noise }
    }
}

impl Default for ProxyDerivation {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            noise: NoiseKind::Unigram,
        }
    }
}

/// `(1 - ε) · base(ctx) + ε · noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedModel {
    base: Arc<ModelKind>,
    epsilon: f64,
    noise_kind: NoiseKind,
    noise: Distribution,
}

impl PerturbedModel {
    pub(crate) fn new(base: Arc<ModelKind>, deriv: ProxyDerivation) -> Self {
        let v = base.vocab_size();
        let noise = match (deriv.noise, base.unigram()) {
            (NoiseKind::Unigram, Some(u)) => u,
            _ => Distribution::uniform(v),
        };
        Self {
            base,
            epsilon: deriv.epsilon.clamp(0.0, 1.0),
            noise_kind: deriv.noise,
            noise,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn noise_kind(&self) -> NoiseKind {
        self.noise_kind
    }

    pub fn base(&self) -> &ModelKind {
        &self.base
    }

    pub fn vocab_size(&self) -> usize {
        self.noise.len()
    }

    pub fn dist(&self, ctx: &[TokenId]) -> Distribution {
        let base = self.base.dist(ctx);
        if self.epsilon == 0.0 {
            return base;
        }
        let keep = 1.0 - self.epsilon;
        let probs = base
            .probs()
            .iter()
            .zip(self.noise.probs())
            .map(|(b, n)| keep * b + self.epsilon * n)
            .collect();
        Distribution::from_normalized_unchecked(probs)
    }
}
