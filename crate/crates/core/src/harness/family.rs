//! Drafter / proxy / target triples and their on-disk form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::models::{train_ngram, ModelOracle, NGramSpec, NoiseKind, ProxyDerivation};

use super::config::{ExperimentConfig, FamilyKind};
use super::corpus::{Corpus, Tokenizer};
use super::HarnessError;

pub const FAMILY_FORMAT: &str = "trispec-family";
pub const FAMILY_FORMAT_VERSION: u32 = 1;

#[derive(Debug)]
pub struct ModelFamily {
    pub drafter: ModelOracle,
    pub proxy: ModelOracle,
    pub target: ModelOracle,
}

#[derive(Debug, Serialize, Deserialize)]
struct FamilyFile {
    format: String,
    version: u32,
    tokenizer: String,
    vocab_size: usize,
    drafter: serde_json::Value,
    proxy: serde_json::Value,
    target: serde_json::Value,
}

impl ModelFamily {
    pub fn new(drafter: ModelOracle, proxy: ModelOracle, target: ModelOracle) -> Self {
        Self { drafter, proxy, target }
    }

    /// Build the family described by `cfg` over `corpus`.
    pub fn build(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Self, HarnessError> {
        let v = corpus.vocab.size();
        let train = corpus.training_tokens();
        let ngram = |name: &str, order: usize| -> Result<ModelOracle, HarnessError> {
            let spec = NGramSpec::new(order).with_smoothing(cfg.smoothing);
            Ok(ModelOracle::ngram(name, train_ngram(&train, spec, v)?))
        };
        let family = match cfg.family {
            FamilyKind::Ngram => Self::new(
                ngram("drafter", cfg.drafter_order)?,
                ngram("proxy", cfg.proxy_order)?,
                ngram("target", cfg.target_order)?,
            ),
            FamilyKind::Perturbed => {
                let target = ngram("target", cfg.target_order)?;
                let drafter = match cfg.drafter_epsilon {
                    Some(eps) => target.derive_proxy("drafter", ProxyDerivation::new(eps, cfg.noise)),
                    None => ngram("drafter", cfg.drafter_order)?,
                };
                let proxy = target.derive_proxy("proxy", ProxyDerivation::new(cfg.proxy_epsilon, cfg.noise));
                Self::new(drafter, proxy, target)
            }
            FamilyKind::File => {
                let path = cfg
                    .family_path
                    .as_deref()
                    .ok_or_else(|| HarnessError::Inconsistent("family = file needs family_path".into()))?;
                Self::load(path, corpus.tokenizer)?
            }
        };
        if family.target.vocab_size() != v {
            return Err(HarnessError::FamilyMismatch(format!(
                "family vocabulary {} != corpus vocabulary {v}",
                family.target.vocab_size()
            )));
        }
        Ok(family)
    }

    /// Same models, fresh call counters.
    pub fn handles(&self) -> Self {
        Self::new(self.drafter.handle(), self.proxy.handle(), self.target.handle())
    }

    /// Replace the proxy with a mixture of the target and noise.
    pub fn with_proxy_epsilon(&self, epsilon: f64, noise: NoiseKind) -> Self {
        Self::new(
            self.drafter.handle(),
            self.target.derive_proxy("proxy", ProxyDerivation::new(epsilon, noise)),
            self.target.handle(),
        )
    }

    pub fn vocab_size(&self) -> usize {
        self.target.vocab_size()
    }

    pub fn to_json(&self, tokenizer: Tokenizer) -> Result<String, HarnessError> {
        let file = FamilyFile {
            format: FAMILY_FORMAT.into(),
            version: FAMILY_FORMAT_VERSION,
            tokenizer: tokenizer.as_str().into(),
            vocab_size: self.vocab_size(),
            drafter: self.drafter.to_value()?,
            proxy: self.proxy.to_value()?,
            target: self.target.to_value()?,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str, tokenizer: Tokenizer) -> Result<Self, HarnessError> {
        let file: FamilyFile = serde_json::from_str(text)?;
        if file.format != FAMILY_FORMAT || file.version != FAMILY_FORMAT_VERSION {
            return Err(HarnessError::FamilyMismatch(format!(
                "unsupported family file {} v{}",
                file.format, file.version
            )));
        }
        if file.tokenizer != tokenizer.as_str() {
            return Err(HarnessError::FamilyMismatch(format!(
                "family was trained with the {} tokenizer, config uses {tokenizer}",
                file.tokenizer
            )));
        }
        let family = Self::new(
            ModelOracle::from_value(file.drafter)?,
            ModelOracle::from_value(file.proxy)?,
            ModelOracle::from_value(file.target)?,
        );
        for m in [&family.drafter, &family.proxy, &family.target] {
            if m.vocab_size() != file.vocab_size {
                return Err(HarnessError::FamilyMismatch(format!(
                    "model '{}' has vocabulary {} != {}",
                    m.name(),
                    m.vocab_size(),
                    file.vocab_size
                )));
            }
        }
        Ok(family)
    }

    pub fn save(&self, path: &Path, tokenizer: Tokenizer) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_json(tokenizer)?)?;
        Ok(())
    }

    pub fn load(path: &Path, tokenizer: Tokenizer) -> Result<Self, HarnessError> {
        Self::from_json(&std::fs::read_to_string(path)?, tokenizer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::corpus::corpus_from_text;
    use crate::prob::TokenId;

    fn corpus() -> Corpus {
        let text: String = (0..40).map(|i| format!("the cat sat on mat {}\n", i % 7)).collect();
        corpus_from_text(&text, Tokenizer::Char).unwrap()
    }

    #[test]
    fn ngram_family_orders() {
        let c = corpus();
        let f = ModelFamily::build(&ExperimentConfig::default(), &c).unwrap();
        let ctx = c.encode("the c").unwrap();
        assert_eq!(f.target.peek(&ctx).argmax(), c.encode("a").unwrap()[0]);
        assert_eq!(f.vocab_size(), c.vocab.size());
    }

    #[test]
    fn save_and_load_round_trip() {
        let c = corpus();
        let mut cfg = ExperimentConfig {
            family: FamilyKind::Perturbed,
            proxy_epsilon: 0.3,
            ..ExperimentConfig::default()
        };
        let f = ModelFamily::build(&cfg, &c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("family.json");
        f.save(&path, Tokenizer::Char).unwrap();
        let g = ModelFamily::load(&path, Tokenizer::Char).unwrap();
        let ctx: Vec<TokenId> = c.tokens[..9].to_vec();
        for (a, b) in [(&f.drafter, &g.drafter), (&f.proxy, &g.proxy), (&f.target, &g.target)] {
            assert_eq!(a.peek(&ctx), b.peek(&ctx));
        }
        assert!(matches!(
            ModelFamily::load(&path, Tokenizer::Byte),
            Err(HarnessError::FamilyMismatch(_))
        ));
        cfg.family = FamilyKind::File;
        cfg.family_path = Some(path);
        let h = ModelFamily::build(&cfg, &c).unwrap();
        assert_eq!(h.proxy.peek(&ctx), f.proxy.peek(&ctx));
    }

    #[test]
    fn handles_have_fresh_counters() {
        let f = ModelFamily::build(&ExperimentConfig::default(), &corpus()).unwrap();
        f.target.next_dist(&[TokenId(0)]);
        assert_eq!(f.target.invocations(), 1);
        assert_eq!(f.handles().target.invocations(), 0);
    }
}
