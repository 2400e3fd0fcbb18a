//! Shared fixtures for the round benchmarks.

use trispec_core::harness::{load_source, ExperimentConfig, FamilyKind, ModelFamily};
use trispec_core::TokenId;

/// The reference family and its first held-out prompt.
pub fn reference(family: FamilyKind) -> (ModelFamily, Vec<TokenId>) {
    let cfg = ExperimentConfig {
        family,
        ..ExperimentConfig::default()
    };
    let corpus = load_source(&cfg.corpus, cfg.tokenizer).expect("bundled corpus");
    let family = ModelFamily::build(&cfg, &corpus).expect("reference family");
    let prompt = corpus.prompts(cfg.prompt_fraction, 1).remove(0);
    (family, prompt)
}
