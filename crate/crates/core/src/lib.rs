//! Speculative decoding with a drafter, an optional proxy verifier and a
//! target model, over small pluggable next-token oracles.

pub mod baselines;
pub mod drafting;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod prob;
pub mod rng;
pub mod router;
pub mod verification;

pub use drafting::{draft_chain, draft_tree, prune_tree_prefix, DraftChain, DraftTree, TreeLimits};
pub use models::{ModelError, ModelKind, ModelOracle, NGramSpec, NoiseKind, ProxyDerivation, TableModel};
pub use prob::{Context, Distribution, ProbError, TokenId, Vocabulary};
pub use rng::{CoinStream, RandomStream, SessionStreams};
pub use router::{MarginRule, RoundCase, RoundOutcome, TriSpecConfig, TrustGate};
pub use verification::{sd_round, verify_chain, VerifierRole, VerifyError};
